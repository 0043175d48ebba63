//! End-to-end checks of the loopback service over real sockets.

use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use ghostline_cli::config::ServiceConfig;
use ghostline_cli::runtime::{replay, EngineHandle};
use ghostline_cli::server::{router, AppState};
use ghostline_core::orchestrator::Engine;
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const PAUSE: Duration = Duration::from_millis(150);

async fn start(config: &ServiceConfig) -> SocketAddr {
    let (engine, _thread) = EngineHandle::spawn(config.engine_config().unwrap(), None).unwrap();
    let app = router(AppState::new(engine, config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

struct Client {
    ws: Ws,
    seq: u64,
}

impl Client {
    async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = connect_async(format!("ws://{addr}/v1/stream")).await.unwrap();
        Self { ws, seq: 0 }
    }

    async fn send(&mut self, kind: &str, payload: Value) {
        self.seq += 1;
        let env = json!({"v": 1, "seq": self.seq, "kind": kind, "session": "s", "payload": payload});
        self.ws.send(Message::text(env.to_string())).await.unwrap();
    }

    async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text.to_string())).await.unwrap();
    }

    async fn recv(&mut self) -> Value {
        let msg = tokio::time::timeout(Duration::from_secs(10), self.ws.next()).await.expect("reply in time");
        serde_json::from_str(msg.unwrap().unwrap().to_text().unwrap()).unwrap()
    }

    async fn call(&mut self, kind: &str, payload: Value) -> Value {
        self.send(kind, payload).await;
        self.recv().await
    }
}

fn texts(event: &Value) -> Vec<String> {
    event["payload"]["candidates"].as_array().unwrap().iter().map(|c| c["text"].as_str().unwrap().to_string()).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_session_end_to_end_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("transcript.jsonl");
    let config = ServiceConfig { record: Some(transcript.clone()), ..ServiceConfig::default() };
    let addr = start(&config).await;
    let mut c = Client::connect(addr).await;
    let mut events = Vec::new();

    let ack = c.call("sync", json!({"messages": [{"role": "user", "text": "my hometown is Porto"}]})).await;
    assert_eq!(ack["kind"], "sync_ack");
    assert_eq!(ack["seq"], 1);
    assert_eq!(ack["payload"]["new_traces"], 1);

    let started = c.call("curation_run", Value::Null).await;
    assert_eq!(
        (started["kind"].as_str(), started["payload"]["handed_over"].as_u64()),
        (Some("curation_started"), Some(1))
    );
    let mut record_id = None;
    for _ in 0..100 {
        let list = c.call("memory_list", Value::Null).await;
        if let Some(r) = list["payload"]["records"].as_array().unwrap().first() {
            assert_eq!(r["text"], "The user's hometown is Porto.");
            record_id = r["id"].as_u64();
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let record_id = record_id.expect("curated fact");
    // The worker's snapshot is adopted at the next SYNC.
    let ack = c.call("sync", json!({"messages": [{"role": "user", "text": "my hometown is Porto"}]})).await;
    assert_eq!(ack["payload"]["new_traces"], 0);

    // Keystrokes spaced beyond the debounce window each get an event; after
    // the first, each computes only the appended token.
    for (i, typed) in ["hel", "hell", "hello"].into_iter().enumerate() {
        let ev = c.call("keystroke", json!({"text": typed})).await;
        assert_eq!(ev["kind"], "candidate_event");
        assert_eq!(ev["payload"]["typed"], typed);
        if i > 0 {
            assert_eq!(ev["payload"]["timing"]["prefill_computed"], 1, "{typed}");
        }
        events.push(ev);
        tokio::time::sleep(PAUSE).await;
    }

    // A burst inside the window is answered once, for the newest text.
    for typed in ["see", "see y", "see you"] {
        c.send("keystroke", json!({"text": typed})).await;
    }
    let ev = c.recv().await;
    assert_eq!((ev["kind"].as_str(), ev["payload"]["typed"].as_str()), (Some("candidate_event"), Some("see you")));
    assert_eq!(ev["seq"], c.seq);
    let first = texts(&ev).first().cloned().expect("the corpus completes this prefix");
    events.push(ev);

    let accepted = c.call("accept", json!({"index": 0})).await;
    assert_eq!(accepted["kind"], "accept_ack");
    assert_eq!(accepted["payload"]["composing"], format!("see you{first}"));

    // Retrieval cites the curated fact until it is deleted.
    let grounded = c.call("keystroke", json!({"text": "my hometown is"})).await;
    assert_eq!(grounded["payload"]["retrieval"]["record_id"], record_id);
    let cands = grounded["payload"]["candidates"].as_array().unwrap();
    assert!(cands.iter().all(|x| x["provenance"] == json!({"kind": "memory_grounded", "record_id": record_id})));
    assert!(texts(&grounded).iter().any(|t| t.contains("Porto")), "{:?}", texts(&grounded));
    events.push(grounded);
    tokio::time::sleep(PAUSE).await;

    let deleted = c.call("memory_delete", json!({"id": record_id})).await;
    assert_eq!(
        (deleted["kind"].as_str(), deleted["payload"]["id"].as_u64()),
        (Some("memory_deleted"), Some(record_id))
    );
    let after = c.call("keystroke", json!({"text": "my hometown is"})).await;
    assert_ne!(after["payload"]["retrieval"]["record_id"], record_id);
    assert!(after["payload"]["candidates"].as_array().unwrap().iter().all(|x| x["provenance"]["kind"] == "direct"));
    events.push(after);

    // Metrics totals equal the model's counters.
    let m = c.call("metrics", Value::Null).await;
    let p = &m["payload"];
    assert_eq!(m["kind"], "metrics_report");
    assert_eq!(
        p["prefill_tokens"].as_u64().unwrap() + p["decode_tokens"].as_u64().unwrap(),
        p["forward_tokens"].as_u64().unwrap()
    );
    assert_eq!(p["generations"], 6);
    assert_eq!(p["accepts"], 1);
    drop(c);

    // Replaying the recorded transcript on a fresh engine reproduces every
    // candidate text.
    let recorded = std::fs::read_to_string(&transcript).unwrap();
    let mut engine = Engine::new(config.engine_config().unwrap()).unwrap();
    let replayed: Vec<Value> = replay(&mut engine, &recorded)
        .into_iter()
        .map(|e| serde_json::to_value(e).unwrap())
        .filter(|e| e["kind"] == "candidate_event")
        .collect();
    assert_eq!(replayed.len(), events.len());
    for (live, again) in events.iter().zip(&replayed) {
        assert_eq!(live["seq"], again["seq"]);
        assert_eq!(texts(live), texts(again));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_rejects_bad_envelopes_and_a_second_stream() {
    let addr = start(&ServiceConfig::default()).await;
    let mut c = Client::connect(addr).await;

    c.send_raw("not json").await;
    let err = c.recv().await;
    assert_eq!((err["kind"].as_str(), err["payload"]["code"].as_str()), (Some("error"), Some("malformed")));

    c.send_raw(r#"{"v":2,"seq":1,"kind":"metrics"}"#).await;
    assert_eq!(c.recv().await["payload"]["code"], "unsupported_version");

    c.send_raw(r#"{"v":1,"seq":5,"kind":"telepathy"}"#).await;
    assert_eq!(c.recv().await["payload"]["code"], "unknown_kind");

    c.send_raw(r#"{"v":1,"seq":6,"kind":"metrics"}"#).await;
    assert_eq!(c.recv().await["kind"], "metrics_report");
    c.send_raw(r#"{"v":1,"seq":6,"kind":"metrics"}"#).await;
    assert_eq!(c.recv().await["payload"]["code"], "out_of_order");

    c.send_raw(r#"{"v":1,"seq":7,"kind":"accept","session":"nobody","payload":{"index":0}}"#).await;
    assert_eq!(c.recv().await["payload"]["code"], "no_session");

    c.send_raw(r#"{"v":1,"seq":8,"kind":"sync","session":"s","payload":{"messages":[],"style_tag":"gothic"}}"#).await;
    assert_eq!(c.recv().await["payload"]["code"], "unknown_style");

    // One streaming session at a time.
    let second = connect_async(format!("ws://{addr}/v1/stream")).await;
    match second {
        Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 409),
        other => panic!("second stream was not refused: {:?}", other.map(|_| ())),
    }
    drop(c);
    // The slot frees once the first stream closes.
    let mut reopened = None;
    for _ in 0..50 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        if let Ok((ws, _)) = connect_async(format!("ws://{addr}/v1/stream")).await {
            reopened = Some(ws);
            break;
        }
    }
    assert!(reopened.is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rest_routes_share_the_engine() {
    let addr = start(&ServiceConfig::default()).await;
    let http = reqwest::Client::new();
    let base = format!("http://{addr}/v1");

    let ack: Value = http
        .post(format!("{base}/sync"))
        .json(&json!({"session": "r", "messages": [{"role": "user", "text": "my hobby is chess"}]}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(ack["session"], "r");

    let rpc = http
        .post(format!("{base}/rpc"))
        .body(r#"{"v":1,"seq":1,"kind":"keystroke","session":"r","payload":{"text":"see you"}}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(rpc.status(), 200);
    let ev: Value = rpc.json().await.unwrap();
    assert_eq!(ev["kind"], "candidate_event");

    let bad = http.post(format!("{base}/rpc")).body("{").send().await.unwrap();
    assert_eq!(bad.status(), 400);
    let missing = http.delete(format!("{base}/memory/999")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
    let body: Value = missing.json().await.unwrap();
    assert_eq!(body["code"], "not_found");

    let started: Value = http.post(format!("{base}/curation")).send().await.unwrap().json().await.unwrap();
    assert_eq!(started["handed_over"], 1);
    let status: Value = http.get(format!("{base}/curation")).send().await.unwrap().json().await.unwrap();
    assert!(status.get("worker").is_some());

    let m: Value = http.get(format!("{base}/metrics")).send().await.unwrap().json().await.unwrap();
    assert_eq!(m["syncs"], 1);
    assert_eq!(m["generations"], 1);
    assert_eq!(
        m["prefill_tokens"].as_u64().unwrap() + m["decode_tokens"].as_u64().unwrap(),
        m["forward_tokens"].as_u64().unwrap()
    );
    let list: Value = http.get(format!("{base}/memory")).send().await.unwrap().json().await.unwrap();
    assert!(list["records"].is_array());
}

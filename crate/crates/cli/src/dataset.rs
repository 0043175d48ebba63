//! Seeded synthetic cases for the memory-pipeline evaluation.
//!
//! The fact pool is every (person, attribute) pair: 25 people x 8
//! attributes = 200 facts. Each stage draws its cases from the pool with its
//! own phrasing templates.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use ghostline_core::model::STANDARD_ATTRIBUTES;
use ghostline_core::orchestrator::declarative_text;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const NAMES: [&str; 25] = [
    "Alice", "Bruno", "Chen", "Dara", "Elif", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Kemal", "Lena", "Mateo",
    "Nadia", "Oren", "Priya", "Quinn", "Rosa", "Sven", "Tariq", "Uma", "Viktor", "Wen", "Yara", "Zoe",
];

fn values(field: &str) -> &'static [&'static str] {
    match field {
        "favorite_color" => &["teal", "crimson", "mustard yellow", "navy", "lavender", "olive green", "coral", "black"],
        "favorite_food" => &["sushi", "lasagna", "pho", "tacos", "dumplings", "pad thai", "falafel", "ramen"],
        "hometown" => &["Porto", "Lima", "Osaka", "Tbilisi", "Accra", "Quebec City", "Bergen", "Cusco"],
        "pet_name" => &["Biscuit", "Mochi", "Pepper", "Captain", "Luna", "Noodle", "Ziggy", "Olive"],
        "employer" => &["Acme", "Globex", "Initech", "Umbrella Labs", "Hooli", "Stark Works", "Vandelay", "Wonka"],
        "hobby" => &["chess", "bouldering", "pottery", "birdwatching", "salsa dancing", "origami", "surfing", "baking"],
        "birthday_month" => &["January", "March", "May", "July", "August", "October", "November", "December"],
        "favorite_team" => {
            &["Benfica", "the Lakers", "Arsenal", "the Yankees", "Boca Juniors", "Ajax", "Celtic", "Napoli"]
        }
        _ => &["unknown"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub field: String,
    pub cue: String,
    pub value: String,
    pub text: String,
}

impl Fact {
    pub fn fields(&self) -> BTreeMap<String, String> {
        BTreeMap::from([("subject".into(), self.subject.clone()), (self.field.clone(), self.value.clone())])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerCase {
    pub prefix: String,
    /// Whether completing the prefix needs a stored fact.
    pub needs_memory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingCase {
    pub text: String,
    /// Expected extraction; `None` when the message must be refused.
    pub gold: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCase {
    pub query: String,
    /// Index into the fact pool.
    pub fact: usize,
    /// Typed prefix for the grounded-generation check.
    pub prefix: String,
    /// Entity a grounded completion must contain.
    pub entity: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub trigger: usize,
    pub trigger_negative: usize,
    pub normal: usize,
    pub refusal: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self { trigger: 343, trigger_negative: 100, normal: 169, refusal: 122 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub facts: Vec<Fact>,
    pub trigger: Vec<TriggerCase>,
    pub normal: Vec<ProcessingCase>,
    pub refusal: Vec<ProcessingCase>,
    pub retrieval: Vec<RetrievalCase>,
}

impl Dataset {
    pub fn case_count(&self) -> usize {
        self.trigger.len() + self.normal.len() + self.refusal.len() + self.retrieval.len()
    }
}

fn fact_pool(rng: &mut ChaCha8Rng) -> Vec<Fact> {
    let mut facts = Vec::with_capacity(NAMES.len() * STANDARD_ATTRIBUTES.len());
    for name in NAMES {
        for (field, cue) in STANDARD_ATTRIBUTES {
            let value = values(field).choose(rng).expect("nonempty").to_string();
            let fields =
                BTreeMap::from([("subject".to_string(), name.to_string()), (field.to_string(), value.clone())]);
            facts.push(Fact {
                subject: name.into(),
                field: field.into(),
                cue: cue.into(),
                text: declarative_text(&fields).expect("has an attribute"),
                value,
            });
        }
    }
    facts
}

const TRIGGER_TEMPLATES: &[&str] = &[
    "{name}'s {cue} is",
    "did you know {name}'s {cue} is",
    "I think {name}'s {cue} is",
    "for the party, {name}'s {cue} is",
    "remember that {name}'s {cue} is",
    "so {name}'s {cue} is",
];

const NEUTRAL_LINES: &[&str] = &[
    "see you at the station later",
    "are you free this weekend",
    "let me know when you get home",
    "what time does the movie start",
    "thanks so much for dinner",
    "i am running a bit late",
    "can you pick up some milk",
    "good night sleep well",
    "how was the meeting today",
    "that sounds like a great plan",
];

const NORMAL_TEMPLATES: &[(&str, bool)] = &[
    ("my {cue} is {value}", true),
    ("btw my {cue} is {value}!", true),
    ("{name}'s {cue} is {value}, just so you know", false),
    ("fun fact: {name}'s {cue} is {value}.", false),
    ("oh I forgot to say my {cue} is {value} now", true),
    ("{value} is my {cue} actually", true),
    ("honestly my {cue} is probably {value}", true),
];

const NOISE: &[&str] = &[
    "haha ok",
    "lol",
    "brb",
    "ok cool",
    "k",
    "sure thing",
    "hmm",
    "my bad",
    "on my way",
    "can't talk now",
    "lmao what",
    "asdfgh",
    "???",
    "the weather is nice today",
    "my phone is about to die",
    "what is your favorite color?",
    "is your hometown nice?",
    "my favorite food is changing every single week",
    "ugh my hobby is whatever lol",
    "who even has a pet name like that",
    "the meeting is at noon",
    "see you soon",
];

const FILLERS: &[&str] = &["", " :)", "!", " haha", "...", " lol"];

const QUERY_TEMPLATES: &[&str] = &[
    "what is {name}'s {cue}",
    "{name} {cue}",
    "do you remember {name}'s {cue}?",
    "{cue} of {name}",
    "tell me {name}'s {cue}",
];

fn fill(template: &str, name: &str, cue: &str, value: &str) -> String {
    template.replace("{name}", name).replace("{cue}", cue).replace("{value}", value)
}

pub fn gen_dataset(seed: u64, counts: DatasetCounts) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let facts = fact_pool(&mut rng);

    let mut trigger = Vec::with_capacity(counts.trigger + counts.trigger_negative);
    for _ in 0..counts.trigger {
        let f = facts.choose(&mut rng).expect("nonempty");
        let t = TRIGGER_TEMPLATES.choose(&mut rng).expect("nonempty");
        trigger.push(TriggerCase { prefix: fill(t, &f.subject, &f.cue, ""), needs_memory: true });
    }
    for _ in 0..counts.trigger_negative {
        let line = NEUTRAL_LINES.choose(&mut rng).expect("nonempty");
        let cut = rng.random_range(3..=line.len());
        trigger.push(TriggerCase { prefix: line[..cut].to_string(), needs_memory: false });
    }

    let normal = (0..counts.normal)
        .map(|_| {
            let (field, cue) = *STANDARD_ATTRIBUTES.choose(&mut rng).expect("nonempty");
            let value = *values(field).choose(&mut rng).expect("nonempty");
            let name = *NAMES.choose(&mut rng).expect("nonempty");
            let (t, first_person) = *NORMAL_TEMPLATES.choose(&mut rng).expect("nonempty");
            let subject = if first_person { "me" } else { name };
            ProcessingCase {
                text: fill(t, name, cue, value),
                gold: Some(BTreeMap::from([("subject".into(), subject.into()), (field.into(), value.into())])),
            }
        })
        .collect();

    let refusal = (0..counts.refusal)
        .map(|_| {
            let noise = NOISE.choose(&mut rng).expect("nonempty");
            let filler = FILLERS.choose(&mut rng).expect("nonempty");
            ProcessingCase { text: format!("{noise}{filler}"), gold: None }
        })
        .collect();

    let retrieval = facts
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let t = QUERY_TEMPLATES.choose(&mut rng).expect("nonempty");
            RetrievalCase {
                query: fill(t, &f.subject, &f.cue, ""),
                fact: i,
                prefix: fill(TRIGGER_TEMPLATES[0], &f.subject, &f.cue, ""),
                entity: f.value.clone(),
            }
        })
        .collect();

    Dataset { seed, facts, trigger, normal, refusal, retrieval }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    facts: usize,
    trigger: usize,
    processing_normal: usize,
    processing_refusal: usize,
    retrieval: usize,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?)?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(out)
}

/// Writes one JSONL file per stage plus `manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("facts.jsonl"), &ds.facts)?;
    write_jsonl(&dir.join("trigger.jsonl"), &ds.trigger)?;
    write_jsonl(&dir.join("processing_normal.jsonl"), &ds.normal)?;
    write_jsonl(&dir.join("processing_refusal.jsonl"), &ds.refusal)?;
    write_jsonl(&dir.join("retrieval.jsonl"), &ds.retrieval)?;
    let manifest = Manifest {
        seed: ds.seed,
        facts: ds.facts.len(),
        trigger: ds.trigger.len(),
        processing_normal: ds.normal.len(),
        processing_refusal: ds.refusal.len(),
        retrieval: ds.retrieval.len(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let ds = Dataset {
        seed: manifest.seed,
        facts: read_jsonl(&dir.join("facts.jsonl"))?,
        trigger: read_jsonl(&dir.join("trigger.jsonl"))?,
        normal: read_jsonl(&dir.join("processing_normal.jsonl"))?,
        refusal: read_jsonl(&dir.join("processing_refusal.jsonl"))?,
        retrieval: read_jsonl(&dir.join("retrieval.jsonl"))?,
    };
    anyhow::ensure!(ds.retrieval.iter().all(|c| c.fact < ds.facts.len()), "retrieval case refers to a missing fact");
    Ok(ds)
}

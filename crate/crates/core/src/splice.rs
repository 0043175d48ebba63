//! KV-Splice: inject memory tokens `M` between a stable prefix `P` and a
//! suffix `S` of an already-computed base sequence.
//!
//! With `b = P‖S` resident in `seq0` and `f = P‖M‖S` wanted, the splice
//! copies `seq0` into the working sequence `s_w`, drops the `d` base tokens
//! that differ, shifts the retained suffix by `Δ = n − d` (re-rotating its
//! keys), decodes the `n` new tokens into `s_t` on top of the shared prefix,
//! overlays them into `s_w`, and recomputes the last token for fresh logits.
//! When the result is not position-consecutive or yields no candidates,
//! `f` is prefilled from scratch instead.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvStore, SeqId};
use crate::memory::blob::{inject_l1_blob, L1Blob};
use crate::model::sampling::{sample_candidates, Candidate, SamplingParams};
use crate::model::{CounterSnapshot, LanguageModel, Logits, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceConfig {
    /// Candidates to sample.
    pub k: usize,
    pub sampling: SamplingParams,
    /// Tail tokens recomputed after the overlay; 1 recomputes only the last.
    pub recompute_window: usize,
}

impl Default for SpliceConfig {
    fn default() -> Self {
        Self { k: 4, sampling: SamplingParams::default(), recompute_window: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplicePlan {
    pub b: Vec<Token>,
    pub f: Vec<Token>,
    pub lp: usize,
    pub ls: usize,
    pub p_ins: usize,
    /// Deleted span length in `b`.
    pub d: usize,
    /// Inserted span length from `f`.
    pub n: usize,
    pub delta: i64,
    pub s_w: SeqId,
    pub s_t: SeqId,
}

/// One line of the optional trace log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpliceTrace {
    pub lp: usize,
    pub ls: usize,
    pub d: usize,
    pub n: usize,
    pub delta: i64,
    pub fallback: bool,
    /// Token positions computed by the model, sampling excluded.
    pub forward_tokens: u64,
    pub forward_calls: u64,
}

#[derive(Debug, Clone)]
pub struct SpliceOutput {
    pub candidates: Vec<Candidate>,
    /// Last-position logits the candidates were sampled from.
    pub logits: Logits,
    pub trace: SpliceTrace,
}

/// Longest common prefix and suffix, clamped so they never overlap in the
/// shorter string; the prefix keeps its full length on ties.
pub fn common_prefix_suffix(b: &[Token], f: &[Token]) -> (usize, usize) {
    let lp = b.iter().zip(f).take_while(|(x, y)| x == y).count();
    let raw_ls = b.iter().rev().zip(f.iter().rev()).take_while(|(x, y)| x == y).count();
    let ls = raw_ls.min(b.len().min(f.len()) - lp);
    (lp, ls)
}

pub fn plan(kv: &KvStore, b: Vec<Token>, f: Vec<Token>) -> SplicePlan {
    let (lp, ls) = common_prefix_suffix(&b, &f);
    plan_with(kv, b, f, lp, ls)
}

/// Plan with the prefix/suffix split fixed by the caller, used when the
/// inserted span must be exactly a known block.
pub fn plan_segments(kv: &KvStore, p: &[Token], m: &[Token], s: &[Token]) -> SplicePlan {
    let b: Vec<Token> = p.iter().chain(s).copied().collect();
    let f: Vec<Token> = p.iter().chain(m).chain(s).copied().collect();
    plan_with(kv, b, f, p.len(), s.len())
}

fn plan_with(kv: &KvStore, b: Vec<Token>, f: Vec<Token>, lp: usize, ls: usize) -> SplicePlan {
    let d = b.len() - lp - ls;
    let n = f.len() - lp - ls;
    SplicePlan { lp, ls, p_ins: lp, d, n, delta: n as i64 - d as i64, s_w: kv.working_seq(), s_t: kv.temp_seq(), b, f }
}

/// Builds `s_w` for `plan.f` out of `seq0` and returns its last-position
/// logits. With `blob` set and matching the inserted span, the span's KV is
/// injected instead of decoded. `s_t` is cleared on return; `s_w` is left
/// populated for [`finish_splice`].
pub fn splice_working(
    model: &dyn LanguageModel,
    kv: &mut KvStore,
    seq0: SeqId,
    plan: &SplicePlan,
    recompute_window: usize,
    blob: Option<&L1Blob>,
) -> Result<Logits> {
    let SplicePlan { p_ins, d, n, delta, s_w, s_t, .. } = *plan;
    let f = &plan.f;
    if f.is_empty() {
        return Err(Error::Validation("splice target is empty".into()));
    }
    kv.seq_clear(s_w)?;
    kv.seq_clear(s_t)?;
    kv.seq_cp(seq0, s_w, ..)?;
    kv.seq_rm(s_w, p_ins..p_ins + d)?;
    kv.seq_add(s_w, p_ins + d.., delta)?;
    kv.seq_cp(seq0, s_t, ..)?;
    kv.seq_rm(s_t, p_ins..)?;
    let inserted = &f[p_ins..p_ins + n];
    match blob {
        Some(blob) if n > 0 && blob.tokens == inserted => inject_l1_blob(blob, kv, s_t, p_ins)?,
        _ => {
            for (j, &x) in inserted.iter().enumerate() {
                model.decode_one(kv, x, p_ins + j, s_t, false)?;
            }
        }
    }
    kv.seq_cp_overlay(s_t, s_w, p_ins..p_ins + n)?;
    kv.seq_clear(s_t)?;

    let p_last = f.len() - 1;
    let window = recompute_window.clamp(1, f.len());
    let first = p_last + 1 - window;
    kv.seq_rm(s_w, first..=p_last)?;
    let mut logits = None;
    for (p, &token) in f.iter().enumerate().skip(first) {
        logits = model.decode_one(kv, token, p, s_w, p == p_last)?;
    }
    Ok(logits.expect("last position requests logits"))
}

/// Result of [`finish_splice`].
#[derive(Debug, Clone)]
pub struct Finished {
    pub candidates: Vec<Candidate>,
    pub logits: Logits,
    pub fallback: bool,
    /// Forward work of the fallback prefill, if one ran.
    pub fallback_work: CounterSnapshot,
}

/// Samples from `s_w`, falls back to a full prefill when the working
/// sequence is not consecutive or yields nothing, and clears both scratch
/// sequences.
pub fn finish_splice(
    model: &dyn LanguageModel,
    kv: &mut KvStore,
    plan: &SplicePlan,
    logits: Logits,
    config: &SpliceConfig,
) -> Result<Finished> {
    let result = (|| {
        if kv.pos_consecutive(plan.s_w) {
            let sampled = sample_candidates(model, kv, plan.s_w, &logits, config.k, &config.sampling)?;
            if !sampled.is_empty() {
                return Ok(Finished {
                    candidates: sampled,
                    logits,
                    fallback: false,
                    fallback_work: CounterSnapshot::default(),
                });
            }
        }
        fallback_baseline(model, kv, &plan.f, config)
    })();
    kv.seq_clear(plan.s_w)?;
    kv.seq_clear(plan.s_t)?;
    result
}

/// Full prefill of `f` into the (cleared) working sequence, then sampling.
/// The working sequence is left populated.
pub fn fallback_baseline(
    model: &dyn LanguageModel,
    kv: &mut KvStore,
    f: &[Token],
    config: &SpliceConfig,
) -> Result<Finished> {
    let s_w = kv.working_seq();
    kv.seq_clear(s_w)?;
    kv.seq_clear(kv.temp_seq())?;
    let before = model.counters().snapshot();
    let logits = model.prefill(kv, f, s_w, 0)?;
    let fallback_work = model.counters().snapshot().since(before);
    let candidates = sample_candidates(model, kv, s_w, &logits, config.k, &config.sampling)?;
    Ok(Finished { candidates, logits, fallback: true, fallback_work })
}

/// Runs the full splice of `m` between `p` and `s`, with `seq0` holding
/// `p‖s`. Errors inside the splice route to the fallback; only fallback
/// failures (such as capacity) surface.
pub fn kv_splice(
    model: &dyn LanguageModel,
    kv: &mut KvStore,
    seq0: SeqId,
    segments: (&[Token], &[Token], &[Token]),
    config: &SpliceConfig,
    blob: Option<&L1Blob>,
) -> Result<SpliceOutput> {
    let (p, m, s) = segments;
    let blob = blob.filter(|b| !m.is_empty() && b.tokens == m);
    let plan = match blob {
        Some(_) => plan_segments(kv, p, m, s),
        None => plan(kv, p.iter().chain(s).copied().collect(), p.iter().chain(m).chain(s).copied().collect()),
    };
    let before = model.counters().snapshot();
    let working = splice_working(model, kv, seq0, &plan, config.recompute_window, blob);
    let working_work = model.counters().snapshot().since(before);
    let finished = match working {
        Ok(logits) => finish_splice(model, kv, &plan, logits, config)?,
        Err(e) => {
            tracing::debug!(error = %e, "splice failed, using full prefill");
            let r = fallback_baseline(model, kv, &plan.f, config);
            kv.seq_clear(plan.s_w)?;
            kv.seq_clear(plan.s_t)?;
            r?
        }
    };
    Ok(SpliceOutput {
        candidates: finished.candidates,
        logits: finished.logits,
        trace: SpliceTrace {
            lp: plan.lp,
            ls: plan.ls,
            d: plan.d,
            n: plan.n,
            delta: plan.delta,
            fallback: finished.fallback,
            forward_tokens: working_work.tokens + finished.fallback_work.tokens,
            forward_calls: working_work.calls + finished.fallback_work.calls,
        },
    })
}

pub fn write_trace(out: &mut impl Write, trace: &SpliceTrace) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(trace)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::compile_l1_blob;
    use crate::model::tokenizer::encode;
    use crate::model::{build_reference_model, ModelConfig, ModelHandle};

    fn setup() -> (ModelHandle, KvStore, SeqId) {
        let model = build_reference_model(ModelConfig::tiny(3)).unwrap();
        let mut kv = KvStore::for_model(model.config()).unwrap();
        let seq0 = kv.alloc_seq().unwrap();
        (model, kv, seq0)
    }

    fn cold(model: &ModelHandle, f: &[Token]) -> Logits {
        let mut kv = KvStore::for_model(model.config()).unwrap();
        model.prefill(&mut kv, f, SeqId(0), 0).unwrap()
    }

    #[test]
    fn prefix_suffix_clamps_overlap() {
        let t = |s: &str| encode(s);
        assert_eq!(common_prefix_suffix(&t("abc"), &t("abc")), (3, 0));
        assert_eq!(common_prefix_suffix(&t("ab"), &t("aab")), (1, 1));
        assert_eq!(common_prefix_suffix(&t("xyz"), &t("xMyz")), (1, 2));
        assert_eq!(common_prefix_suffix(&t(""), &t("q")), (0, 0));
        assert_eq!(common_prefix_suffix(&t("pq"), &t("")), (0, 0));
    }

    #[test]
    fn empty_suffix_matches_cold_prefill() {
        let (model, mut kv, seq0) = setup();
        let p = encode("the prefix text");
        let m = encode(" memory");
        model.prefill(&mut kv, &p, seq0, 0).unwrap();
        let out = kv_splice(&*model, &mut kv, seq0, (&p, &m, &[]), &SpliceConfig::default(), None).unwrap();
        assert!(!out.trace.fallback);
        let f: Vec<Token> = p.iter().chain(&m).copied().collect();
        assert!(out.logits.max_abs_diff(&cold(&model, &f)) <= 1e-5);
        assert_eq!(out.trace.forward_tokens, m.len() as u64 + 1);
        assert_eq!(kv.seq_tokens(seq0), p);
        assert_eq!(kv.seq_len(kv.working_seq()), 0);
        assert_eq!(kv.seq_len(kv.temp_seq()), 0);
    }

    #[test]
    fn working_sequence_spells_target() {
        let (model, mut kv, seq0) = setup();
        let p = encode("[STYLE:plain]\n");
        let m = encode("<MEM a=\"b\">x</MEM>\n");
        let s = encode("U: hello there");
        let b: Vec<Token> = p.iter().chain(&s).copied().collect();
        model.prefill(&mut kv, &b, seq0, 0).unwrap();
        let f: Vec<Token> = p.iter().chain(&m).chain(&s).copied().collect();
        let plan = plan(&kv, b.clone(), f.clone());
        assert_eq!(plan.delta, m.len() as i64);
        splice_working(&*model, &mut kv, seq0, &plan, 1, None).unwrap();
        assert_eq!(kv.seq_tokens(plan.s_w), f);
        assert!(kv.pos_consecutive(plan.s_w));
        assert_eq!(kv.seq_tokens(seq0), b);
        let done = finish_splice(&*model, &mut kv, &plan, cold(&model, &f), &SpliceConfig::default()).unwrap();
        assert!(!done.fallback);
    }

    #[test]
    fn corrupted_working_sequence_falls_back_to_cold() {
        let (model, mut kv, seq0) = setup();
        let p = encode("abc ");
        let s = encode("defg");
        let b: Vec<Token> = p.iter().chain(&s).copied().collect();
        model.prefill(&mut kv, &b, seq0, 0).unwrap();
        let f: Vec<Token> = p.iter().chain(&encode("MM")).chain(&s).copied().collect();
        let plan = plan(&kv, b, f.clone());
        let logits = splice_working(&*model, &mut kv, seq0, &plan, 1, None).unwrap();
        kv.seq_rm(plan.s_w, 2..3).unwrap();
        let done = finish_splice(&*model, &mut kv, &plan, logits, &SpliceConfig::default()).unwrap();
        assert!(done.fallback);
        assert_eq!(done.fallback_work.tokens, f.len() as u64);
        assert!(done.logits.values == cold(&model, &f).values);
    }

    #[test]
    fn wider_recompute_window_costs_more() {
        let (model, mut kv, seq0) = setup();
        let p = encode("pre ");
        let s = encode("suffix");
        let b: Vec<Token> = p.iter().chain(&s).copied().collect();
        model.prefill(&mut kv, &b, seq0, 0).unwrap();
        let m = encode("mm");
        let cfg = SpliceConfig { recompute_window: 3, ..SpliceConfig::default() };
        let out = kv_splice(&*model, &mut kv, seq0, (&p, &m, &s), &cfg, None).unwrap();
        assert_eq!(out.trace.forward_tokens, m.len() as u64 + 3);
        assert_eq!((out.trace.d, out.trace.n), (0, 2));
    }

    #[test]
    fn blob_replaces_decode_of_inserted_span() {
        let (model, mut kv, seq0) = setup();
        let p = encode("ctx\n");
        let m = encode("<MEM k=\"v\">fact</MEM>\n");
        let s = encode("U: q");
        let b: Vec<Token> = p.iter().chain(&s).copied().collect();
        model.prefill(&mut kv, &b, seq0, 0).unwrap();
        let blob = compile_l1_blob(&*model, 7, &m, None).unwrap();
        let out = kv_splice(&*model, &mut kv, seq0, (&p, &m, &s), &SpliceConfig::default(), Some(&blob)).unwrap();
        assert!(!out.trace.fallback);
        assert_eq!((out.trace.lp, out.trace.ls, out.trace.d), (p.len(), s.len(), 0));
        assert_eq!(out.trace.forward_tokens, 1);
    }

    #[test]
    fn trace_is_one_json_line() {
        let t =
            SpliceTrace { lp: 1, ls: 2, d: 0, n: 3, delta: 3, fallback: false, forward_tokens: 4, forward_calls: 4 };
        let mut buf = Vec::new();
        write_trace(&mut buf, &t).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line.lines().count(), 1);
        let back: SpliceTrace = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, t);
    }
}

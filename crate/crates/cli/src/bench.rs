//! Inference profile across context lengths on the reference backend.
//!
//! Timings are best-of-N wall clock. The memory column is allocated KV bytes
//! (`cells x layers x 2 x d_model x 4`), not process RSS.

use std::fmt;
use std::io::Write;
use std::time::{Duration, Instant};

use ghostline_core::kv::{KvStore, SeqId};
use ghostline_core::model::{build_reference_model, ModelConfig, ModelHandle, Token};
use ghostline_core::radix::RadixCache;
use ghostline_core::splice::{kv_splice, SpliceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LENGTHS: [usize; 5] = [64, 128, 256, 384, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    /// Decode repetitions are cheap (no re-prefill), so they get their own count.
    pub decode_repetitions: usize,
    pub decode_tokens: usize,
    /// Inserted span of the splice measurement.
    pub memory_tokens: usize,
    /// Typed suffix after the inserted span.
    pub suffix_tokens: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::bench(7),
            lengths: DEFAULT_LENGTHS.to_vec(),
            repetitions: 3,
            decode_repetitions: 15,
            decode_tokens: 64,
            memory_tokens: 24,
            suffix_tokens: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub prefill_tok_s: f64,
    pub decode_tok_s: f64,
    pub cold_ttfc_ms: f64,
    pub warm_ttfc_ms: f64,
    /// Forward calls on an identical resubmission.
    pub warm_forward_calls: u64,
    pub warm_forward_tokens: u64,
    pub splice_forward_tokens: u64,
    pub baseline_forward_tokens: u64,
    pub splice_forward_calls: u64,
    pub baseline_forward_calls: u64,
    pub kv_bytes: usize,
}

impl BenchRow {
    pub fn splice_token_ratio(&self) -> f64 {
        self.splice_forward_tokens as f64 / self.baseline_forward_tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// `(max - min) / mean` of decode throughput across lengths.
    pub fn decode_spread(&self) -> f64 {
        let v: Vec<f64> = self.rows.iter().map(|r| r.decode_tok_s).collect();
        if v.is_empty() {
            return 0.0;
        }
        let max = v.iter().copied().fold(f64::MIN, f64::max);
        let min = v.iter().copied().fold(f64::MAX, f64::min);
        (max - min) / (v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One JSON object per row, for plotting.
    pub fn write_plot_data(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.rows {
            writeln!(out, "{}", serde_json::to_string(r).expect("plain struct"))?;
        }
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>12} {:>11} {:>10} {:>10} {:>10} {:>12} {:>10}",
            "len", "prefill t/s", "decode t/s", "cold ms", "warm ms", "warm calls", "splice ratio", "KV KiB"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6} {:>12.1} {:>11.1} {:>10.2} {:>10.3} {:>10} {:>12.3} {:>10.1}",
                r.length,
                r.prefill_tok_s,
                r.decode_tok_s,
                r.cold_ttfc_ms,
                r.warm_ttfc_ms,
                r.warm_forward_calls,
                r.splice_token_ratio(),
                r.kv_bytes as f64 / 1024.0
            )?;
        }
        write!(f, "decode throughput spread: {:.1}%", 100.0 * self.decode_spread())
    }
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> anyhow::Result<(Duration, T)>) -> anyhow::Result<(Duration, T)> {
    let mut best = f()?;
    for _ in 1..reps {
        let next = f()?;
        if next.0 < best.0 {
            best = next;
        }
    }
    Ok(best)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn context(rng: &mut ChaCha8Rng, len: usize) -> Vec<Token> {
    (0..len).map(|_| Token(rng.random_range(32..127))).collect()
}

/// Decode throughput (tokens/s) per context, best of `reps`. Each context is
/// prefilled once; every repetition decodes `n` greedy tokens and truncates
/// them again. Repetitions are interleaved across contexts so that drift in
/// machine speed lands on every length alike.
pub fn decode_profile(model: &ModelHandle, contexts: &[Vec<Token>], n: usize, reps: usize) -> anyhow::Result<Vec<f64>> {
    let mut states = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let mut kv = KvStore::for_model(model.config())?;
        let logits = model.prefill(&mut kv, ctx, SeqId(0), 0)?;
        states.push((kv, logits));
    }
    let mut best = vec![Duration::MAX; contexts.len()];
    for _ in 0..reps.max(1) {
        for ((kv, first), (ctx, best)) in states.iter_mut().zip(contexts.iter().zip(&mut best)) {
            let mut logits = first.clone();
            let t = Instant::now();
            for i in 0..n {
                let next = logits.argmax();
                logits = model.decode_one(kv, next, ctx.len() + i, SeqId(0), true)?.expect("requested");
            }
            *best = (*best).min(t.elapsed());
            kv.seq_rm(SeqId(0), ctx.len()..)?;
        }
    }
    Ok(best.into_iter().map(|d| n as f64 / d.as_secs_f64()).collect())
}

fn measure(model: &ModelHandle, config: &BenchConfig, ctx: &[Token], decode_tok_s: f64) -> anyhow::Result<BenchRow> {
    let mc = model.config();
    let len = ctx.len();
    let reps = config.repetitions.max(1);

    let (prefill, kv_bytes) = best_of(reps, || {
        let mut kv = KvStore::for_model(mc)?;
        let t = Instant::now();
        model.prefill(&mut kv, ctx, SeqId(0), 0)?;
        Ok((t.elapsed(), kv.estimated_bytes()))
    })?;

    let mut warm_calls = 0;
    let mut warm_tokens = 0;
    let (cold, warm) = best_of(reps, || {
        let mut kv = KvStore::for_model(mc)?;
        let mut radix = RadixCache::new(None);
        let t = Instant::now();
        let (logits, _) = radix.resume_prefill(&**model, &mut kv, ctx, SeqId(0))?;
        logits.argmax();
        let cold = t.elapsed();
        let before = model.counters().snapshot();
        let t = Instant::now();
        let (logits, _) = radix.resume_prefill(&**model, &mut kv, ctx, SeqId(1))?;
        logits.argmax();
        let warm = t.elapsed();
        let spent = model.counters().snapshot().since(before);
        warm_calls = spent.calls;
        warm_tokens = spent.tokens;
        Ok((cold, warm))
    })?;

    let p_len = len - config.memory_tokens - config.suffix_tokens;
    let (p, rest) = ctx.split_at(p_len);
    let (m, s) = rest.split_at(config.memory_tokens);
    let b: Vec<Token> = p.iter().chain(s).copied().collect();
    let mut kv = KvStore::for_model(mc)?;
    model.prefill(&mut kv, &b, SeqId(0), 0)?;
    let mut splice_config = SpliceConfig { k: 1, ..SpliceConfig::default() };
    splice_config.sampling.max_tokens = 1;
    let spliced = kv_splice(&**model, &mut kv, SeqId(0), (p, m, s), &splice_config, None)?;
    anyhow::ensure!(!spliced.trace.fallback, "splice fell back at length {len}");
    let before = model.counters().snapshot();
    let mut kv = KvStore::for_model(mc)?;
    model.prefill(&mut kv, ctx, SeqId(0), 0)?;
    let baseline = model.counters().snapshot().since(before);

    Ok(BenchRow {
        length: len,
        prefill_tok_s: len as f64 / prefill.as_secs_f64(),
        decode_tok_s,
        cold_ttfc_ms: ms(cold),
        warm_ttfc_ms: ms(warm),
        warm_forward_calls: warm_calls,
        warm_forward_tokens: warm_tokens,
        splice_forward_tokens: spliced.trace.forward_tokens,
        baseline_forward_tokens: baseline.tokens,
        splice_forward_calls: spliced.trace.forward_calls,
        baseline_forward_calls: baseline.calls,
        kv_bytes,
    })
}

pub fn run_bench(config: &BenchConfig) -> anyhow::Result<BenchReport> {
    let model = build_reference_model(config.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mc = model.config();
    let mut contexts = Vec::with_capacity(config.lengths.len());
    for &len in &config.lengths {
        anyhow::ensure!(len + config.decode_tokens <= mc.max_positions, "length {len} exceeds the model's positions");
        anyhow::ensure!(
            len > config.memory_tokens + config.suffix_tokens,
            "length {len} too short for the splice shape"
        );
        contexts.push(context(&mut rng, len));
    }
    let decode = decode_profile(&model, &contexts, config.decode_tokens, config.decode_repetitions)?;
    let rows = contexts
        .iter()
        .zip(decode)
        .map(|(ctx, decode)| measure(&model, config, ctx, decode))
        .collect::<anyhow::Result<_>>()?;
    Ok(BenchReport { config: config.clone(), rows })
}

//! Seeded pre-norm RoPE transformer used to verify KV mechanics exactly.
//!
//! Per layer: `h = rms(x)`, `q,k,v = h·Wq, h·Wk, h·Wv` with RoPE on q and k,
//! causal softmax attention, `x += attn·Wo`, then `x += silu(rms(x)·W_up)·W_down`.
//! Logits are `rms(x)·W_head`. Norms carry no learned gain.

use crate::error::{Error, Result};
use crate::kv::{KvStore, SeqId};

use super::rope::RopeTable;
use super::weights::{uniform_tensor, GLOBAL_LAYER};
use super::{check_token, ForwardCounters, LanguageModel, Logits, ModelConfig, Token};

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug)]
pub struct ReferenceModel {
    config: ModelConfig,
    rope: RopeTable,
    pub(crate) embed: Vec<f32>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) head: Vec<f32>,
    counters: ForwardCounters,
}

impl ReferenceModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, ff, vocab, seed) = (config.d_model, config.mlp_hidden(), config.vocab_size, config.weight_seed);
        let layers = (0..config.n_layers as u64)
            .map(|l| LayerWeights {
                wq: uniform_tensor(seed, l, "wq", d * d),
                wk: uniform_tensor(seed, l, "wk", d * d),
                wv: uniform_tensor(seed, l, "wv", d * d),
                wo: uniform_tensor(seed, l, "wo", d * d),
                w_up: uniform_tensor(seed, l, "w_up", d * ff),
                w_down: uniform_tensor(seed, l, "w_down", ff * d),
            })
            .collect();
        Ok(Self {
            rope: RopeTable::from_config(&config),
            embed: uniform_tensor(seed, GLOBAL_LAYER, "embed", vocab * d),
            head: uniform_tensor(seed, GLOBAL_LAYER, "head", d * vocab),
            layers,
            config,
            counters: ForwardCounters::default(),
        })
    }

    /// Named tensors in a fixed order, for fixture dumps.
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![("embed".into(), &self.embed)];
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), &w.wq));
            out.push((format!("layer{l}.wk"), &w.wk));
            out.push((format!("layer{l}.wv"), &w.wv));
            out.push((format!("layer{l}.wo"), &w.wo));
            out.push((format!("layer{l}.w_up"), &w.w_up));
            out.push((format!("layer{l}.w_down"), &w.w_down));
        }
        out.push(("head".into(), &self.head));
        out
    }

    /// Pre-RoPE key of `token` in layer 0, which depends on the token alone.
    pub fn raw_first_layer_key(&self, token: Token) -> Vec<f32> {
        let d = self.config.d_model;
        let row = &self.embed[token.0 as usize * d..(token.0 as usize + 1) * d];
        matmul(&rms_norm_rows(row, d), 1, &self.layers[0].wk, d, d)
    }

    fn forward(
        &self,
        kv: &mut KvStore,
        tokens: &[Token],
        seq: SeqId,
        start: usize,
        want_logits: bool,
    ) -> Result<Option<Logits>> {
        let cfg = &self.config;
        let (d, hd, n_heads, ff) = (cfg.d_model, cfg.head_dim, cfg.n_heads, cfg.mlp_hidden());
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Validation("cannot run a forward pass over zero tokens".into()));
        }
        if kv.n_layers() != cfg.n_layers {
            return Err(Error::Config("KV store layout does not match the model".into()));
        }
        for &t in tokens {
            check_token(cfg, t)?;
        }
        kv.check_slot(seq, start)?;
        let last = start + t_len - 1;
        if last >= cfg.max_positions {
            return Err(Error::Range(format!("position {last} exceeds max_positions")));
        }
        if let Some(pos) = (start + 1..=last).find(|&p| kv.cell_at(seq, p).is_some()) {
            return Err(Error::Overlap { seq, pos });
        }
        if kv.capacity() - kv.live_cells() < t_len {
            return Err(Error::Capacity { capacity: kv.capacity() });
        }
        let cells: Vec<_> =
            tokens.iter().enumerate().map(|(i, &t)| kv.alloc_cell(seq, start + i, t)).collect::<Result<_>>()?;

        let mut x = Vec::with_capacity(t_len * d);
        for &t in tokens {
            x.extend_from_slice(&self.embed[t.0 as usize * d..(t.0 as usize + 1) * d]);
        }
        let scale = 1.0 / (hd as f32).sqrt();
        for (layer, w) in self.layers.iter().enumerate() {
            let h = rms_norm_rows(&x, d);
            let mut q = matmul(&h, t_len, &w.wq, d, d);
            let mut k = matmul(&h, t_len, &w.wk, d, d);
            let v = matmul(&h, t_len, &w.wv, d, d);
            for i in 0..t_len {
                let pos = (start + i) as i64;
                self.rope.rotate_in_place(&mut q[i * d..(i + 1) * d], pos);
                self.rope.rotate_in_place(&mut k[i * d..(i + 1) * d], pos);
                kv.write_kv(cells[i], layer, &k[i * d..(i + 1) * d], &v[i * d..(i + 1) * d]);
            }
            let context = kv.context(seq, last);
            let mut attn = vec![0.0f32; t_len * d];
            let mut scores = vec![0.0f32; n_heads * context.len()];
            let mut maxes = vec![0.0f32; n_heads];
            let mut totals = vec![0.0f32; n_heads];
            for (i, (qi, out)) in q.chunks_exact(d).zip(attn.chunks_exact_mut(d)).enumerate() {
                // New positions are the tail of `context`; token i sees all but
                // the t_len - 1 - i tokens after it. Scores are cell-major, one
                // row of per-head scores per visible cell, so every cell's K
                // and V are read once for all heads.
                let visible = &context[..context.len() - (t_len - 1 - i)];
                let scores = &mut scores[..visible.len() * n_heads];
                maxes.fill(f32::NEG_INFINITY);
                for (row, &c) in scores.chunks_exact_mut(n_heads).zip(visible) {
                    let heads = qi.chunks_exact(hd).zip(kv.key(c, layer).chunks_exact(hd));
                    for ((s, m), (qh, kh)) in row.iter_mut().zip(&mut maxes).zip(heads) {
                        *s = dot(qh, kh) * scale;
                        *m = m.max(*s);
                    }
                }
                for row in scores.chunks_exact_mut(n_heads) {
                    row.iter_mut().zip(&maxes).for_each(|(s, m)| *s -= m);
                }
                exp_nonpositive(scores);
                totals.fill(0.0);
                for row in scores.chunks_exact(n_heads) {
                    totals.iter_mut().zip(row).for_each(|(t, s)| *t += s);
                }
                for (row, &c) in scores.chunks_exact(n_heads).zip(visible) {
                    let heads = out.chunks_exact_mut(hd).zip(kv.value(c, layer).chunks_exact(hd));
                    for ((&s, &total), (oh, vh)) in row.iter().zip(&totals).zip(heads) {
                        let p = s / total;
                        oh.iter_mut().zip(vh).for_each(|(o, &v)| *o += p * v);
                    }
                }
            }
            let o = matmul(&attn, t_len, &w.wo, d, d);
            add_in_place(&mut x, &o);
            let h2 = rms_norm_rows(&x, d);
            let mut up = matmul(&h2, t_len, &w.w_up, d, ff);
            for u in up.iter_mut() {
                *u = *u / (1.0 + (-*u).exp());
            }
            let down = matmul(&up, t_len, &w.w_down, ff, d);
            add_in_place(&mut x, &down);
        }
        self.counters.record(t_len, want_logits);
        if !want_logits {
            return Ok(None);
        }
        let tail = rms_norm_rows(&x[(t_len - 1) * d..], d);
        let values = matmul(&tail, 1, &self.head, d, cfg.vocab_size);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(last));
        }
        Ok(Some(Logits { values, position: last, sequence: seq }))
    }
}

impl LanguageModel for ReferenceModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn name(&self) -> &'static str {
        "reference"
    }

    fn decode_one(
        &self,
        kv: &mut KvStore,
        token: Token,
        pos: usize,
        seq: SeqId,
        want_logits: bool,
    ) -> Result<Option<Logits>> {
        self.forward(kv, &[token], seq, pos, want_logits)
    }

    fn prefill(&self, kv: &mut KvStore, tokens: &[Token], seq: SeqId, start_pos: usize) -> Result<Logits> {
        Ok(self.forward(kv, tokens, seq, start_pos, true)?.expect("logits requested"))
    }

    fn counters(&self) -> &ForwardCounters {
        &self.counters
    }
}

fn rms_norm_rows(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / width as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

/// `x (rows x in) · w (in x out)`, `w` row-major.
fn matmul(x: &[f32], rows: usize, w: &[f32], in_dim: usize, out_dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let or = &mut out[r * out_dim..(r + 1) * out_dim];
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &w[i * out_dim..(i + 1) * out_dim];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    }
    out
}

/// In-place `exp` for inputs `<= 0` (softmax after max subtraction).
/// Cephes-style range reduction and polynomial, branch-free so the loop
/// vectorizes; within 2 ulp of the correctly rounded result, exactly 1 at 0.
fn exp_nonpositive(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    for x in xs.iter_mut() {
        let v = x.max(-87.0);
        // Truncation of a non-positive value rounds toward zero, so this is
        // round-to-nearest of v * log2(e).
        let n = (v * LOG2E - 0.5) as i32;
        let nf = n as f32;
        let r = v - nf * LN2_HI - nf * LN2_LO;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 0.5;
        let e = p * r * r + r + 1.0;
        let scale = f32::from_bits(((n + 127) as u32) << 23);
        *x = if *x < -87.0 { 0.0 } else { e * scale };
    }
}

/// Eight independent accumulators so the reduction vectorizes; the
/// summation order is fixed, so results stay deterministic.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

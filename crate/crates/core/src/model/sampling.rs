use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kv::{KvStore, SeqId};

use super::tokenizer::{self, NEWLINE};
use super::{LanguageModel, Logits, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// 0 selects greedy decoding.
    pub temperature: f32,
    /// Candidate `i` draws from a stream seeded with `seed + i`.
    pub seed: u64,
    pub max_tokens: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.8, seed: 0, max_tokens: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub tokens: Vec<Token>,
}

pub fn is_stop(token: Token) -> bool {
    token == NEWLINE || tokenizer::is_control(token)
}

pub fn sample_token(logits: &[f32], temperature: f32, rng: &mut impl Rng) -> Token {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return Token(best as u32);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits.iter().map(|&v| f64::from((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw < 0.0 {
            return Token(i as u32);
        }
    }
    Token((weights.len() - 1) as u32)
}

/// Samples up to `k` distinct short continuations of `seq`, whose last-position
/// logits are `logits`. Each candidate decodes into the store's sampling
/// scratch sequence, which is empty again on return.
pub fn sample_candidates(
    model: &dyn LanguageModel,
    kv: &mut KvStore,
    seq: SeqId,
    logits: &Logits,
    k: usize,
    params: &SamplingParams,
) -> Result<Vec<Candidate>> {
    let scratch = kv.sampling_seq();
    let start = kv.next_pos(seq);
    let mut out: Vec<Candidate> = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(i as u64));
        kv.seq_clear(scratch)?;
        kv.seq_cp(seq, scratch, ..)?;
        let mut tokens = Vec::new();
        let mut current = logits.values.clone();
        let result = (|| -> Result<()> {
            while tokens.len() < params.max_tokens {
                let t = sample_token(&current, params.temperature, &mut rng);
                if is_stop(t) {
                    break;
                }
                tokens.push(t);
                if tokens.len() == params.max_tokens {
                    break;
                }
                let pos = start + tokens.len() - 1;
                current = model.decode_one(kv, t, pos, scratch, true)?.expect("logits requested").values;
            }
            Ok(())
        })();
        kv.seq_clear(scratch)?;
        result?;
        if tokens.is_empty() {
            continue;
        }
        let text = tokenizer::decode(&tokens);
        if out.iter().all(|c| c.text != text) {
            out.push(Candidate { text, tokens });
        }
    }
    Ok(out)
}

/// Greedy continuation used for control-token probing.
pub fn greedy_continue(
    model: &dyn LanguageModel,
    kv: &mut KvStore,
    seq: SeqId,
    logits: &Logits,
    max_tokens: usize,
    mut keep_going: impl FnMut(&[Token]) -> bool,
) -> Result<Vec<Token>> {
    let scratch = kv.sampling_seq();
    kv.seq_clear(scratch)?;
    kv.seq_cp(seq, scratch, ..)?;
    let start = kv.next_pos(seq);
    let mut tokens = Vec::new();
    let mut current = logits.values.clone();
    let result = (|| -> Result<()> {
        while tokens.len() < max_tokens {
            let t = Logits { values: std::mem::take(&mut current), position: 0, sequence: seq }.argmax();
            tokens.push(t);
            if t == NEWLINE || !keep_going(&tokens) || tokens.len() == max_tokens {
                break;
            }
            current =
                model.decode_one(kv, t, start + tokens.len() - 1, scratch, true)?.expect("logits requested").values;
        }
        Ok(())
    })();
    kv.seq_clear(scratch)?;
    result.map(|()| tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tokenizer::encode, ModelConfig, ReferenceModel};

    fn setup() -> (ReferenceModel, KvStore, Logits) {
        let m = ReferenceModel::new(ModelConfig::tiny(3)).unwrap();
        let mut kv = KvStore::new(m.config(), 1024, 8).unwrap();
        let logits = m.prefill(&mut kv, &encode("hello"), SeqId(0), 0).unwrap();
        (m, kv, logits)
    }

    #[test]
    fn greedy_single_candidate_follows_argmax() {
        let (m, mut kv, logits) = setup();
        let params = SamplingParams { temperature: 0.0, ..Default::default() };
        let c = sample_candidates(&m, &mut kv, SeqId(0), &logits, 1, &params).unwrap();
        let greedy = greedy_continue(&m, &mut kv, SeqId(0), &logits, 16, |t| !is_stop(*t.last().unwrap())).unwrap();
        let expected: Vec<Token> = greedy.into_iter().take_while(|&t| !is_stop(t)).collect();
        if expected.is_empty() {
            assert!(c.is_empty());
        } else {
            assert_eq!(c[0].tokens, expected);
        }
    }

    #[test]
    fn candidates_bounded_distinct_and_reproducible() {
        let (m, mut kv, logits) = setup();
        let params = SamplingParams { temperature: 1.0, seed: 11, max_tokens: 16 };
        let a = sample_candidates(&m, &mut kv, SeqId(0), &logits, 4, &params).unwrap();
        let b = sample_candidates(&m, &mut kv, SeqId(0), &logits, 4, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 4 && !a.is_empty());
        assert!(a.iter().all(|c| c.tokens.len() <= 16));
        for (i, c) in a.iter().enumerate() {
            assert!(a[i + 1..].iter().all(|o| o.text != c.text));
        }
        assert_eq!(kv.seq_len(kv.sampling_seq()), 0);
        assert_eq!(kv.seq_len(SeqId(0)), 5);
    }
}

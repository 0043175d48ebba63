//! Language-model backends.
//!
//! Both backends speak the same token-level interface over a [`KvStore`]:
//! [`ReferenceModel`] is a small seeded RoPE transformer whose KV states are
//! real, and [`TemplateModel`] is a rule/n-gram model whose cells carry
//! tokens only. Everything above this layer (prefix reuse, splicing,
//! sampling) is backend-agnostic.

pub mod config;
pub mod fixture;
pub mod reference;
pub mod rope;
pub mod sampling;
pub mod template;
pub mod tokenizer;
pub mod weights;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kv::{KvStore, SeqId};

pub use config::ModelConfig;
pub use reference::ReferenceModel;
pub use template::{TemplateModel, TemplateRules, STANDARD_ATTRIBUTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f32>,
    pub position: usize,
    pub sequence: SeqId,
}

impl Logits {
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        Token(best as u32)
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f32 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

/// Instrumentation shared by every forward path.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    tokens: AtomicU64,
    calls: AtomicU64,
    logits: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    /// Token positions whose KV was computed.
    pub tokens: u64,
    /// `decode_one` + `prefill` invocations.
    pub calls: u64,
    /// Logit vectors produced.
    pub logits: u64,
}

impl CounterSnapshot {
    pub fn since(self, earlier: CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            tokens: self.tokens - earlier.tokens,
            calls: self.calls - earlier.calls,
            logits: self.logits - earlier.logits,
        }
    }
}

impl ForwardCounters {
    pub(crate) fn record(&self, tokens: usize, logits: bool) {
        self.tokens.fetch_add(tokens as u64, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
        if logits {
            self.logits.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            tokens: self.tokens.load(Ordering::Relaxed),
            calls: self.calls.load(Ordering::Relaxed),
            logits: self.logits.load(Ordering::Relaxed),
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    fn name(&self) -> &'static str;

    /// Computes the token's KV at `(seq, pos)` with causal attention over the
    /// cells of `seq` at positions `<= pos`.
    fn decode_one(
        &self,
        kv: &mut KvStore,
        token: Token,
        pos: usize,
        seq: SeqId,
        want_logits: bool,
    ) -> Result<Option<Logits>>;

    /// Batched equivalent of consecutive `decode_one` calls starting at
    /// `start_pos`; returns last-position logits.
    fn prefill(&self, kv: &mut KvStore, tokens: &[Token], seq: SeqId, start_pos: usize) -> Result<Logits>;

    fn counters(&self) -> &ForwardCounters;

    /// Whether the model can emit `<MEM_RETRIEVAL>` as a single id.
    fn has_control_tokens(&self) -> bool {
        self.config().vocab_size >= tokenizer::VOCAB_WITH_CONTROLS
    }
}

pub type ModelHandle = Arc<dyn LanguageModel>;

pub fn build_reference_model(config: ModelConfig) -> Result<ModelHandle> {
    Ok(Arc::new(ReferenceModel::new(config)?))
}

pub fn build_template_model(corpus: &[&str], rules: TemplateRules) -> Result<Arc<TemplateModel>> {
    Ok(Arc::new(TemplateModel::new(corpus, rules)?))
}

pub(crate) fn check_token(config: &ModelConfig, token: Token) -> Result<()> {
    if (token.0 as usize) < config.vocab_size {
        Ok(())
    } else {
        Err(crate::Error::TokenOutOfRange { token: token.0, vocab: config.vocab_size })
    }
}

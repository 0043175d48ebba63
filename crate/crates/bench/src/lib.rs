//! Shared fixtures for the criterion benches.

use ghostline_core::kv::{KvStore, SeqId};
use ghostline_core::model::{build_reference_model, Logits, ModelConfig, ModelHandle, Token};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Printable byte tokens, reproducible per `(seed, len)`.
pub fn tokens(seed: u64, len: usize) -> Vec<Token> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
    (0..len).map(|_| Token(rng.random_range(32..127))).collect()
}

pub fn bench_model() -> ModelHandle {
    build_reference_model(ModelConfig::bench(7)).expect("valid shape")
}

pub fn tiny_model() -> ModelHandle {
    build_reference_model(ModelConfig::tiny(7)).expect("valid shape")
}

/// A fresh store with `ctx` prefilled into sequence 0.
pub fn prefilled(model: &ModelHandle, ctx: &[Token]) -> (KvStore, Logits) {
    let mut kv = KvStore::for_model(model.config()).expect("layout matches");
    let logits = model.prefill(&mut kv, ctx, SeqId(0), 0).expect("fits");
    (kv, logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        assert_eq!(tokens(1, 32), tokens(1, 32));
        assert_ne!(tokens(1, 32), tokens(2, 32));
        let model = tiny_model();
        let (kv, logits) = prefilled(&model, &tokens(3, 16));
        assert_eq!(kv.seq_len(SeqId(0)), 16);
        assert_eq!(logits.position, 15);
    }
}

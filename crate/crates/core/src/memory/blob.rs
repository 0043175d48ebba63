use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvStore, SeqId};
use crate::model::{LanguageModel, Token};

/// Precomputed KV for a token span. Keys are rotated for positions starting
/// at `reference_position`; injection re-rotates them to the target offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Blob {
    pub id: u64,
    pub tokens: Vec<Token>,
    pub n_layers: usize,
    /// Cell-major, then layer.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub reference_position: usize,
    pub style_tag: Option<String>,
}

impl L1Blob {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Prefills `tokens` into a throwaway store at position 0 and keeps the KV.
pub fn compile_l1_blob(
    model: &dyn LanguageModel,
    id: u64,
    tokens: &[Token],
    style_tag: Option<String>,
) -> Result<L1Blob> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot compile an empty blob".into()));
    }
    let mut kv = KvStore::new(model.config(), tokens.len(), 4)?;
    model.prefill(&mut kv, tokens, SeqId(0), 0)?;
    let (tokens, keys, values) = kv.export(SeqId(0));
    Ok(L1Blob { id, tokens, n_layers: model.config().n_layers, keys, values, reference_position: 0, style_tag })
}

pub fn inject_l1_blob(blob: &L1Blob, kv: &mut KvStore, seq: SeqId, target_pos: usize) -> Result<()> {
    if blob.n_layers != kv.n_layers() {
        return Err(Error::Config(format!("blob has {} layers, store has {}", blob.n_layers, kv.n_layers())));
    }
    let delta = target_pos as i64 - blob.reference_position as i64;
    kv.inject(seq, target_pos, &blob.tokens, &blob.keys, &blob.values, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::encode;
    use crate::model::{ModelConfig, ReferenceModel};

    #[test]
    fn inject_at_reference_is_bit_identical() {
        let m = ReferenceModel::new(ModelConfig::tiny(4)).unwrap();
        let blob = compile_l1_blob(&m, 0, &encode("teal"), None).unwrap();
        let mut kv = KvStore::new(m.config(), 64, 4).unwrap();
        inject_l1_blob(&blob, &mut kv, SeqId(0), 0).unwrap();
        let (tokens, keys, values) = kv.export(SeqId(0));
        assert_eq!(tokens, blob.tokens);
        assert_eq!(keys, blob.keys);
        assert_eq!(values, blob.values);
    }

    #[test]
    fn overlap_rejected() {
        let m = ReferenceModel::new(ModelConfig::tiny(4)).unwrap();
        let blob = compile_l1_blob(&m, 0, &encode("ab"), None).unwrap();
        let mut kv = KvStore::new(m.config(), 64, 4).unwrap();
        m.prefill(&mut kv, &encode("xyz"), SeqId(0), 0).unwrap();
        assert!(matches!(inject_l1_blob(&blob, &mut kv, SeqId(0), 2), Err(Error::Overlap { .. })));
        assert!(compile_l1_blob(&m, 1, &[], None).is_err());
    }
}

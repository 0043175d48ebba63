use crate::model::weights::fnv1a64;

pub trait Embedder: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Signed feature hashing of lowercase character trigrams and whole words.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn add(&self, out: &mut [f32], feature: &[u8]) {
        let h = fnv1a64(feature);
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        out[(h % self.dim as u64) as usize] += sign;
    }
}

impl Embedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let lower = text.to_lowercase();
        let mut out = vec![0.0f32; self.dim];
        let words: Vec<String> = lower
            .split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .map(|w| w.trim_end_matches("'s").to_string())
            .collect();
        for w in &words {
            let padded: Vec<char> = format!(" {w} ").chars().collect();
            for tri in padded.windows(3) {
                let s: String = tri.iter().collect();
                self.add(&mut out, s.as_bytes());
            }
            let mut tagged = b"w:".to_vec();
            tagged.extend_from_slice(w.as_bytes());
            self.add(&mut out, &tagged);
        }
        let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm == 0.0 {
            out[0] = 1.0;
        } else {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unit_norm_and_deterministic() {
        let e = TrigramEmbedder::default();
        for text in ["", "Alice's favorite color is teal.", "数据 测试"] {
            let v = e.embed(text);
            assert_eq!(v.len(), 64);
            assert!((cos(&v, &v) - 1.0).abs() < 1e-6);
            assert_eq!(v, e.embed(text));
        }
    }

    #[test]
    fn overlap_scores_higher() {
        let e = TrigramEmbedder::default();
        let fact = e.embed("Alice's favorite color is teal.");
        let near = e.embed("what is alice's favorite color");
        let far = e.embed("Marco works at a bakery");
        assert!(cos(&fact, &near) > cos(&fact, &far));
    }
}

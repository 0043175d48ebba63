//! Rotary position embedding over interleaved pairs `(x[2i], x[2i+1])`
//! with frequency `theta_i = base^(-2i/head_dim)`.
//!
//! Rotating a key that was embedded at position `p` by `delta` gives the key
//! embedded at `p + delta`, which is what lets cached keys move.
//! Angles and products are evaluated in f64 and rounded once.

use super::ModelConfig;

#[derive(Debug, Clone)]
pub struct RopeTable {
    inv_freq: Vec<f64>,
    head_dim: usize,
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f64) -> Self {
        let inv_freq = (0..head_dim / 2).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
        Self { inv_freq, head_dim }
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        Self::new(config.head_dim, config.rope_base)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates every head in `v` (a whole number of heads) by `delta` positions.
    pub fn rotate_in_place(&self, v: &mut [f32], delta: i64) {
        if delta == 0 {
            return;
        }
        debug_assert_eq!(v.len() % self.head_dim, 0);
        let trig: Vec<(f64, f64)> = self.inv_freq.iter().map(|&f| (delta as f64 * f).sin_cos()).collect();
        for head in v.chunks_exact_mut(self.head_dim) {
            for (pair, &(sin, cos)) in head.chunks_exact_mut(2).zip(&trig) {
                let (x, y) = (f64::from(pair[0]), f64::from(pair[1]));
                pair[0] = (x * cos - y * sin) as f32;
                pair[1] = (x * sin + y * cos) as f32;
            }
        }
    }
}

/// Embeds a raw (position-free) vector at absolute position `pos`.
pub fn apply_rope(raw: &[f32], pos: usize, config: &ModelConfig) -> Vec<f32> {
    rope_rotate(raw, pos as i64, config)
}

/// Phase-shifts an already embedded vector by `delta` positions.
pub fn rope_rotate(k: &[f32], delta: i64, config: &ModelConfig) -> Vec<f32> {
    let mut out = k.to_vec();
    RopeTable::from_config(config).rotate_in_place(&mut out, delta);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(0)
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn zero_shift_is_exact_identity() {
        let v: Vec<f32> = (0..16).map(|i| i as f32 * 0.37 - 2.0).collect();
        assert_eq!(rope_rotate(&v, 0, &cfg()), v);
    }

    #[test]
    fn first_pair_rotates_by_delta_radians() {
        // theta_0 = 1, so the first pair turns by exactly `delta` radians.
        let mut v = vec![0.0f32; 16];
        v[0] = 1.0;
        let r = rope_rotate(&v, 1, &cfg());
        assert!((r[0] - 1f32.cos()).abs() < 1e-7);
        assert!((r[1] - 1f32.sin()).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn inverse_and_composition(
            v in proptest::collection::vec(-1.0f32..1.0, 16),
            a in -1000i64..1000,
            b in -1000i64..1000,
        ) {
            let c = cfg();
            let back = rope_rotate(&rope_rotate(&v, a, &c), -a, &c);
            prop_assert!(max_abs_diff(&back, &v) < 1e-6);
            let two = rope_rotate(&rope_rotate(&v, a, &c), b, &c);
            let one = rope_rotate(&v, a + b, &c);
            prop_assert!(max_abs_diff(&two, &one) < 1e-6);
        }
    }
}

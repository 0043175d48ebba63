//! Text dump of seeded reference weights for cross-implementation checks.
//!
//! ```text
//! ghostline-weights 1
//! config {"n_layers":2,...}
//! tensor embed 16384
//! 3d1a0f22 bd7e11c0 ...        (f32 bit patterns, 8 per line)
//! tensor layer0.wq 4096
//! ...
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a reader can compare exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{LanguageModel, ModelConfig, ReferenceModel};

const MAGIC: &str = "ghostline-weights 1";
const PER_LINE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFixture {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<f32>)>,
}

pub fn write_fixture(model: &ReferenceModel) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "config {}", serde_json::to_string(model.config())?).unwrap();
    for (name, values) in model.tensors() {
        writeln!(out, "tensor {name} {}", values.len()).unwrap();
        for chunk in values.chunks(PER_LINE) {
            let words: Vec<String> = chunk.iter().map(|v| format!("{:08x}", v.to_bits())).collect();
            writeln!(out, "{}", words.join(" ")).unwrap();
        }
    }
    Ok(out)
}

pub fn read_fixture(text: &str) -> Result<WeightFixture> {
    let bad = |msg: String| Error::Validation(format!("weight fixture: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing header".into()));
    }
    let config_line =
        lines.next().and_then(|l| l.strip_prefix("config ")).ok_or_else(|| bad("missing config".into()))?;
    let config: ModelConfig = serde_json::from_str(config_line)?;
    let mut tensors: Vec<(String, Vec<f32>)> = Vec::new();
    let mut expected = 0usize;
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor ") {
            if let Some((name, values)) = tensors.last() {
                if values.len() != expected {
                    return Err(bad(format!("tensor {name} truncated")));
                }
            }
            let (name, len) = rest.rsplit_once(' ').ok_or_else(|| bad(format!("bad tensor line {line:?}")))?;
            expected = len.parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
            tensors.push((name.to_string(), Vec::with_capacity(expected)));
            continue;
        }
        let (_, values) = tensors.last_mut().ok_or_else(|| bad("values before first tensor".into()))?;
        for word in line.split_whitespace() {
            let bits = u32::from_str_radix(word, 16).map_err(|_| bad(format!("bad word {word:?}")))?;
            values.push(f32::from_bits(bits));
        }
    }
    if let Some((name, values)) = tensors.last() {
        if values.len() != expected {
            return Err(bad(format!("tensor {name} truncated")));
        }
    }
    Ok(WeightFixture { config, tensors })
}

/// Rebuilds the model from the fixture's config and compares every weight
/// bit-for-bit.
pub fn verify_fixture(text: &str) -> Result<()> {
    let fixture = read_fixture(text)?;
    let model = ReferenceModel::new(fixture.config.clone())?;
    let tensors = model.tensors();
    if tensors.len() != fixture.tensors.len() {
        return Err(Error::Validation(format!(
            "weight fixture has {} tensors, model has {}",
            fixture.tensors.len(),
            tensors.len()
        )));
    }
    for ((name, want), (got_name, got)) in fixture.tensors.iter().zip(tensors) {
        if *name != got_name {
            return Err(Error::Validation(format!("tensor order differs: {name} vs {got_name}")));
        }
        if let Some(i) = want.iter().zip(got).position(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Validation(format!("tensor {name} differs at index {i}")));
        }
        if want.len() != got.len() {
            return Err(Error::Validation(format!("tensor {name} has the wrong length")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, head_dim: 4, vocab_size: 256, ..ModelConfig::tiny(42) }
    }

    #[test]
    fn round_trip_and_verify() {
        let model = ReferenceModel::new(small()).unwrap();
        let text = write_fixture(&model).unwrap();
        let fixture = read_fixture(&text).unwrap();
        assert_eq!(fixture.config, small());
        assert_eq!(fixture.tensors.len(), 8);
        assert_eq!(fixture.tensors[0].1.as_slice(), model.tensors()[0].1);
        verify_fixture(&text).unwrap();
    }

    #[test]
    fn tampered_fixture_fails() {
        let model = ReferenceModel::new(small()).unwrap();
        let text = write_fixture(&model).unwrap();
        let line = text.lines().nth(3).unwrap();
        let flipped =
            if line.starts_with('0') { line.replacen('0', "1", 1) } else { line.replacen(&line[..1], "0", 1) };
        let tampered = text.replacen(line, &flipped, 1);
        assert!(matches!(verify_fixture(&tampered), Err(Error::Validation(_))));
        assert!(read_fixture("nope").is_err());
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(read_fixture(&truncated).is_err());
    }

    #[test]
    fn first_words_are_stable() {
        // Guards the weight stream: a change here breaks every fixture file.
        let model = ReferenceModel::new(ModelConfig::tiny(42)).unwrap();
        let first = model.tensors()[0].1[0];
        let again = ReferenceModel::new(ModelConfig::tiny(42)).unwrap().tensors()[0].1[0];
        assert_eq!(first.to_bits(), again.to_bits());
        assert!((-0.08..0.08).contains(&first));
    }
}

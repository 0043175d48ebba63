//! Hierarchical navigable small world graph over unit vectors.
//!
//! Similarity is the dot product (cosine for unit-norm inputs). Node levels
//! are drawn from a ChaCha8 stream keyed by `(seed, insertion index)`, so an
//! identical build order yields an identical graph.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INDEX_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Max neighbors per node on upper layers.
    pub m: usize,
    /// Max neighbors per node on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub level_multiplier: f64,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, m0: 32, ef_construction: 128, ef_search: 64, level_multiplier: 1.0 / (16f64).ln(), seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    sim: f32,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    /// Higher similarity first; lower node index breaks ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.node.cmp(&self.node))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnswIndex {
    version: u32,
    params: HnswParams,
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<Vec<f32>>,
    /// `links[node][layer]` lists neighbor node indices.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Result<Self> {
        if dim == 0 || params.m < 2 || params.m0 < params.m || params.ef_construction == 0 {
            return Err(Error::Config(format!("invalid HNSW parameters {params:?} for dim {dim}")));
        }
        Ok(Self {
            version: INDEX_FILE_VERSION,
            params,
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
        })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level_of(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    fn top_level(&self) -> usize {
        self.entry.map_or(0, |e| self.level_of(e as usize))
    }

    fn sample_level(&self, index: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(index as u64);
        let u: f64 = 1.0 - rng.random::<f64>();
        (-u.ln() * self.params.level_multiplier).floor() as usize
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m0
        } else {
            self.params.m
        }
    }

    fn sim_to(&self, query: &[f32], node: u32) -> Scored {
        Scored { sim: dot(query, &self.vectors[node as usize]), node }
    }

    /// Best-first beam search on one layer. Returns up to `ef` nodes, best first.
    fn search_layer(&self, query: &[f32], entries: &[u32], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited: HashSet<u32> = entries.iter().copied().collect();
        let mut frontier: BinaryHeap<Scored> = entries.iter().map(|&e| self.sim_to(query, e)).collect();
        let mut best: BinaryHeap<Reverse<Scored>> = frontier.iter().map(|&s| Reverse(s)).collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(current) = frontier.pop() {
            let worst = best.peek().expect("non-empty").0;
            if current.sim < worst.sim && best.len() >= ef {
                break;
            }
            for &nb in &self.links[current.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = self.sim_to(query, nb);
                if best.len() < ef || s > best.peek().expect("non-empty").0 {
                    frontier.push(s);
                    best.push(Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbor already kept; top up with the closest rejects.
    fn select_neighbors(&self, candidates: &[Scored], max: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(max);
        let mut rejected = Vec::new();
        for &c in candidates {
            if kept.len() >= max {
                break;
            }
            let cv = &self.vectors[c.node as usize];
            if kept.iter().all(|k| dot(cv, &self.vectors[k.node as usize]) < c.sim) {
                kept.push(c);
            } else {
                rejected.push(c);
            }
        }
        for r in rejected {
            if kept.len() >= max {
                break;
            }
            kept.push(r);
        }
        kept.into_iter().map(|s| s.node).collect()
    }

    pub fn insert(&mut self, id: u64, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Validation(format!("vector has dim {}, index has {}", vector.len(), self.dim)));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let node = self.ids.len() as u32;
        let level = self.sample_level(node as usize);
        self.ids.push(id);
        self.vectors.push(vector);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return Ok(());
        };
        let query = self.vectors[node as usize].clone();
        let top = self.top_level();
        let mut entries = vec![entry];
        for layer in (level + 1..=top).rev() {
            entries = vec![self.search_layer(&query, &entries, 1, layer)[0].node];
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&query, &entries, self.params.ef_construction, layer);
            let max = self.max_degree(layer);
            let chosen = self.select_neighbors(&found, self.params.m.min(max));
            for &nb in &chosen {
                self.connect(nb, node, layer);
            }
            self.links[node as usize][layer] = chosen;
            entries = found.iter().map(|s| s.node).collect();
        }
        if level > top {
            self.entry = Some(node);
        }
        debug_assert!(self.check_invariants().is_ok(), "{:?}", self.check_invariants());
        Ok(())
    }

    /// Adds `node` to `base`'s list, pruning back to the layer's degree cap.
    fn connect(&mut self, base: u32, node: u32, layer: usize) {
        let max = self.max_degree(layer);
        self.links[base as usize][layer].push(node);
        if self.links[base as usize][layer].len() <= max {
            return;
        }
        let bv = self.vectors[base as usize].clone();
        let mut scored: Vec<Scored> = self.links[base as usize][layer].iter().map(|&n| self.sim_to(&bv, n)).collect();
        scored.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&scored, max);
        // Never strand the newcomer: it may have no other inbound link yet.
        let kept = if kept.contains(&node) {
            kept
        } else {
            let mut k = kept;
            k.pop();
            k.push(node);
            k
        };
        self.links[base as usize][layer] = kept;
    }

    /// Top-`k` ids by similarity; `ef` is raised to at least `k`.
    pub fn search(&self, query: &[f32], k: usize, ef: usize) -> Vec<(u64, f32)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        if k == 0 || query.len() != self.dim {
            return Vec::new();
        }
        let mut entries = vec![entry];
        for layer in (1..=self.top_level()).rev() {
            entries = vec![self.search_layer(query, &entries, 1, layer)[0].node];
        }
        self.search_layer(query, &entries, ef.max(k), 0)
            .into_iter()
            .take(k)
            .map(|s| (self.ids[s.node as usize], s.sim))
            .collect()
    }

    pub fn search_default(&self, query: &[f32], k: usize) -> Vec<(u64, f32)> {
        self.search(query, k, self.params.ef_search)
    }

    /// Degree caps, layer nesting, link validity and reachability from the
    /// entry point on every layer.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let Some(entry) = self.entry else {
            return if self.ids.is_empty() { Ok(()) } else { Err("non-empty index without entry".into()) };
        };
        let top = self.top_level();
        for (node, layers) in self.links.iter().enumerate() {
            if layers.len() - 1 > top {
                return Err(format!("node {node} is above the entry level"));
            }
            for (layer, nbs) in layers.iter().enumerate() {
                if nbs.len() > self.max_degree(layer) {
                    return Err(format!("node {node} has degree {} on layer {layer}", nbs.len()));
                }
                for &nb in nbs {
                    if nb as usize == node || self.links.get(nb as usize).is_none_or(|l| l.len() <= layer) {
                        return Err(format!("node {node} links to {nb}, absent from layer {layer}"));
                    }
                }
            }
        }
        for layer in 0..=top {
            let mut seen = HashSet::from([entry]);
            let mut stack = vec![entry];
            while let Some(n) = stack.pop() {
                for &nb in &self.links[n as usize][layer] {
                    if seen.insert(nb) {
                        stack.push(nb);
                    }
                }
            }
            let present = self.links.iter().filter(|l| l.len() > layer).count();
            if seen.len() != present {
                return Err(format!("layer {layer}: {} of {present} nodes reachable", seen.len()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if index.version != INDEX_FILE_VERSION {
            return Err(Error::Validation(format!("unsupported index version {}", index.version)));
        }
        Ok(index)
    }
}

/// Exact top-`k` by full scan, best first; ties go to the earlier entry.
pub fn brute_force_search(vectors: &[(u64, Vec<f32>)], query: &[f32], k: usize) -> Vec<(u64, f32)> {
    let mut scored: Vec<(usize, f32)> = vectors.iter().enumerate().map(|(i, (_, v))| (i, dot(query, v))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, s)| (vectors[i].0, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
                let norm = dot(&v, &v).sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = HnswIndex::new(8, HnswParams::default()).unwrap();
        assert!(idx.search(&[0.0; 8], 4, 64).is_empty());
    }

    #[test]
    fn self_query_finds_itself() {
        let mut idx = HnswIndex::new(16, HnswParams::default()).unwrap();
        let vs = unit_vectors(100, 16, 3);
        for (i, v) in vs.iter().enumerate() {
            idx.insert(i as u64 * 10, v.clone()).unwrap();
        }
        for (i, v) in vs.iter().enumerate() {
            assert_eq!(idx.search(v, 1, 64)[0].0, i as u64 * 10);
        }
    }

    #[test]
    fn structure_holds_after_every_insert() {
        let params = HnswParams { m: 4, m0: 8, ef_construction: 16, ..Default::default() };
        let mut idx = HnswIndex::new(8, params).unwrap();
        for (i, v) in unit_vectors(300, 8, 9).into_iter().enumerate() {
            idx.insert(i as u64, v).unwrap();
            idx.check_invariants().unwrap();
        }
        assert!(idx.top_level() >= 1);
    }

    #[test]
    fn build_is_deterministic() {
        let build = || {
            let mut idx = HnswIndex::new(8, HnswParams::default()).unwrap();
            for (i, v) in unit_vectors(120, 8, 5).into_iter().enumerate() {
                idx.insert(i as u64, v).unwrap();
            }
            idx
        };
        assert!(build() == build());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut idx = HnswIndex::new(8, HnswParams::default()).unwrap();
        assert!(matches!(idx.insert(1, vec![1.0; 4]), Err(Error::Validation(_))));
        assert!(matches!(idx.insert(1, vec![f32::NAN; 8]), Err(Error::NonFinite(0))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = HnswIndex::new(8, HnswParams::default()).unwrap();
        for (i, v) in unit_vectors(50, 8, 1).into_iter().enumerate() {
            idx.insert(i as u64, v).unwrap();
        }
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        assert!(HnswIndex::load(&path).unwrap() == idx);
    }

    #[test]
    fn brute_force_orders_by_similarity() {
        let vs = vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0]), (3, vec![0.6, 0.8])];
        let got = brute_force_search(&vs, &[0.0, 1.0], 2);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![2, 3]);
    }
}

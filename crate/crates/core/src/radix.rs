//! Compressed prefix tree mapping token prefixes to live KV sequences.
//!
//! Every leaf carries a sequence binding, so any point reached while walking
//! the tree (including the middle of an edge) lies on the spelled prefix of
//! at least one bound sequence. A match therefore reuses the full longest
//! common prefix with the stored strings, copied out of the most recently
//! used binding below the divergence point.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvStore, SeqId};
use crate::model::{LanguageModel, Logits, Token};

const ROOT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binding {
    pub seq: SeqId,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct Node {
    edge: Vec<Token>,
    children: BTreeMap<Token, usize>,
    parent: usize,
    /// Prefix length spelled through the end of this node's edge.
    depth: usize,
    binding: Option<Binding>,
    last_access: u64,
    pinned: bool,
}

impl Node {
    fn new(edge: Vec<Token>, parent: usize, depth: usize) -> Self {
        Self { edge, children: BTreeMap::new(), parent, depth, binding: None, last_access: 0, pinned: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixMatch {
    /// Bound node whose sequence supplies the reused prefix.
    pub node: Option<NodeId>,
    pub matched_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resumed {
    pub matched_len: usize,
    /// Token positions computed by the model for this call.
    pub computed: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadixStats {
    pub nodes: usize,
    pub bound: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub estimated_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct RadixCache {
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    clock: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
    /// Evict down to this many estimated bytes after each insertion.
    byte_budget: Option<usize>,
}

impl Default for RadixCache {
    fn default() -> Self {
        Self::new(None)
    }
}

impl RadixCache {
    pub fn new(byte_budget: Option<usize>) -> Self {
        Self {
            nodes: vec![Some(Node::new(Vec::new(), ROOT, 0))],
            free: Vec::new(),
            clock: 0,
            hits: 0,
            misses: 0,
            evictions: 0,
            byte_budget,
        }
    }

    fn node(&self, id: usize) -> &Node {
        self.nodes[id].as_ref().expect("dangling radix node")
    }

    fn node_mut(&mut self, id: usize) -> &mut Node {
        self.nodes[id].as_mut().expect("dangling radix node")
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(id) = self.free.pop() {
            self.nodes[id] = Some(node);
            id
        } else {
            self.nodes.push(Some(node));
            self.nodes.len() - 1
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    pub fn binding(&self, node: NodeId) -> Option<Binding> {
        self.nodes.get(node.0)?.as_ref()?.binding
    }

    pub fn bindings(&self) -> Vec<(NodeId, Binding)> {
        self.live_ids().filter_map(|id| self.node(id).binding.map(|b| (NodeId(id), b))).collect()
    }

    fn live_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_some()).map(|(i, _)| i)
    }

    /// Token string spelled from the root through `node`.
    pub fn spelled(&self, node: NodeId) -> Vec<Token> {
        let mut parts = Vec::new();
        let mut id = node.0;
        while id != ROOT {
            let n = self.node(id);
            parts.push(&n.edge[..]);
            id = n.parent;
        }
        parts.into_iter().rev().flatten().copied().collect()
    }

    /// Walks `tokens` down the tree. Returns the node whose edge holds the
    /// divergence point and the number of tokens matched.
    fn walk(&self, tokens: &[Token]) -> (usize, usize) {
        let mut id = ROOT;
        let mut matched = 0;
        loop {
            let Some(&child) = tokens.get(matched).and_then(|t| self.node(id).children.get(t)) else {
                return (id, matched);
            };
            let edge = &self.node(child).edge;
            let common = edge.iter().zip(&tokens[matched..]).take_while(|(a, b)| a == b).count();
            matched += common;
            if common < edge.len() {
                return (child, matched);
            }
            id = child;
        }
    }

    /// Most recently used bound node in the subtree rooted at `id`.
    fn freshest_bound(&self, id: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node(n);
            if node.binding.is_some()
                && best.is_none_or(|b| {
                    let bn = self.node(b);
                    (node.last_access, std::cmp::Reverse(n)) > (bn.last_access, std::cmp::Reverse(b))
                })
            {
                best = Some(n);
            }
            stack.extend(node.children.values());
        }
        best
    }

    pub fn match_longest_prefix(&self, tokens: &[Token]) -> PrefixMatch {
        let (id, matched) = self.walk(tokens);
        if matched == 0 {
            return PrefixMatch { node: None, matched_len: 0 };
        }
        PrefixMatch { node: self.freshest_bound(id).map(NodeId), matched_len: matched }
    }

    /// Binds `seq` to the node spelling `tokens`, splitting edges as needed.
    /// Returns the node and any sequence previously bound there, which the
    /// caller owns again.
    pub fn insert(&mut self, tokens: &[Token], seq: SeqId) -> Result<(NodeId, Option<SeqId>)> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot cache an empty token sequence".into()));
        }
        let (mut id, matched) = self.walk(tokens);
        if id != ROOT {
            let start = self.node(id).depth - self.node(id).edge.len();
            if matched < self.node(id).depth {
                id = self.split(id, matched - start);
            }
        }
        if matched < tokens.len() {
            let child = Node::new(tokens[matched..].to_vec(), id, tokens.len());
            let child = self.alloc(child);
            self.node_mut(id).children.insert(tokens[matched], child);
            id = child;
        }
        let now = self.tick();
        let node = self.node_mut(id);
        let displaced = node.binding.replace(Binding { seq, len: tokens.len() }).map(|b| b.seq);
        node.last_access = now;
        Ok((NodeId(id), displaced.filter(|&s| s != seq)))
    }

    /// Splits `id`'s edge after `at` tokens; returns the new upper node.
    fn split(&mut self, id: usize, at: usize) -> usize {
        let (parent, head, tail, depth) = {
            let n = self.node(id);
            (n.parent, n.edge[..at].to_vec(), n.edge[at..].to_vec(), n.depth)
        };
        let first_head = head[0];
        let first_tail = tail[0];
        let mut upper = Node::new(head, parent, depth - tail.len());
        upper.children.insert(first_tail, id);
        let upper = self.alloc(upper);
        self.node_mut(parent).children.insert(first_head, upper);
        let n = self.node_mut(id);
        n.edge = tail;
        n.parent = upper;
        upper
    }

    /// Removes a node's binding and prunes the tree so every leaf stays
    /// bound and no unbound node has a single child.
    fn unbind(&mut self, id: usize) -> Option<Binding> {
        let node = self.node_mut(id);
        let binding = node.binding.take();
        node.pinned = false;
        self.prune(id);
        binding
    }

    fn prune(&mut self, mut id: usize) {
        while id != ROOT {
            let (parent, children, bound) = {
                let n = self.node(id);
                (n.parent, n.children.len(), n.binding.is_some())
            };
            if bound {
                return;
            }
            match children {
                0 => {
                    let first = self.node(id).edge[0];
                    self.node_mut(parent).children.remove(&first);
                    self.nodes[id] = None;
                    self.free.push(id);
                    id = parent;
                }
                1 => {
                    let child = *self.node(id).children.values().next().expect("one child");
                    let edge = std::mem::take(&mut self.node_mut(id).edge);
                    let c = self.node_mut(child);
                    c.edge.splice(0..0, edge.iter().copied());
                    c.parent = parent;
                    self.node_mut(parent).children.insert(edge[0], child);
                    self.nodes[id] = None;
                    self.free.push(id);
                    return;
                }
                _ => return,
            }
        }
    }

    /// Drops whichever node is bound to `seq`, if any. The sequence itself is
    /// left to the caller.
    pub fn forget_seq(&mut self, seq: SeqId) -> bool {
        let found = self.live_ids().find(|&id| self.node(id).binding.is_some_and(|b| b.seq == seq));
        found.map(|id| self.unbind(id)).is_some()
    }

    pub fn set_pinned(&mut self, node: NodeId, pinned: bool) -> Result<()> {
        match self.nodes.get_mut(node.0).and_then(Option::as_mut) {
            Some(n) if n.binding.is_some() => {
                n.pinned = pinned;
                Ok(())
            }
            _ => Err(Error::Validation(format!("node {} is not a bound node", node.0))),
        }
    }

    /// Bytes of distinct KV cells held by bound sequences.
    pub fn estimated_bytes(&self, kv: &KvStore) -> usize {
        let mut cells = HashSet::new();
        for (_, b) in self.bindings() {
            cells.extend(kv.seq_view(b.seq).cells.into_iter().map(|(_, c)| c));
        }
        cells.len() * kv.bytes_per_cell()
    }

    fn lru_victim(&self) -> Option<usize> {
        self.live_ids()
            .filter(|&id| {
                let n = self.node(id);
                n.binding.is_some() && !n.pinned
            })
            .min_by_key(|&id| (self.node(id).last_access, id))
    }

    fn evict_one(&mut self, kv: &mut KvStore) -> Result<bool> {
        let Some(id) = self.lru_victim() else {
            return Ok(false);
        };
        if let Some(b) = self.unbind(id) {
            kv.release_seq(b.seq)?;
        }
        self.evictions += 1;
        Ok(true)
    }

    /// Frees the least-recently-used unpinned binding and its sequence.
    /// Returns false when nothing is evictable.
    pub fn evict_lru(&mut self, kv: &mut KvStore) -> Result<bool> {
        self.evict_one(kv)
    }

    /// Frees least-recently-used unpinned bindings until the estimate is
    /// within `byte_budget` or only pinned bindings remain.
    pub fn evict(&mut self, kv: &mut KvStore, byte_budget: usize) -> Result<usize> {
        let mut freed = 0;
        while self.estimated_bytes(kv) > byte_budget && self.evict_one(kv)? {
            freed += 1;
        }
        Ok(freed)
    }

    /// Fills `target` (cleared first) with the KV of `tokens`, reusing the
    /// longest cached prefix, and returns last-position logits. The result
    /// is cached under a fresh sequence when one can be obtained.
    pub fn resume_prefill(
        &mut self,
        model: &dyn LanguageModel,
        kv: &mut KvStore,
        tokens: &[Token],
        target: SeqId,
    ) -> Result<(Logits, Resumed)> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot prefill an empty context".into()));
        }
        kv.seq_clear(target)?;
        let m = self.match_longest_prefix(tokens);
        let source = m.node.map(|n| self.node(n.0).binding.expect("bound").seq);
        let reuse = match source {
            Some(_) => m.matched_len.min(tokens.len() - 1),
            None => 0,
        };
        if let (Some(src), Some(node)) = (source, m.node) {
            kv.seq_cp(src, target, 0..reuse)?;
            let now = self.tick();
            self.node_mut(node.0).last_access = now;
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        let logits = model.prefill(kv, &tokens[reuse..], target, reuse)?;
        self.cache(kv, tokens, target)?;
        Ok((logits, Resumed { matched_len: m.matched_len, computed: tokens.len() - reuse }))
    }

    /// Caches a copy of `target`, which must hold exactly `tokens`, under a
    /// fresh sequence. Skipped when no sequence can be freed.
    pub fn cache(&mut self, kv: &mut KvStore, tokens: &[Token], target: SeqId) -> Result<()> {
        let (id, matched) = self.walk(tokens);
        if matched == tokens.len() && self.node(id).depth == tokens.len() && self.node(id).binding.is_some() {
            let now = self.tick();
            self.node_mut(id).last_access = now;
            return Ok(());
        }
        let seq = loop {
            match kv.alloc_seq() {
                Ok(seq) => break seq,
                Err(Error::SequencesExhausted) => {
                    if !self.evict_one(kv)? {
                        return Ok(());
                    }
                }
                Err(e) => return Err(e),
            }
        };
        if let Err(e) = kv.seq_cp(target, seq, ..) {
            kv.release_seq(seq)?;
            return Err(e);
        }
        let (_, displaced) = self.insert(tokens, seq)?;
        if let Some(old) = displaced {
            kv.release_seq(old)?;
        }
        if let Some(budget) = self.byte_budget {
            self.evict(kv, budget)?;
        }
        Ok(())
    }

    pub fn stats(&self, kv: &KvStore) -> RadixStats {
        RadixStats {
            nodes: self.node_count(),
            bound: self.bindings().len(),
            hits: self.hits,
            misses: self.misses,
            evictions: self.evictions,
            estimated_bytes: self.estimated_bytes(kv),
        }
    }

    /// Structural invariants, checked against the store.
    pub fn check_invariants(&self, kv: &KvStore) -> std::result::Result<(), String> {
        for id in self.live_ids() {
            let n = self.node(id);
            for (first, &child) in &n.children {
                let c = self.node(child);
                if c.edge.first() != Some(first) || c.parent != id {
                    return Err(format!("node {child} is mis-linked under {id}"));
                }
                if c.depth != n.depth + c.edge.len() {
                    return Err(format!("node {child} has depth {} under depth {}", c.depth, n.depth));
                }
            }
            if id == ROOT {
                continue;
            }
            if n.edge.is_empty() {
                return Err(format!("node {id} has an empty edge"));
            }
            if n.children.is_empty() && n.binding.is_none() {
                return Err(format!("leaf {id} is unbound"));
            }
            if let Some(b) = n.binding {
                let spelled = self.spelled(NodeId(id));
                if b.len != spelled.len() {
                    return Err(format!("node {id} binding length {} != {}", b.len, spelled.len()));
                }
                let positions = kv.seq_positions(b.seq);
                if positions.len() < b.len || positions[..b.len].iter().enumerate().any(|(i, &p)| i != p) {
                    return Err(format!("sequence of node {id} is not consecutive"));
                }
                if kv.seq_tokens(b.seq)[..b.len] != spelled[..] {
                    return Err(format!("sequence of node {id} does not spell its prefix"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::encode;
    use crate::model::{ModelConfig, ReferenceModel};

    fn setup() -> (ReferenceModel, KvStore) {
        let m = ReferenceModel::new(ModelConfig::tiny(1)).unwrap();
        let kv = KvStore::new(m.config(), 4096, 12).unwrap();
        (m, kv)
    }

    #[test]
    fn empty_tree_matches_nothing() {
        let tree = RadixCache::default();
        assert_eq!(tree.match_longest_prefix(&encode("abc")).matched_len, 0);
    }

    #[test]
    fn exact_hit_and_divergence() {
        let (m, mut kv) = setup();
        let mut tree = RadixCache::default();
        let target = kv.alloc_seq().unwrap();
        tree.resume_prefill(&m, &mut kv, &encode("hello world"), target).unwrap();
        let hit = tree.match_longest_prefix(&encode("hello world"));
        assert_eq!(hit.matched_len, 11);
        assert!(hit.node.is_some());
        assert_eq!(tree.match_longest_prefix(&encode("hello there")).matched_len, 6);
        assert_eq!(tree.match_longest_prefix(&encode("abc")).matched_len, 0);
        tree.check_invariants(&kv).unwrap();
    }

    #[test]
    fn exact_resubmission_computes_one_token() {
        let (m, mut kv) = setup();
        let mut tree = RadixCache::default();
        let target = kv.alloc_seq().unwrap();
        let ctx = encode("the quick brown fox");
        let (cold, r) = tree.resume_prefill(&m, &mut kv, &ctx, target).unwrap();
        assert_eq!(r.computed, ctx.len());
        let (warm, r) = tree.resume_prefill(&m, &mut kv, &ctx, target).unwrap();
        assert_eq!(r.computed, 1);
        assert!(warm.max_abs_diff(&cold) <= 1e-5);
    }

    #[test]
    fn split_and_prune_keep_invariants() {
        let (m, mut kv) = setup();
        let mut tree = RadixCache::default();
        let target = kv.alloc_seq().unwrap();
        for s in ["abcdef", "abcxyz", "abq", "b"] {
            tree.resume_prefill(&m, &mut kv, &encode(s), target).unwrap();
            tree.check_invariants(&kv).unwrap();
        }
        assert_eq!(tree.bindings().len(), 4);
        let node = tree.match_longest_prefix(&encode("abq")).node.unwrap();
        let seq = tree.binding(node).unwrap().seq;
        assert!(tree.forget_seq(seq));
        kv.release_seq(seq).unwrap();
        tree.check_invariants(&kv).unwrap();
        assert_eq!(tree.match_longest_prefix(&encode("abq")).matched_len, 2);
        assert_eq!(tree.match_longest_prefix(&encode("abcq")).matched_len, 3);
    }

    #[test]
    fn eviction_respects_pins_and_budget() {
        let (m, mut kv) = setup();
        let mut tree = RadixCache::default();
        let target = kv.alloc_seq().unwrap();
        for s in ["first context", "second one", "third thing"] {
            tree.resume_prefill(&m, &mut kv, &encode(s), target).unwrap();
        }
        kv.seq_clear(target).unwrap();
        let pinned = tree.match_longest_prefix(&encode("first context")).node.unwrap();
        tree.set_pinned(pinned, true).unwrap();
        let freed = tree.evict(&mut kv, 0).unwrap();
        assert_eq!(freed, 2);
        assert_eq!(tree.bindings().len(), 1);
        assert_eq!(tree.binding(pinned).map(|b| b.len), Some(13));
        assert_eq!(tree.estimated_bytes(&kv), 13 * kv.bytes_per_cell());
        tree.set_pinned(pinned, false).unwrap();
        tree.evict(&mut kv, 0).unwrap();
        assert_eq!(tree.estimated_bytes(&kv), 0);
        assert_eq!(kv.live_cells(), 0);
    }

    #[test]
    fn exhausted_pool_evicts_lru() {
        let m = ReferenceModel::new(ModelConfig::tiny(1)).unwrap();
        let mut kv = KvStore::new(m.config(), 4096, 6).unwrap();
        let mut tree = RadixCache::default();
        let target = kv.alloc_seq().unwrap();
        for s in ["aa", "bb", "cc", "dd"] {
            tree.resume_prefill(&m, &mut kv, &encode(s), target).unwrap();
        }
        assert_eq!(tree.bindings().len(), 2);
        assert_eq!(tree.match_longest_prefix(&encode("aa")).matched_len, 0);
        assert_eq!(tree.match_longest_prefix(&encode("dd")).matched_len, 2);
        assert_eq!(tree.stats(&kv).evictions, 2);
    }
}

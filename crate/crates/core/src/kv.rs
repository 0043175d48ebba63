//! Multi-sequence KV cache.
//!
//! Cells hold the per-layer key/value vectors for one `(position, token)`
//! and a membership set of sequences. Sequences reference cells by position,
//! so copying a sequence only adds memberships and never duplicates K/V.
//! Keys are stored already rotated to the cell's position; shifting a cell
//! re-rotates its keys by the shift.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Bound, RangeBounds};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::rope::RopeTable;
use crate::model::{tokenizer, ModelConfig, Token};

pub const MAX_SEQUENCES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(usize);

#[derive(Debug, Clone)]
pub struct KvCell {
    pub position: usize,
    pub token: Token,
    members: u64,
}

impl KvCell {
    pub fn member_count(&self) -> u32 {
        self.members.count_ones()
    }

    pub fn is_member(&self, seq: SeqId) -> bool {
        self.members & bit(seq) != 0
    }
}

/// Sorted `(position, cell)` listing of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqView {
    pub seq: SeqId,
    pub cells: Vec<(usize, CellId)>,
}

impl SeqView {
    pub fn positions(&self) -> Vec<usize> {
        self.cells.iter().map(|&(p, _)| p).collect()
    }
}

fn bit(seq: SeqId) -> u64 {
    1u64 << seq.0
}

fn bounds(range: impl RangeBounds<usize>) -> (usize, usize) {
    let start = match range.start_bound() {
        Bound::Included(&s) => s,
        Bound::Excluded(&s) => s + 1,
        Bound::Unbounded => 0,
    };
    let end = match range.end_bound() {
        Bound::Included(&e) => e + 1,
        Bound::Excluded(&e) => e,
        Bound::Unbounded => usize::MAX,
    };
    (start, end)
}

#[derive(Debug, Clone)]
pub struct KvStore {
    n_layers: usize,
    key_width: usize,
    value_width: usize,
    max_positions: usize,
    bytes_per_cell: usize,
    rope: RopeTable,
    cells: Vec<Option<KvCell>>,
    /// Per-layer K and V slabs indexed by cell slot, so an attention scan
    /// over one layer reads contiguous memory.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    free: Vec<usize>,
    capacity: usize,
    seqs: Vec<BTreeMap<usize, usize>>,
    allocated: Vec<bool>,
}

impl KvStore {
    /// `capacity` bounds the number of live cells; `n_seq_max` sequence ids
    /// exist, the top three of which are reserved scratch sequences.
    pub fn new(config: &ModelConfig, capacity: usize, n_seq_max: usize) -> Result<Self> {
        if !(4..=MAX_SEQUENCES).contains(&n_seq_max) {
            return Err(Error::Config(format!("n_seq_max must be in 4..={MAX_SEQUENCES}, got {n_seq_max}")));
        }
        if capacity == 0 {
            return Err(Error::Config("KV capacity must be positive".into()));
        }
        Ok(Self {
            n_layers: config.n_layers,
            key_width: config.n_heads * config.head_dim,
            value_width: config.d_model,
            max_positions: config.max_positions,
            bytes_per_cell: config.kv_bytes_per_cell(),
            rope: RopeTable::from_config(config),
            cells: Vec::new(),
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            free: Vec::new(),
            capacity,
            seqs: vec![BTreeMap::new(); n_seq_max],
            allocated: vec![false; n_seq_max],
        })
    }

    /// Pool sized for a handful of full-length sequences.
    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        Self::new(config, config.max_positions * 8, 32)
    }

    pub fn n_seq_max(&self) -> usize {
        self.seqs.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn live_cells(&self) -> usize {
        self.cells.len() - self.free.len()
    }

    pub fn bytes_per_cell(&self) -> usize {
        self.bytes_per_cell
    }

    pub fn estimated_bytes(&self) -> usize {
        self.live_cells() * self.bytes_per_cell
    }

    pub fn working_seq(&self) -> SeqId {
        SeqId(self.n_seq_max() - 2)
    }

    pub fn temp_seq(&self) -> SeqId {
        SeqId(self.n_seq_max() - 1)
    }

    pub fn sampling_seq(&self) -> SeqId {
        SeqId(self.n_seq_max() - 3)
    }

    fn pool_size(&self) -> usize {
        self.n_seq_max() - 3
    }

    /// Takes a free id from the general pool (scratch ids excluded).
    pub fn alloc_seq(&mut self) -> Result<SeqId> {
        let idx = (0..self.pool_size()).find(|&i| !self.allocated[i]).ok_or(Error::SequencesExhausted)?;
        self.allocated[idx] = true;
        self.seq_clear(SeqId(idx))?;
        Ok(SeqId(idx))
    }

    pub fn release_seq(&mut self, seq: SeqId) -> Result<()> {
        self.seq_clear(seq)?;
        if seq.0 < self.pool_size() {
            self.allocated[seq.0] = false;
        }
        Ok(())
    }

    pub fn free_seq_ids(&self) -> usize {
        (0..self.pool_size()).filter(|&i| !self.allocated[i]).count()
    }

    fn check_seq(&self, seq: SeqId) -> Result<()> {
        if seq.0 < self.seqs.len() {
            Ok(())
        } else {
            Err(Error::UnknownSequence(seq))
        }
    }

    fn map(&self, seq: SeqId) -> &BTreeMap<usize, usize> {
        &self.seqs[seq.0]
    }

    fn live(&self, idx: usize) -> &KvCell {
        self.cells[idx].as_ref().expect("sequence references a freed cell")
    }

    fn live_mut(&mut self, idx: usize) -> &mut KvCell {
        self.cells[idx].as_mut().expect("sequence references a freed cell")
    }

    pub fn seq_len(&self, seq: SeqId) -> usize {
        self.seqs.get(seq.0).map_or(0, BTreeMap::len)
    }

    pub fn seq_positions(&self, seq: SeqId) -> Vec<usize> {
        self.seqs.get(seq.0).map_or_else(Vec::new, |m| m.keys().copied().collect())
    }

    pub fn seq_tokens(&self, seq: SeqId) -> Vec<Token> {
        self.seqs.get(seq.0).map_or_else(Vec::new, |m| m.values().map(|&c| self.live(c).token).collect())
    }

    pub fn seq_view(&self, seq: SeqId) -> SeqView {
        let cells = self.seqs.get(seq.0).map_or_else(Vec::new, |m| m.iter().map(|(&p, &c)| (p, CellId(c))).collect());
        SeqView { seq, cells }
    }

    pub fn max_pos(&self, seq: SeqId) -> Option<usize> {
        self.seqs.get(seq.0)?.keys().next_back().copied()
    }

    /// Position the next appended token would occupy.
    pub fn next_pos(&self, seq: SeqId) -> usize {
        self.max_pos(seq).map_or(0, |p| p + 1)
    }

    pub fn cell(&self, id: CellId) -> &KvCell {
        self.live(id.0)
    }

    pub fn cell_at(&self, seq: SeqId, pos: usize) -> Option<&KvCell> {
        self.seqs.get(seq.0)?.get(&pos).map(|&c| self.live(c))
    }

    pub fn key(&self, id: CellId, layer: usize) -> &[f32] {
        let w = self.key_width;
        &self.keys[layer][id.0 * w..(id.0 + 1) * w]
    }

    pub fn value(&self, id: CellId, layer: usize) -> &[f32] {
        let w = self.value_width;
        &self.values[layer][id.0 * w..(id.0 + 1) * w]
    }

    /// Key of `seq` at `pos` in `layer`, if present.
    pub fn key_at(&self, seq: SeqId, pos: usize, layer: usize) -> Option<&[f32]> {
        let &c = self.seqs.get(seq.0)?.get(&pos)?;
        Some(self.key(CellId(c), layer))
    }

    pub fn value_at(&self, seq: SeqId, pos: usize, layer: usize) -> Option<&[f32]> {
        let &c = self.seqs.get(seq.0)?.get(&pos)?;
        Some(self.value(CellId(c), layer))
    }

    fn alloc_raw(&mut self, cell: KvCell) -> Result<usize> {
        if let Some(idx) = self.free.pop() {
            self.cells[idx] = Some(cell);
            Ok(idx)
        } else if self.cells.len() < self.capacity {
            self.cells.push(Some(cell));
            let n = self.cells.len();
            let (kw, vw) = (self.key_width, self.value_width);
            self.keys.iter_mut().for_each(|k| k.resize(n * kw, 0.0));
            self.values.iter_mut().for_each(|v| v.resize(n * vw, 0.0));
            Ok(n - 1)
        } else {
            Err(Error::Capacity { capacity: self.capacity })
        }
    }

    /// Copies every layer's K/V of slot `from` into slot `to`.
    fn copy_payload(&mut self, from: usize, to: usize) {
        let (kw, vw) = (self.key_width, self.value_width);
        for k in &mut self.keys {
            k.copy_within(from * kw..(from + 1) * kw, to * kw);
        }
        for v in &mut self.values {
            v.copy_within(from * vw..(from + 1) * vw, to * vw);
        }
    }

    fn free_slots(&self) -> usize {
        self.capacity - self.live_cells()
    }

    fn drop_membership(&mut self, idx: usize, seq: SeqId) {
        let cell = self.live_mut(idx);
        cell.members &= !bit(seq);
        if cell.members == 0 {
            self.cells[idx] = None;
            self.free.push(idx);
        }
    }

    /// Verifies that `pos` can be decoded into `seq`: the slot is vacant and
    /// the positions of `seq` below `pos` are either absent or a gap-free run
    /// ending at `pos - 1`.
    pub(crate) fn check_slot(&self, seq: SeqId, pos: usize) -> Result<()> {
        self.check_seq(seq)?;
        if pos >= self.max_positions {
            return Err(Error::Range(format!("position {pos} exceeds max_positions {}", self.max_positions)));
        }
        let map = self.map(seq);
        if map.contains_key(&pos) {
            return Err(Error::Overlap { seq, pos });
        }
        let mut below = map.range(..pos);
        if let Some((&last, _)) = below.next_back() {
            let first = *map.keys().next().expect("non-empty");
            let count = map.range(..pos).count();
            if last + 1 != pos || pos - first != count {
                return Err(Error::NonConsecutiveContext { seq, pos });
            }
        }
        Ok(())
    }

    /// Allocates a zeroed cell at `(seq, pos)`; the caller fills K/V.
    pub(crate) fn alloc_cell(&mut self, seq: SeqId, pos: usize, token: Token) -> Result<CellId> {
        let cell = KvCell { position: pos, token, members: bit(seq) };
        let idx = self.alloc_raw(cell)?;
        let (kw, vw) = (self.key_width, self.value_width);
        self.keys.iter_mut().for_each(|k| k[idx * kw..(idx + 1) * kw].fill(0.0));
        self.values.iter_mut().for_each(|v| v[idx * vw..(idx + 1) * vw].fill(0.0));
        self.seqs[seq.0].insert(pos, idx);
        Ok(CellId(idx))
    }

    pub(crate) fn write_kv(&mut self, id: CellId, layer: usize, k: &[f32], v: &[f32]) {
        let (kw, vw) = (self.key_width, self.value_width);
        self.keys[layer][id.0 * kw..(id.0 + 1) * kw].copy_from_slice(k);
        self.values[layer][id.0 * vw..(id.0 + 1) * vw].copy_from_slice(v);
    }

    /// Cells of `seq` with position <= `max_pos`, ascending.
    pub(crate) fn context(&self, seq: SeqId, max_pos: usize) -> Vec<CellId> {
        self.map(seq).range(..=max_pos).map(|(_, &c)| CellId(c)).collect()
    }

    /// Adds `dst` as a member of every `src` cell with position in `range`.
    pub fn seq_cp(&mut self, src: SeqId, dst: SeqId, range: impl RangeBounds<usize>) -> Result<()> {
        self.check_seq(src)?;
        self.check_seq(dst)?;
        if src == dst {
            return Ok(());
        }
        let (p0, p1) = bounds(range);
        if p0 >= p1 {
            return Ok(());
        }
        let moved: Vec<(usize, usize)> = self.map(src).range(p0..p1).map(|(&p, &c)| (p, c)).collect();
        if let Some(&(pos, _)) = moved.iter().find(|(p, _)| self.map(dst).contains_key(p)) {
            return Err(Error::Overlap { seq: dst, pos });
        }
        for (pos, idx) in moved {
            self.live_mut(idx).members |= bit(dst);
            self.seqs[dst.0].insert(pos, idx);
        }
        Ok(())
    }

    /// Removes `seq`'s membership for positions in `range`, freeing orphaned cells.
    pub fn seq_rm(&mut self, seq: SeqId, range: impl RangeBounds<usize>) -> Result<()> {
        self.check_seq(seq)?;
        let (p0, p1) = bounds(range);
        if p0 >= p1 {
            return Ok(());
        }
        let removed: Vec<usize> = self.map(seq).range(p0..p1).map(|(&p, _)| p).collect();
        for pos in removed {
            let idx = self.seqs[seq.0].remove(&pos).expect("listed");
            self.drop_membership(idx, seq);
        }
        Ok(())
    }

    pub fn seq_clear(&mut self, seq: SeqId) -> Result<()> {
        self.seq_rm(seq, ..)
    }

    /// Shifts positions in `range` by `delta`, phase-rotating their keys.
    /// Cells shared with other sequences are copied first, so no other
    /// sequence observes the shift.
    pub fn seq_add(&mut self, seq: SeqId, range: impl RangeBounds<usize>, delta: i64) -> Result<()> {
        self.check_seq(seq)?;
        let (p0, p1) = bounds(range);
        if delta == 0 || p0 >= p1 {
            return Ok(());
        }
        let affected: Vec<(usize, usize)> = self.map(seq).range(p0..p1).map(|(&p, &c)| (p, c)).collect();
        if affected.is_empty() {
            return Ok(());
        }
        let mut targets = Vec::with_capacity(affected.len());
        for &(pos, _) in &affected {
            let moved = pos as i64 + delta;
            if moved < 0 || moved as usize >= self.max_positions {
                return Err(Error::Range(format!(
                    "shifting position {pos} by {delta} leaves [0, {})",
                    self.max_positions
                )));
            }
            targets.push(moved as usize);
        }
        let map = self.map(seq);
        if let Some(&pos) = targets.iter().find(|&&t| map.contains_key(&t) && !(p0..p1).contains(&t)) {
            return Err(Error::Overlap { seq, pos });
        }
        let shared = affected.iter().filter(|&&(_, c)| self.live(c).members != bit(seq)).count();
        if shared > self.free_slots() {
            return Err(Error::Capacity { capacity: self.capacity });
        }

        for &(pos, _) in &affected {
            self.seqs[seq.0].remove(&pos);
        }
        let kw = self.key_width;
        for (&(_, idx), &target) in affected.iter().zip(&targets) {
            let own = if self.live(idx).members == bit(seq) {
                idx
            } else {
                let mut copy = self.live(idx).clone();
                copy.members = bit(seq);
                self.live_mut(idx).members &= !bit(seq);
                let fresh = self.alloc_raw(copy)?;
                self.copy_payload(idx, fresh);
                fresh
            };
            self.live_mut(own).position = target;
            if kw > 0 {
                for layer_keys in &mut self.keys {
                    self.rope.rotate_in_place(&mut layer_keys[own * kw..(own + 1) * kw], delta);
                }
            }
            self.seqs[seq.0].insert(target, own);
        }
        Ok(())
    }

    /// Replaces `dst`'s positions in `range` with `src`'s cells.
    pub fn seq_cp_overlay(&mut self, src: SeqId, dst: SeqId, range: impl RangeBounds<usize> + Clone) -> Result<()> {
        self.seq_rm(dst, range.clone())?;
        self.seq_cp(src, dst, range)
    }

    /// True iff `seq` holds exactly positions `0..len`.
    pub fn pos_consecutive(&self, seq: SeqId) -> bool {
        self.seqs.get(seq.0).is_some_and(|m| m.keys().enumerate().all(|(i, &p)| i == p))
    }

    /// Inserts precomputed cells at `start..start+tokens.len()`, rotating
    /// keys by `delta`. Payload layout is cell-major, then layer.
    pub fn inject(
        &mut self,
        seq: SeqId,
        start: usize,
        tokens: &[Token],
        keys: &[f32],
        values: &[f32],
        delta: i64,
    ) -> Result<()> {
        self.check_seq(seq)?;
        let (kc, vc) = (self.n_layers * self.key_width, self.n_layers * self.value_width);
        if keys.len() != tokens.len() * kc || values.len() != tokens.len() * vc {
            return Err(Error::Config(format!(
                "KV payload does not match layout: {} keys / {} values for {} tokens",
                keys.len(),
                values.len(),
                tokens.len()
            )));
        }
        if start + tokens.len() > self.max_positions {
            return Err(Error::Range(format!("injection end {} exceeds max_positions", start + tokens.len())));
        }
        if let Some(pos) = (start..start + tokens.len()).find(|p| self.map(seq).contains_key(p)) {
            return Err(Error::Overlap { seq, pos });
        }
        if tokens.len() > self.free_slots() {
            return Err(Error::Capacity { capacity: self.capacity });
        }
        let (kw, vw) = (self.key_width, self.value_width);
        for (i, &token) in tokens.iter().enumerate() {
            let idx = self.alloc_raw(KvCell { position: start + i, token, members: bit(seq) })?;
            for layer in 0..self.n_layers {
                let k = &mut self.keys[layer][idx * kw..(idx + 1) * kw];
                k.copy_from_slice(&keys[i * kc + layer * kw..i * kc + (layer + 1) * kw]);
                self.rope.rotate_in_place(k, delta);
                self.values[layer][idx * vw..(idx + 1) * vw]
                    .copy_from_slice(&values[i * vc + layer * vw..i * vc + (layer + 1) * vw]);
            }
            self.seqs[seq.0].insert(start + i, idx);
        }
        Ok(())
    }

    /// Flattened K and V payloads of `seq`, cell-major.
    pub fn export(&self, seq: SeqId) -> (Vec<Token>, Vec<f32>, Vec<f32>) {
        let mut tokens = Vec::new();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for &c in self.map(seq).values() {
            tokens.push(self.live(c).token);
            for layer in 0..self.n_layers {
                keys.extend_from_slice(self.key(CellId(c), layer));
                values.extend_from_slice(self.value(CellId(c), layer));
            }
        }
        (tokens, keys, values)
    }

    /// Deterministic text rendering of every non-empty sequence.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (s, map) in self.seqs.iter().enumerate() {
            if map.is_empty() {
                continue;
            }
            let _ = write!(out, "seq {s} [{}]:", map.len());
            for (&pos, &c) in map {
                let _ = write!(out, " {pos}:{}", render_token(self.live(c).token));
            }
            out.push('\n');
        }
        out
    }
}

fn render_token(t: Token) -> String {
    if let Some(tag) = tokenizer::control_tag(t) {
        tag.to_string()
    } else if (0x21..0x7f).contains(&t.0) && t.0 != u32::from(b'\'') {
        format!("'{}'", t.0 as u8 as char)
    } else {
        format!("#{:02x}", t.0)
    }
}

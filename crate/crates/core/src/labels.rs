//! Per-label trees embedded in the base tree.
//!
//! For each label `l`, `T_l` is a connected top part of the base tree. Its
//! leaves hold buffers of sorted vector ids; its internal nodes carry `l` in
//! their `interior` set. A node belongs to `T_l` iff it holds an `l`-buffer
//! or is internal for `l`. Bloom filters summarize, per node, every label
//! whose tree contains the node. Searches consult only the filters (or the
//! exact sets under [`Membership::Exact`]); maintenance routes through the
//! exact `interior` sets.

use std::collections::BTreeMap;

use crate::bloom::{BloomFilter, BloomParams};
use crate::index::{Index, Membership};
use crate::Label;

/// Labels at or above this value are virtual labels allocated for predicates.
pub const VIRTUAL_LABEL_BASE: Label = 1 << 31;

pub fn is_virtual(label: Label) -> bool {
    label >= VIRTUAL_LABEL_BASE
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelRegistry {
    /// `|P_l|` for every live label.
    pub counts: BTreeMap<Label, usize>,
    /// Next virtual label to hand out (0 until the first allocation).
    pub next_virtual: u64,
    /// Normalized predicate text of each virtual label.
    pub virtual_defs: BTreeMap<Label, String>,
}

impl LabelRegistry {
    pub(crate) fn allocate_virtual(&mut self) -> Option<Label> {
        let v = self.next_virtual.max(u64::from(VIRTUAL_LABEL_BASE));
        let label = Label::try_from(v).ok()?;
        self.next_virtual = v + 1;
        Some(label)
    }

    pub(crate) fn add(&mut self, label: Label, n: usize) {
        *self.counts.entry(label).or_default() += n;
    }

    pub(crate) fn remove_one(&mut self, label: Label) {
        if let Some(c) = self.counts.get_mut(&label) {
            *c -= 1;
            if *c == 0 {
                self.counts.remove(&label);
            }
        }
    }
}

impl Index {
    /// Batch construction of every per-label tree from the labels stored on
    /// live slots, followed by Bloom sizing and a bottom-up filter rebuild.
    pub fn build_all_labels(&mut self) {
        for n in &mut self.nodes {
            n.buffers.clear();
            n.interior.clear();
        }
        let per_label = self.collect_label_ids();
        self.labels.counts = per_label.iter().map(|(&l, ids)| (l, ids.len())).collect();
        let mut touched = Vec::new();
        for (label, ids) in &per_label {
            self.place_label(0, *label, ids, &mut touched);
            touched.clear();
        }
        self.bloom_params = self.derive_bloom_params();
        self.recompute_all_blooms();
        self.generation += 1;
    }

    /// Sorted live ids per label, from a pre-order walk of the leaves.
    pub(crate) fn collect_label_ids(&self) -> BTreeMap<Label, Vec<u64>> {
        let cfg = self.config.tree;
        let mut per_label: BTreeMap<Label, Vec<u64>> = BTreeMap::new();
        for n in &self.nodes {
            let Some(leaf) = &n.leaf else { continue };
            for (i, s) in leaf.slots.iter().enumerate() {
                if !s.live {
                    continue;
                }
                let id = n.id.slot_id(i as u64, &cfg).expect("stored slot is encodable").0;
                for &l in &s.labels {
                    per_label.entry(l).or_default().push(id);
                }
            }
        }
        per_label
    }

    /// Recursive partitioning of a sorted id slice below `node`: a slice of
    /// at most `B_max` ids (or any slice at a base leaf) becomes a buffer;
    /// larger slices make `node` internal and split by child id ranges.
    /// Every node that gains a buffer or an interior entry is appended to
    /// `touched`.
    pub(crate) fn place_label(&mut self, node: usize, label: Label, ids: &[u64], touched: &mut Vec<usize>) {
        if ids.is_empty() {
            return;
        }
        touched.push(node);
        if ids.len() <= self.config.buffer_capacity || self.nodes[node].is_leaf() {
            self.nodes[node].buffers.insert(label, ids.to_vec());
            return;
        }
        self.nodes[node].interior.insert(label);
        let children = self.nodes[node].children.clone();
        for c in children {
            let (lo, hi) = self.nodes[c].id.range(&self.config.tree);
            let a = ids.partition_point(|&x| x < lo);
            let b = ids.partition_point(|&x| x < hi);
            if a < b {
                self.place_label(c, label, &ids[a..b], touched);
            }
        }
    }

    /// Bloom sizing: configured override, else twice the mean number of
    /// per-label trees passing through a node.
    fn derive_bloom_params(&self) -> BloomParams {
        let expected = self.config.bloom_expected_labels.unwrap_or_else(|| {
            let total: usize = self.nodes.iter().map(|n| n.interior.len() + n.buffers.len()).sum();
            let mean = total as f64 / self.nodes.len().max(1) as f64;
            (2.0 * mean).ceil() as usize
        });
        BloomParams::for_capacity(expected.max(1), self.config.bloom_fp_rate)
    }

    /// Fresh filters for every node, children before parents.
    pub(crate) fn recompute_all_blooms(&mut self) {
        for i in (0..self.nodes.len()).rev() {
            self.recompute_bloom(i);
        }
    }

    /// `B_p = {l : P_{p,l} non-empty} ∪ ⋃_{c ∈ C_p} B_c` as a fresh filter.
    /// Returns whether the filter changed.
    pub(crate) fn recompute_bloom(&mut self, p: usize) -> bool {
        let params = self.bloom_params;
        let mut fresh = BloomFilter::new(params);
        for &c in &self.nodes[p].children {
            fresh.union_with(&self.nodes[c].bloom);
        }
        for &l in self.nodes[p].buffers.keys() {
            fresh.insert(l, params);
        }
        let changed = fresh != self.nodes[p].bloom;
        self.nodes[p].bloom = fresh;
        changed
    }

    /// Recompute `start`, then its ancestors, until a filter stays unchanged.
    pub(crate) fn propagate_bloom(&mut self, start: usize) {
        let mut cur = Some(start);
        while let Some(n) = cur {
            if !self.recompute_bloom(n) {
                break;
            }
            cur = self.nodes[n].parent;
        }
    }

    /// Membership test used by search: the node's Bloom filter, or the exact
    /// label sets in [`Membership::Exact`] mode.
    pub fn bloom_query(&self, node: usize, label: Label) -> bool {
        match self.config.membership {
            Membership::Bloom => self.nodes[node].bloom.contains(label, self.bloom_params),
            Membership::Exact => self.in_label_tree(node, label),
        }
    }

    /// Exact membership of `node` in `T_label`.
    pub fn in_label_tree(&self, node: usize, label: Label) -> bool {
        let n = &self.nodes[node];
        n.interior.contains(&label) || n.buffers.contains_key(&label)
    }

    /// Raw Bloom filter answer regardless of the membership mode.
    pub fn bloom_contains(&self, node: usize, label: Label) -> bool {
        self.nodes[node].bloom.contains(label, self.bloom_params)
    }

    /// All ids of `label`, sorted, gathered from the buffers of `T_label`.
    pub fn label_members(&self, label: Label) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.label_count(label));
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if let Some(buf) = node.buffers.get(&label) {
                out.extend_from_slice(buf);
            } else if node.interior.contains(&label) {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    /// Arena indices of the nodes of `T_label` in pre-order.
    pub fn label_tree_nodes(&self, label: Label) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.buffers.contains_key(&label) {
                out.push(n);
            } else if node.interior.contains(&label) {
                out.push(n);
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }
}

//! On-demand structural checks. Every check recomputes its expectation from
//! the raw slots (live flags, keys, label sets) rather than trusting the
//! derived structures it inspects.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::index::Index;
use crate::Label;

const MAX_REPORTED: usize = 50;

/// Violations found by [`Index::check_invariants`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Violations(pub Vec<String>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} invariant violation(s):", self.0.len())?;
        for v in &self.0 {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Violations {}

struct Report(Vec<String>);

impl Report {
    fn push(&mut self, msg: impl FnOnce() -> String) {
        if self.0.len() < MAX_REPORTED {
            self.0.push(msg());
        }
    }
}

impl Index {
    /// Run the full suite: tree shape, sizes, key map, contiguity, label
    /// placement (sorted buffers, partition, capacities, connectivity) and
    /// Bloom no-false-negatives.
    pub fn check_invariants(&self) -> Result<(), Violations> {
        let mut r = Report(Vec::new());
        self.check_shape(&mut r);
        if r.0.is_empty() {
            self.check_sizes_and_keys(&mut r);
            if let Err(v) = self.check_contiguity() {
                r.0.extend(v.0);
            }
            self.check_labels(&mut r);
        }
        if r.0.is_empty() {
            Ok(())
        } else {
            Err(Violations(r.0))
        }
    }

    fn check_shape(&self, r: &mut Report) {
        let cfg = &self.config.tree;
        if self.nodes.is_empty() {
            r.push(|| "empty arena".into());
            return;
        }
        if self.nodes[0].parent.is_some() || self.nodes[0].id != crate::id::NodeId::ROOT {
            r.push(|| "node 0 is not the root".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                r.push(|| format!("node {n} reached twice"));
                return;
            }
            order.push(n);
            let node = &self.nodes[n];
            if node.is_leaf() != node.leaf.is_some() {
                r.push(|| format!("node {} leaf payload mismatch", node.id));
            }
            for (b, &c) in node.children.iter().enumerate() {
                if self.nodes[c].parent != Some(n) {
                    r.push(|| format!("child {} has wrong parent", self.nodes[c].id));
                }
                if self.nodes[c].id != node.id.child(b as u32, cfg) {
                    r.push(|| format!("child {b} of {} has id {}", node.id, self.nodes[c].id));
                }
            }
            stack.extend(node.children.iter().rev());
        }
        if order.len() != self.nodes.len() || order.iter().enumerate().any(|(i, &n)| i != n) {
            r.push(|| "arena is not in pre-order".into());
        }
        if self
            .nodes
            .iter()
            .any(|n| n.bloom.words().len() != self.bloom_params.bits.div_ceil(64))
        {
            r.push(|| "bloom filter size differs from index parameters".into());
        }
    }

    fn check_sizes_and_keys(&self, r: &mut Report) {
        let cfg = &self.config.tree;
        let mut live = vec![0usize; self.nodes.len()];
        let mut keys = HashSet::new();
        for i in (0..self.nodes.len()).rev() {
            let n = &self.nodes[i];
            live[i] = match &n.leaf {
                Some(leaf) => {
                    if leaf.vectors.len() != leaf.slots.len() * self.dim {
                        r.push(|| format!("leaf {} vector rows != slots", n.id));
                    }
                    let mut c = 0;
                    for (s, sl) in leaf.slots.iter().enumerate() {
                        if !sl.live {
                            continue;
                        }
                        c += 1;
                        if !keys.insert(sl.key) {
                            r.push(|| format!("key {} live twice", sl.key));
                        }
                        if sl.labels.windows(2).any(|w| w[0] >= w[1]) {
                            r.push(|| format!("key {} label set not sorted", sl.key));
                        }
                        match n.id.slot_id(s as u64, cfg) {
                            Ok(id) if self.key_map.get(&sl.key) == Some(&id) => {}
                            _ => r.push(|| format!("key {} not mapped to its slot in {}", sl.key, n.id)),
                        }
                    }
                    c
                }
                None => n.children.iter().map(|&c| live[c]).sum(),
            };
            if n.size != live[i] {
                r.push(|| format!("node {} size {} but {} live vectors", n.id, n.size, live[i]));
            }
        }
        if keys.len() != self.key_map.len() {
            r.push(|| {
                format!(
                    "key map has {} entries for {} live slots",
                    self.key_map.len(),
                    keys.len()
                )
            });
        }
    }

    /// Sorted live ids list every subtree as one contiguous run inside the
    /// subtree's id range.
    pub fn check_contiguity(&self) -> Result<(), Violations> {
        let mut r = Report(Vec::new());
        let cfg = &self.config.tree;
        // (id, leaf arena index) for all live slots.
        let mut all: Vec<(u64, usize)> = Vec::with_capacity(self.key_map.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let Some(leaf) = &n.leaf else { continue };
            for (s, sl) in leaf.slots.iter().enumerate() {
                if sl.live {
                    if let Ok(id) = n.id.slot_id(s as u64, cfg) {
                        all.push((id.0, i));
                    }
                }
            }
        }
        all.sort_unstable();
        if all.windows(2).any(|w| w[0].0 == w[1].0) {
            r.push(|| "duplicate vector id".into());
        }
        // Subtree membership by ancestor walk, independent of ranges.
        let mut under = vec![Vec::new(); self.nodes.len()];
        for (pos, &(_, leaf)) in all.iter().enumerate() {
            let mut cur = Some(leaf);
            while let Some(c) = cur {
                under[c].push(pos);
                cur = self.nodes[c].parent;
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let ps = &under[i];
            if ps.is_empty() {
                continue;
            }
            let (first, last) = (ps[0], ps[ps.len() - 1]);
            if last - first + 1 != ps.len() {
                r.push(|| format!("subtree {} is not contiguous in id order", n.id));
            }
            let (lo, hi) = n.id.range(cfg);
            if all[first].0 < lo || all[last].0 >= hi {
                r.push(|| format!("subtree {} has ids outside [{lo:#x}, {hi:#x})", n.id));
            }
        }
        if r.0.is_empty() {
            Ok(())
        } else {
            Err(Violations(r.0))
        }
    }

    fn check_labels(&self, r: &mut Report) {
        let truth = self.collect_label_ids();
        let counts: BTreeMap<Label, usize> = truth.iter().map(|(&l, v)| (l, v.len())).collect();
        if counts != self.labels.counts {
            r.push(|| "label registry counts differ from slot labels".into());
        }
        let mut expected_entries = 0usize;
        for (&l, ids) in &truth {
            expected_entries += self.check_label_tree(l, ids, r);
        }
        let actual: usize = self.nodes.iter().map(|n| n.buffers.len() + n.interior.len()).sum();
        if actual != expected_entries {
            r.push(|| format!("{actual} label entries on nodes, expected {expected_entries}"));
        }
    }

    /// Walk the expected `T_l` and compare every node with the placement rule.
    /// Returns the number of (node, label) entries the rule implies.
    fn check_label_tree(&self, l: Label, ids: &[u64], r: &mut Report) -> usize {
        let cfg = &self.config.tree;
        let cap = self.config.buffer_capacity;
        let mut entries = 0;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let (lo, hi) = node.id.range(cfg);
            let a = ids.partition_point(|&x| x < lo);
            let b = ids.partition_point(|&x| x < hi);
            if a == b {
                continue;
            }
            entries += 1;
            if !self.bloom_contains(n, l) {
                r.push(|| format!("bloom of {} misses label {l}", node.id));
            }
            let want_buffer = b - a <= cap || node.is_leaf();
            match (want_buffer, node.buffers.get(&l), node.interior.contains(&l)) {
                (true, Some(buf), false) => {
                    if buf.as_slice() != &ids[a..b] {
                        r.push(|| format!("buffer of label {l} at {} differs from members in range", node.id));
                    }
                }
                (false, None, true) => stack.extend(node.children.iter().rev()),
                (w, buf, int) => r.push(|| {
                    format!(
                        "label {l} at {}: {} members, expected {}, found buffer={} interior={int}",
                        node.id,
                        b - a,
                        if w { "buffer" } else { "interior" },
                        buf.is_some()
                    )
                }),
            }
        }
        entries
    }

    /// Bloom answers over `(node, label)` pairs where the node is outside
    /// `T_label`, for all live labels: `(false positives, trials)`.
    pub fn bloom_false_positives(&self) -> (u64, u64) {
        let (mut fp, mut trials) = (0, 0);
        for &l in self.labels.counts.keys() {
            for (i, n) in self.nodes.iter().enumerate() {
                if n.interior.contains(&l) || n.buffers.contains_key(&l) {
                    continue;
                }
                trials += 1;
                if self.bloom_contains(i, l) {
                    fp += 1;
                }
            }
        }
        (fp, trials)
    }
}

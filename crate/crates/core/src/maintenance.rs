//! Incremental updates and subtree rebuilds.
//!
//! Label buffers behave like a buffer tree: an insert lands in the deepest
//! existing node of `T_l` on the id's path and an overflowing buffer is
//! split among the children by id range; a delete merges sibling buffers
//! back into their parent once they fit. Both keep each label's layout equal
//! to what batch placement would produce for the current members, and
//! neither computes a distance.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::id::{branch_at, NodeId, VectorId};
use crate::index::{Index, Leaf, Slot};
use crate::labels::is_virtual;
use crate::tree::Items;
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RebuildMode {
    /// Rebuild each queued subtree in place.
    Local,
    /// Rebuild the whole index if anything is queued.
    Global,
}

impl std::str::FromStr for RebuildMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(RebuildMode::Local),
            "global" => Ok(RebuildMode::Global),
            _ => Err(Error::InvalidConfig(format!("unknown rebuild mode {s:?}"))),
        }
    }
}

impl Index {
    /// Store `x` in the nearest leaf's next unused slot.
    pub fn insert_vector(&mut self, key: u64, x: &[f32]) -> Result<VectorId> {
        self.check_query(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        if self.key_map.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        let leaf = self.nearest_leaf_idx(x);
        let node = &self.nodes[leaf];
        let slots = node.leaf.as_ref().map_or(0, |l| l.slots.len());
        let id = node
            .id
            .slot_id(slots as u64, &self.config.tree)
            .map_err(|_| Error::SlotsExhausted {
                depth: node.id.depth as usize,
            })?;
        let payload = self.nodes[leaf].leaf.get_or_insert_with(Leaf::default);
        payload.slots.push(Slot {
            key,
            live: true,
            labels: Vec::new(),
        });
        payload.vectors.extend_from_slice(x);
        self.key_map.insert(key, id);
        self.bump_path(leaf, true);
        self.generation += 1;
        Ok(id)
    }

    /// Insert a vector and then each of `labels`.
    pub fn insert_vector_with_labels(&mut self, key: u64, x: &[f32], labels: &[Label]) -> Result<VectorId> {
        if let Some(&l) = labels.iter().find(|&&l| is_virtual(l)) {
            return Err(Error::ReservedLabel(l));
        }
        let id = self.insert_vector(key, x)?;
        let mut ls = labels.to_vec();
        ls.sort_unstable();
        ls.dedup();
        for l in ls {
            self.insert_label(key, l)?;
        }
        Ok(id)
    }

    /// Tombstone the vector's slot (located from its id, no search) after
    /// removing it from every label it carries.
    pub fn delete_vector(&mut self, key: u64) -> Result<()> {
        let id = self.id_of(key).ok_or(Error::UnknownKey(key))?;
        let (leaf, slot) = self.locate(id).expect("mapped id resolves");
        let labels = self.slot_mut(leaf, slot).labels.clone();
        for l in labels {
            self.remove_label(key, id, l)?;
        }
        let s = self.slot_mut(leaf, slot);
        s.live = false;
        self.key_map.remove(&key);
        self.bump_path(leaf, false);
        self.generation += 1;
        Ok(())
    }

    pub fn insert_label(&mut self, key: u64, label: Label) -> Result<()> {
        if is_virtual(label) {
            return Err(Error::ReservedLabel(label));
        }
        let id = self.id_of(key).ok_or(Error::UnknownKey(key))?;
        let (leaf, slot) = self.locate(id).expect("mapped id resolves");
        let labels = &mut self.slot_mut(leaf, slot).labels;
        match labels.binary_search(&label) {
            Ok(_) => return Err(Error::DuplicateLabel { key, label }),
            Err(at) => labels.insert(at, label),
        }
        self.labels.add(label, 1);
        let raw = id.0;
        let target = self.label_insert_target(raw, label);
        let buf = self.nodes[target].buffers.entry(label).or_default();
        let at = buf.partition_point(|&x| x < raw);
        buf.insert(at, raw);
        let mut touched = vec![target];
        if buf.len() > self.config.buffer_capacity && !self.nodes[target].is_leaf() {
            let ids = self.nodes[target].buffers.remove(&label).expect("just filled");
            self.place_label(target, label, &ids, &mut touched);
        }
        self.refresh_blooms(touched);
        self.generation += 1;
        Ok(())
    }

    pub fn delete_label(&mut self, key: u64, label: Label) -> Result<()> {
        let id = self.id_of(key).ok_or(Error::UnknownKey(key))?;
        self.remove_label(key, id, label)?;
        self.generation += 1;
        Ok(())
    }

    /// Node that receives a new id for `label`: the buffer node on the id's
    /// path, else the first path node outside `T_l` (the root if `T_l` is empty).
    fn label_insert_target(&self, raw: u64, label: Label) -> usize {
        let mut cur = 0;
        loop {
            let n = &self.nodes[cur];
            if !n.interior.contains(&label) {
                return cur;
            }
            let b = branch_at(raw, n.id.depth as usize, &self.config.tree) as usize;
            cur = n.children[b];
        }
    }

    fn remove_label(&mut self, key: u64, id: VectorId, label: Label) -> Result<()> {
        let (leaf, slot) = self.locate(id).expect("mapped id resolves");
        let labels = &mut self.slot_mut(leaf, slot).labels;
        match labels.binary_search(&label) {
            Ok(at) => {
                labels.remove(at);
            }
            Err(_) => return Err(Error::LabelAbsent { key, label }),
        }
        self.labels.remove_one(label);
        if is_virtual(label) && self.label_count(label) == 0 {
            self.labels.virtual_defs.remove(&label);
        }
        let host = self.label_insert_target(id.0, label);
        let buf = self.nodes[host]
            .buffers
            .get_mut(&label)
            .expect("member id sits in a buffer on its path");
        let at = buf.binary_search(&id.0).expect("member id is buffered");
        buf.remove(at);
        if buf.is_empty() {
            self.nodes[host].buffers.remove(&label);
        }
        let mut touched = vec![host];
        let mut cur = self.nodes[host].parent;
        while let Some(p) = cur {
            let kids = self.nodes[p].children.clone();
            let mut total = 0;
            for &c in &kids {
                if self.nodes[c].interior.contains(&label) {
                    total = usize::MAX;
                    break;
                }
                total += self.nodes[c].buffers.get(&label).map_or(0, Vec::len);
            }
            if total > self.config.buffer_capacity {
                break;
            }
            let mut merged = Vec::with_capacity(total);
            for &c in &kids {
                if let Some(b) = self.nodes[c].buffers.remove(&label) {
                    merged.extend(b);
                    touched.push(c);
                }
            }
            let node = &mut self.nodes[p];
            node.interior.remove(&label);
            if !merged.is_empty() {
                node.buffers.insert(label, merged);
            }
            touched.push(p);
            cur = node.parent;
        }
        self.refresh_blooms(touched);
        Ok(())
    }

    /// Recompute the filters of `touched` (all inside the subtree of the
    /// topmost one) children-first, then propagate above it.
    fn refresh_blooms(&mut self, mut touched: Vec<usize>) {
        touched.sort_unstable_by(|a, b| b.cmp(a));
        touched.dedup();
        for &n in &touched {
            self.recompute_bloom(n);
        }
        if let Some(parent) = touched.last().and_then(|&top| self.nodes[top].parent) {
            self.propagate_bloom(parent);
        }
    }

    fn slot_mut(&mut self, leaf: usize, slot: usize) -> &mut Slot {
        &mut self.nodes[leaf].leaf.as_mut().expect("leaf").slots[slot]
    }

    /// Update sizes and counters from `leaf` to the root, then queue the
    /// topmost node whose update ratio crossed the threshold.
    fn bump_path(&mut self, leaf: usize, insert: bool) {
        let path = self.path_to(leaf);
        for &n in &path {
            let node = &mut self.nodes[n];
            if insert {
                node.size += 1;
            } else {
                node.size -= 1;
            }
            node.updates += 1;
        }
        for &n in &path {
            if self.maybe_enqueue_rebuild(self.nodes[n].id) {
                break;
            }
        }
    }

    /// Queue `node` when `U_n / |P_n| > τ`. Returns whether it is queued
    /// afterwards (nodes already covered by a queued ancestor count).
    pub fn maybe_enqueue_rebuild(&mut self, node: NodeId) -> bool {
        let Some(n) = self.find_node(node) else {
            return false;
        };
        let (updates, size) = (n.update_count(), n.size());
        let ratio = if size == 0 {
            if updates > 0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            updates as f64 / size as f64
        };
        if ratio <= self.config.rebuild_threshold {
            return false;
        }
        let cfg = self.config.tree;
        let covered = self
            .rebuild_queue
            .iter()
            .any(|q| q.depth <= node.depth && q.range(&cfg).0 <= node.prefix && node.prefix < q.range(&cfg).1);
        if !covered {
            debug!(%node, updates, size, "queued for rebuild");
            self.rebuild_queue.push(node);
        }
        true
    }

    pub fn rebuild_queue(&self) -> &[NodeId] {
        &self.rebuild_queue
    }

    /// Drain the rebuild queue. Returns the nodes that were rebuilt.
    pub fn run_rebuilds(&mut self, mode: RebuildMode, seed: u64) -> Result<Vec<NodeId>> {
        if self.rebuild_queue.is_empty() {
            return Ok(Vec::new());
        }
        self.config.seed = seed;
        if mode == RebuildMode::Global {
            self.rebuild_global()?;
            return Ok(vec![NodeId::ROOT]);
        }
        let mut queue = std::mem::take(&mut self.rebuild_queue);
        queue.sort_by_key(|n| (n.depth, n.prefix));
        let cfg = self.config.tree;
        let mut done: Vec<NodeId> = Vec::new();
        for n in queue {
            let inside = done
                .iter()
                .any(|d| d.depth <= n.depth && d.range(&cfg).0 <= n.prefix && n.prefix < d.range(&cfg).1);
            if inside {
                continue;
            }
            self.rebuild_local(n)?;
            done.push(n);
        }
        Ok(done)
    }

    /// Rebuild the base tree from the live vectors and re-embed every label.
    pub fn rebuild_global(&mut self) -> Result<()> {
        let (vectors, keys, labels) = self.gather_live(0);
        let items = Items {
            dim: self.dim,
            vectors: &vectors,
            keys: &keys,
            labels: &labels,
        };
        let old_warnings = std::mem::take(&mut self.warnings);
        if let Err(e) = self.build_base(&items) {
            self.warnings = old_warnings;
            return Err(e);
        }
        self.rebuild_queue.clear();
        self.build_all_labels();
        Ok(())
    }

    /// Rebuild the subtree at `node` from its live vectors. Ids inside the
    /// subtree are reassigned; everything outside keeps its id.
    pub fn rebuild_local(&mut self, node: NodeId) -> Result<()> {
        let n = self
            .find_node(node)
            .ok_or_else(|| Error::InvalidConfig(format!("no node {node}")))?
            .handle();
        let Some(parent) = self.nodes[n].parent else {
            return self.rebuild_global();
        };
        let cfg = self.config.tree;
        self.rebuild_queue
            .retain(|q| !(q.depth >= node.depth && node.contains(VectorId(q.prefix), &cfg)));
        if self.nodes[n].size == 0 {
            self.nodes[n].updates = 0;
            return Ok(());
        }
        let (vectors, keys, labels) = self.gather_live(n);
        let old_ids: Vec<u64> = keys.iter().map(|k| self.key_map[k].0).collect();
        let items = Items {
            dim: self.dim,
            vectors: &vectors,
            keys: &keys,
            labels: &labels,
        };
        let members: Vec<usize> = (0..keys.len()).collect();
        let mut fresh = Vec::new();
        let mut warnings = Vec::new();
        self.build_subtree(&items, &members, node, Some(parent), &mut fresh, &mut warnings)?;
        self.warnings.extend(warnings);

        // Graft the new subtree at the end of the arena.
        let offset = self.nodes.len();
        for (i, mut nd) in fresh.into_iter().enumerate() {
            if i > 0 {
                nd.parent = nd.parent.map(|p| p + offset);
            }
            for c in &mut nd.children {
                *c += offset;
            }
            self.nodes.push(nd);
        }
        let slot = self.nodes[parent]
            .children
            .iter()
            .position(|&c| c == n)
            .expect("child of its parent");
        self.nodes[parent].children[slot] = offset;

        // Old -> new ids.
        let mut remap: HashMap<u64, u64> = HashMap::with_capacity(keys.len());
        for i in offset..self.nodes.len() {
            let nd = &self.nodes[i];
            let Some(leaf) = &nd.leaf else { continue };
            for (s, sl) in leaf.slots.iter().enumerate() {
                let new = nd.id.slot_id(s as u64, &cfg).expect("fresh slot encodes").0;
                remap.insert(sl.key, new);
            }
        }
        let id_map: HashMap<u64, u64> = old_ids.iter().zip(&keys).map(|(&old, k)| (old, remap[k])).collect();
        for (k, new) in &remap {
            self.key_map.insert(*k, VectorId(*new));
        }

        // Ancestor buffers keep their position; only ids inside the range change.
        let (lo, hi) = node.range(&cfg);
        for a in self.path_to(parent) {
            for buf in self.nodes[a].buffers.values_mut() {
                let s = buf.partition_point(|&x| x < lo);
                let e = buf.partition_point(|&x| x < hi);
                if s < e {
                    for x in &mut buf[s..e] {
                        *x = id_map[x];
                    }
                    buf[s..e].sort_unstable();
                }
            }
        }

        // Labels whose tree reached the old node are re-placed from the new one.
        let old = &self.nodes[n];
        let reached: BTreeSet<Label> = old.interior.iter().chain(old.buffers.keys()).copied().collect();
        let mut per_label: HashMap<Label, Vec<u64>> = HashMap::new();
        for (i, ls) in labels.iter().enumerate() {
            for l in ls {
                if reached.contains(l) {
                    per_label.entry(*l).or_default().push(remap[&keys[i]]);
                }
            }
        }
        let mut placed: Vec<(Label, Vec<u64>)> = per_label.into_iter().collect();
        placed.sort_unstable_by_key(|(l, _)| *l);
        let mut scratch = Vec::new();
        for (l, mut ids) in placed {
            ids.sort_unstable();
            self.place_label(offset, l, &ids, &mut scratch);
        }
        for i in (offset..self.nodes.len()).rev() {
            self.recompute_bloom(i);
        }
        self.propagate_bloom(parent);
        self.compact();
        self.generation += 1;
        Ok(())
    }

    /// Live vectors, keys and label sets under arena node `n`, in id order.
    fn gather_live(&self, n: usize) -> (Vec<f32>, Vec<u64>, Vec<Vec<Label>>) {
        let (mut vectors, mut keys, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let mut stack = vec![n];
        while let Some(i) = stack.pop() {
            let nd = &self.nodes[i];
            stack.extend(nd.children.iter().rev());
            let Some(leaf) = &nd.leaf else { continue };
            for (s, sl) in leaf.slots.iter().enumerate() {
                if sl.live {
                    vectors.extend_from_slice(&leaf.vectors[s * self.dim..(s + 1) * self.dim]);
                    keys.push(sl.key);
                    labels.push(sl.labels.clone());
                }
            }
        }
        (vectors, keys, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, LabelAssignment};
    use crate::id::TreeConfig;
    use crate::index::IndexConfig;

    fn cfg(bf: usize, cap: usize, bmax: usize) -> IndexConfig {
        IndexConfig {
            tree: TreeConfig::new(bf, cap),
            buffer_capacity: bmax,
            ..Default::default()
        }
    }

    fn spread(n: usize) -> Dataset {
        let data = (0..n)
            .flat_map(|i| [(i as f32 * 0.731).sin() * 50.0, (i as f32 * 1.37).cos() * 50.0])
            .collect();
        Dataset::new(2, data).unwrap()
    }

    #[test]
    fn insert_into_single_leaf() {
        let ds = Dataset::new(2, vec![0.0, 0.0]).unwrap();
        let mut idx = Index::build(&ds, &LabelAssignment::empty(1), cfg(4, 16, 16)).unwrap();
        idx.delete_vector(0).unwrap();
        let id = idx.insert_vector(7, &[1.0, 1.0]).unwrap();
        assert_eq!(id, VectorId(1), "tombstoned slot 0 is not reused");
        assert_eq!(idx.root().size(), 1);
        assert!(idx.delete_vector(0).is_err());
    }

    #[test]
    fn first_label_makes_root_buffer() {
        let ds = spread(100);
        let mut idx = Index::build(&ds, &LabelAssignment::empty(100), cfg(4, 8, 8)).unwrap();
        idx.insert_label(42, 9).unwrap();
        let id = idx.id_of(42).unwrap().0;
        assert_eq!(idx.root().buffer(9), Some(&[id][..]));
        assert!(idx.bloom_contains(0, 9));
        assert!(matches!(idx.insert_label(42, 9), Err(Error::DuplicateLabel { .. })));
        assert!(matches!(idx.delete_label(41, 9), Err(Error::LabelAbsent { .. })));
    }

    #[test]
    fn overflow_flushes_and_underflow_merges() {
        let ds = spread(200);
        let mut idx = Index::build(&ds, &LabelAssignment::empty(200), cfg(4, 8, 4)).unwrap();
        for k in 0..5 {
            idx.insert_label(k, 1).unwrap();
        }
        assert!(idx.root().is_interior_of(1));
        assert!(idx.root().buffer(1).is_none());
        assert_eq!(idx.label_members(1).len(), 5);
        idx.delete_label(4, 1).unwrap();
        assert_eq!(idx.root().buffer(1).map(<[u64]>::len), Some(4));
        assert!(!idx.root().is_interior_of(1));
        assert_eq!(idx.label_tree_nodes(1), vec![0]);
        assert_eq!(idx.distance_evals(), 0);
    }

    #[test]
    fn deleting_last_member_drops_label_tree() {
        let ds = spread(50);
        let mut idx = Index::build(&ds, &LabelAssignment::empty(50), cfg(4, 8, 4)).unwrap();
        idx.insert_label(3, 2).unwrap();
        idx.delete_vector(3).unwrap();
        assert!(idx.label_tree_nodes(2).is_empty());
        assert_eq!(idx.label_count(2), 0);
        assert!(idx.nodes().all(|n| !n.label_set().contains(&2)));
    }

    #[test]
    fn threshold_arithmetic() {
        let ds = spread(100);
        let mut idx = Index::build(&ds, &LabelAssignment::empty(100), cfg(2, 100, 8)).unwrap();
        assert!(idx.root().is_leaf());
        idx.nodes[0].updates = 50;
        assert!(!idx.maybe_enqueue_rebuild(NodeId::ROOT));
        idx.nodes[0].updates = 51;
        assert!(idx.maybe_enqueue_rebuild(NodeId::ROOT));
        assert_eq!(idx.rebuild_queue(), &[NodeId::ROOT]);
    }

    #[test]
    fn reserved_labels_rejected() {
        let ds = spread(10);
        let mut idx = Index::build(&ds, &LabelAssignment::empty(10), cfg(2, 4, 4)).unwrap();
        assert!(matches!(
            idx.insert_label(0, crate::labels::VIRTUAL_LABEL_BASE),
            Err(Error::ReservedLabel(_))
        ));
    }
}

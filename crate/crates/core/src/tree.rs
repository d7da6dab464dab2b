//! Base tree construction and navigation.

use tracing::warn;

use crate::bloom::BloomFilter;
use crate::error::{Error, Result};
use crate::id::{branch_at, low_mask, NodeId, VectorId};
use crate::index::{l2_sq, Index, Leaf, Node, NodeRef, Slot};
use crate::kmeans;
use crate::rng::splitmix64;
use crate::Label;

/// Borrowed build input: row-major vectors with keys and label sets.
pub(crate) struct Items<'a> {
    pub dim: usize,
    pub vectors: &'a [f32],
    pub keys: &'a [u64],
    pub labels: &'a [Vec<Label>],
}

impl Items<'_> {
    fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

impl Index {
    /// Replace the whole tree with a fresh build over `items`.
    pub(crate) fn build_base(&mut self, items: &Items<'_>) -> Result<()> {
        self.nodes.clear();
        self.key_map.clear();
        self.warnings.clear();
        let all: Vec<usize> = (0..items.keys.len()).collect();
        let mut arena = Vec::new();
        let mut warnings = Vec::new();
        self.build_subtree(items, &all, NodeId::ROOT, None, &mut arena, &mut warnings)?;
        self.nodes = arena;
        self.warnings = warnings;
        self.rebuild_key_map();
        self.generation += 1;
        Ok(())
    }

    /// Recursively build the subtree for `members` rooted at `id`, appending
    /// nodes to `arena` in pre-order. Returns the arena index of the root.
    pub(crate) fn build_subtree(
        &self,
        items: &Items<'_>,
        members: &[usize],
        id: NodeId,
        parent: Option<usize>,
        arena: &mut Vec<Node>,
        warnings: &mut Vec<String>,
    ) -> Result<usize> {
        let cfg = &self.config.tree;
        let dim = items.dim;
        let (centroid, mean_radius) = centroid_and_radius(items, members);
        let me = arena.len();
        arena.push(Node {
            id,
            parent,
            children: Vec::new(),
            centroid,
            mean_radius,
            size: members.len(),
            updates: 0,
            leaf: None,
            buffers: Default::default(),
            interior: Default::default(),
            bloom: BloomFilter::new(self.bloom_params),
        });
        let depth = id.depth as usize;
        if members.len() <= cfg.leaf_capacity || depth >= cfg.max_depth {
            if members.len() > cfg.leaf_capacity {
                let msg = format!(
                    "leaf {id} holds {} vectors (capacity {}) at max depth",
                    members.len(),
                    cfg.leaf_capacity
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            if members.len() as u128 > cfg.slot_capacity(depth) {
                return Err(Error::SlotsExhausted { depth });
            }
            let mut leaf = Leaf {
                slots: Vec::with_capacity(members.len()),
                vectors: Vec::with_capacity(members.len() * dim),
            };
            for &m in members {
                leaf.slots.push(Slot {
                    key: items.keys[m],
                    live: true,
                    labels: items.labels[m].clone(),
                });
                leaf.vectors.extend_from_slice(items.row(m));
            }
            // The last slot of the rightmost leaf could land on the reserved id.
            if let Some(last) = members.len().checked_sub(1) {
                id.slot_id(last as u64, cfg)?;
            }
            arena[me].leaf = Some(leaf);
            return Ok(me);
        }
        let k = cfg.branch_factor.min(members.len());
        let points: Vec<f32> = members.iter().flat_map(|&m| items.row(m)).copied().collect();
        let seed = splitmix64(self.config.seed ^ splitmix64(id.prefix) ^ u64::from(id.depth));
        let km = kmeans::train(&points, dim, k, self.config.kmeans_iters, seed)?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (&m, &c) in members.iter().zip(&km.assignment) {
            groups[c].push(m);
        }
        let mut children = Vec::with_capacity(k);
        for (b, group) in groups.iter().enumerate() {
            let child = self.build_subtree(items, group, id.child(b as u32, cfg), Some(me), arena, warnings)?;
            children.push(child);
        }
        arena[me].children = children;
        Ok(me)
    }

    pub(crate) fn rebuild_key_map(&mut self) {
        self.key_map.clear();
        let cfg = self.config.tree;
        for n in &self.nodes {
            let Some(leaf) = &n.leaf else { continue };
            for (i, s) in leaf.slots.iter().enumerate() {
                if s.live {
                    let id = n.id.slot_id(i as u64, &cfg).expect("stored slot is encodable");
                    self.key_map.insert(s.key, id);
                }
            }
        }
    }

    /// Arena index of the leaf whose path prefixes `id`, and the slot.
    pub(crate) fn locate(&self, id: VectorId) -> Option<(usize, usize)> {
        let cfg = &self.config.tree;
        let mut cur = 0;
        if self.nodes.is_empty() {
            return None;
        }
        loop {
            let n = &self.nodes[cur];
            if n.is_leaf() {
                let depth = n.id.depth as usize;
                if !n.id.contains(id, cfg) {
                    return None;
                }
                let slot = (id.0 & low_mask(cfg.slot_field_bits(depth))) as usize;
                let slots = n.leaf.as_ref()?.slots.len();
                return (slot < slots).then_some((cur, slot));
            }
            let b = branch_at(id.0, n.id.depth as usize, cfg) as usize;
            cur = *n.children.get(b)?;
        }
    }

    pub(crate) fn leaf_vector(&self, leaf: usize, slot: usize) -> &[f32] {
        let l = self.nodes[leaf].leaf.as_ref().expect("leaf node");
        &l.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Vector of `id` without the liveness check (buffers only hold live ids).
    pub(crate) fn vector_unchecked(&self, id: u64) -> &[f32] {
        let (leaf, slot) = self.locate(VectorId(id)).expect("buffered id resolves to a slot");
        self.leaf_vector(leaf, slot)
    }

    /// Greedy descent to the leaf whose centroids are nearest at every level.
    pub fn nearest_leaf(&self, x: &[f32]) -> NodeRef<'_> {
        self.node(self.nearest_leaf_idx(x))
    }

    pub(crate) fn nearest_leaf_idx(&self, x: &[f32]) -> usize {
        let mut cur = 0;
        let mut evals = 0;
        while !self.nodes[cur].is_leaf() {
            let mut best = (self.nodes[cur].children[0], f32::INFINITY);
            for &c in &self.nodes[cur].children {
                let d = l2_sq(x, &self.nodes[c].centroid);
                evals += 1;
                if d < best.1 {
                    best = (c, d);
                }
            }
            cur = best.0;
        }
        self.add_distance_evals(evals);
        cur
    }

    /// Arena indices from the root to `node`, inclusive.
    pub(crate) fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Renumber the arena into pre-order, dropping unreachable nodes.
    pub(crate) fn compact(&mut self) {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(self.nodes[n].children.iter().rev());
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut old_nodes: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order
            .iter()
            .map(|&old| {
                let mut n = old_nodes[old].take().expect("visited once");
                n.parent = n.parent.map(|p| remap[p]);
                for c in &mut n.children {
                    *c = remap[*c];
                }
                n
            })
            .collect();
    }
}

fn centroid_and_radius(items: &Items<'_>, members: &[usize]) -> (Vec<f32>, f32) {
    let dim = items.dim;
    if members.is_empty() {
        return (vec![0.0; dim], 0.0);
    }
    let mut sum = vec![0f64; dim];
    for &m in members {
        for (s, &v) in sum.iter_mut().zip(items.row(m)) {
            *s += f64::from(v);
        }
    }
    let n = members.len() as f64;
    let centroid: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let radius: f64 = members
        .iter()
        .map(|&m| f64::from(l2_sq(items.row(m), &centroid)).sqrt())
        .sum::<f64>()
        / n;
    (centroid, radius as f32)
}

#[cfg(test)]
mod tests {
    use crate::dataset::{Dataset, LabelAssignment};
    use crate::id::TreeConfig;
    use crate::index::{Index, IndexConfig};

    fn grid(n: usize) -> Dataset {
        let data: Vec<f32> = (0..n).flat_map(|i| [i as f32, (i * 7 % 13) as f32]).collect();
        Dataset::new(2, data).unwrap()
    }

    #[test]
    fn small_dataset_is_a_single_leaf() {
        let ds = grid(10);
        let cfg = IndexConfig {
            tree: TreeConfig::new(16, 16),
            ..Default::default()
        };
        let idx = Index::build(&ds, &LabelAssignment::empty(10), cfg).unwrap();
        assert_eq!(idx.node_count(), 1);
        assert!(idx.root().is_leaf());
        assert_eq!(idx.root().slot_count(), 10);
        assert!(std::ptr::eq(
            idx.nearest_leaf(&[3.0, 3.0]).centroid(),
            idx.root().centroid()
        ));
    }

    #[test]
    fn oversized_leaf_at_max_depth_warns() {
        let ds = grid(40);
        let cfg = IndexConfig {
            tree: TreeConfig {
                branch_factor: 2,
                leaf_capacity: 4,
                max_depth: 1,
                slot_bits: 8,
            },
            ..Default::default()
        };
        let idx = Index::build(&ds, &LabelAssignment::empty(40), cfg).unwrap();
        assert!(!idx.warnings().is_empty());
        assert_eq!(idx.leaves().map(|l| l.size()).sum::<usize>(), 40);
    }

    #[test]
    fn locate_every_key() {
        let ds = grid(500);
        let cfg = IndexConfig {
            tree: TreeConfig::new(4, 8),
            ..Default::default()
        };
        let idx = Index::build(&ds, &LabelAssignment::empty(500), cfg).unwrap();
        for i in 0..500 {
            let id = idx.id_of(i as u64).unwrap();
            assert_eq!(idx.key_of(id), Some(i as u64));
            assert_eq!(idx.vector(id).unwrap(), ds.row(i));
        }
    }
}

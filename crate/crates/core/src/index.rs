//! The index: base tree arena, key map, label registry and configuration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bloom::{BloomFilter, BloomParams};
use crate::dataset::{Dataset, LabelAssignment};
use crate::error::{Error, Result};
use crate::id::{NodeId, TreeConfig, VectorId};
use crate::labels::LabelRegistry;
use crate::Label;

/// How nodes answer "is this node inside the per-label tree of `l`".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    /// Per-node Bloom filters (may report false positives).
    #[default]
    Bloom,
    /// Exact label sets; used to make completeness checks deterministic.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub tree: TreeConfig,
    /// Buffer capacity `B_max` of per-label leaves.
    pub buffer_capacity: usize,
    pub bloom_fp_rate: f64,
    /// Overrides the derived number of labels each filter is sized for.
    pub bloom_expected_labels: Option<usize>,
    pub membership: Membership,
    /// Update ratio `U_n / |P_n|` above which a subtree is queued for rebuild.
    pub rebuild_threshold: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            buffer_capacity: 64,
            bloom_fp_rate: 0.01,
            bloom_expected_labels: None,
            membership: Membership::Bloom,
            rebuild_threshold: 0.5,
            kmeans_iters: crate::kmeans::DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        if self.buffer_capacity == 0 {
            return Err(Error::InvalidConfig("buffer_capacity must be positive".into()));
        }
        if !(self.bloom_fp_rate > 0.0 && self.bloom_fp_rate < 1.0) {
            return Err(Error::InvalidConfig("bloom_fp_rate must be in (0,1)".into()));
        }
        if self.rebuild_threshold.is_nan() || self.rebuild_threshold < 0.0 {
            return Err(Error::InvalidConfig("rebuild_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Slot {
    pub key: u64,
    pub live: bool,
    /// Sorted label set, including virtual labels.
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Leaf {
    pub slots: Vec<Slot>,
    /// Row-major, one row per slot (tombstones keep their row).
    pub vectors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Node {
    pub id: NodeId,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub centroid: Vec<f32>,
    pub mean_radius: f32,
    /// Live vectors in the subtree.
    pub size: usize,
    /// Vector inserts and deletes routed through this node since its last rebuild.
    pub updates: u64,
    pub leaf: Option<Leaf>,
    /// Per-label buffers: sorted raw ids, present only where this node is a leaf of `T_l`.
    pub buffers: BTreeMap<Label, Vec<u64>>,
    /// Labels whose per-label tree has this node as an internal node.
    pub interior: BTreeSet<Label>,
    pub bloom: BloomFilter,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Filtered ANN index: a hierarchical k-means base tree with per-label
/// trees embedded through buffers and Bloom filters.
#[derive(Debug)]
pub struct Index {
    pub(crate) config: IndexConfig,
    pub(crate) dim: usize,
    /// Arena in pre-order; index 0 is the root.
    pub(crate) nodes: Vec<Node>,
    pub(crate) key_map: HashMap<u64, VectorId>,
    pub(crate) labels: LabelRegistry,
    pub(crate) bloom_params: BloomParams,
    pub(crate) rebuild_queue: Vec<NodeId>,
    pub(crate) distance_evals: AtomicU64,
    pub(crate) generation: u64,
    pub(crate) warnings: Vec<String>,
}

impl Clone for Index {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            dim: self.dim,
            nodes: self.nodes.clone(),
            key_map: self.key_map.clone(),
            labels: self.labels.clone(),
            bloom_params: self.bloom_params,
            rebuild_queue: self.rebuild_queue.clone(),
            distance_evals: AtomicU64::new(self.distance_evals.load(Ordering::Relaxed)),
            generation: self.generation,
            warnings: self.warnings.clone(),
        }
    }
}

/// Read-only view of one base-tree node.
#[derive(Clone, Copy)]
pub struct NodeRef<'a> {
    index: &'a Index,
    idx: usize,
}

impl<'a> NodeRef<'a> {
    pub fn handle(&self) -> usize {
        self.idx
    }

    fn node(&self) -> &'a Node {
        &self.index.nodes[self.idx]
    }

    pub fn id(&self) -> NodeId {
        self.node().id
    }

    pub fn depth(&self) -> usize {
        self.node().id.depth as usize
    }

    pub fn centroid(&self) -> &'a [f32] {
        &self.node().centroid
    }

    pub fn mean_radius(&self) -> f32 {
        self.node().mean_radius
    }

    pub fn size(&self) -> usize {
        self.node().size
    }

    pub fn update_count(&self) -> u64 {
        self.node().updates
    }

    pub fn is_leaf(&self) -> bool {
        self.node().is_leaf()
    }

    pub fn parent(&self) -> Option<NodeRef<'a>> {
        self.node().parent.map(|p| self.index.node(p))
    }

    pub fn children(&self) -> impl Iterator<Item = NodeRef<'a>> + 'a {
        let index = self.index;
        self.node().children.iter().map(move |&c| index.node(c))
    }

    /// Half-open raw id range of the subtree.
    pub fn range(&self) -> (u64, u64) {
        self.node().id.range(&self.index.config.tree)
    }

    pub fn buffer(&self, label: Label) -> Option<&'a [u64]> {
        self.node().buffers.get(&label).map(Vec::as_slice)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (Label, &'a [u64])> + 'a {
        self.node().buffers.iter().map(|(&l, v)| (l, v.as_slice()))
    }

    /// Exact set of labels whose per-label tree contains this node.
    pub fn label_set(&self) -> BTreeSet<Label> {
        let n = self.node();
        n.interior.iter().chain(n.buffers.keys()).copied().collect()
    }

    pub fn is_interior_of(&self, label: Label) -> bool {
        self.node().interior.contains(&label)
    }

    /// Live `(key, id, vector)` triples of a leaf.
    pub fn live_slots(&self) -> Vec<(u64, VectorId, &'a [f32])> {
        let n = self.node();
        let Some(leaf) = &n.leaf else {
            return Vec::new();
        };
        let dim = self.index.dim;
        leaf.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.live)
            .map(|(i, s)| {
                let id =
                    n.id.slot_id(i as u64, &self.index.config.tree)
                        .expect("stored slot is encodable");
                (s.key, id, &leaf.vectors[i * dim..(i + 1) * dim])
            })
            .collect()
    }

    pub fn slot_count(&self) -> usize {
        self.node().leaf.as_ref().map_or(0, |l| l.slots.len())
    }
}

/// Squared Euclidean distance.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Index {
    /// Build the base tree over `ds`, then embed every label of `labels`.
    pub fn build(ds: &Dataset, labels: &LabelAssignment, config: IndexConfig) -> Result<Self> {
        config.validate()?;
        if ds.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        if labels.len() != ds.len() {
            return Err(Error::LabelCountMismatch {
                expected: ds.len(),
                got: labels.len(),
            });
        }
        if let Some(&l) = labels.sets().iter().flatten().find(|&&l| crate::labels::is_virtual(l)) {
            return Err(Error::ReservedLabel(l));
        }
        let mut key_seen = std::collections::HashSet::with_capacity(ds.len());
        for &k in ds.keys() {
            if !key_seen.insert(k) {
                return Err(Error::DuplicateKey(k));
            }
        }
        let mut index = Self::empty(config, ds.dim());
        let items = crate::tree::Items {
            dim: ds.dim(),
            vectors: ds.data(),
            keys: ds.keys(),
            labels: labels.sets(),
        };
        index.build_base(&items)?;
        index.build_all_labels();
        Ok(index)
    }

    pub(crate) fn empty(config: IndexConfig, dim: usize) -> Self {
        let bloom_params = BloomParams::for_capacity(1, config.bloom_fp_rate);
        Self {
            config,
            dim,
            nodes: Vec::new(),
            key_map: HashMap::new(),
            labels: LabelRegistry::default(),
            bloom_params,
            rebuild_queue: Vec::new(),
            distance_evals: AtomicU64::new(0),
            generation: 0,
            warnings: Vec::new(),
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn tree_config(&self) -> &TreeConfig {
        &self.config.tree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.key_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_map.is_empty()
    }

    pub fn bloom_params(&self) -> BloomParams {
        self.bloom_params
    }

    pub fn membership(&self) -> Membership {
        self.config.membership
    }

    /// Switch how node membership is answered; blooms stay maintained.
    pub fn set_membership(&mut self, m: Membership) {
        self.config.membership = m;
        self.generation += 1;
    }

    pub fn root(&self) -> NodeRef<'_> {
        self.node(0)
    }

    pub fn node(&self, handle: usize) -> NodeRef<'_> {
        NodeRef {
            index: self,
            idx: handle,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// All nodes in pre-order (equivalently ascending `NodeId`).
    pub fn nodes(&self) -> impl Iterator<Item = NodeRef<'_>> {
        (0..self.nodes.len()).map(move |i| self.node(i))
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeRef<'_>> {
        self.nodes().filter(|n| n.is_leaf())
    }

    pub fn find_node(&self, id: NodeId) -> Option<NodeRef<'_>> {
        let mut cur = 0;
        for b in id.path(&self.config.tree) {
            cur = *self.nodes[cur].children.get(b as usize)?;
        }
        (self.nodes[cur].id == id).then(|| self.node(cur))
    }

    pub fn id_of(&self, key: u64) -> Option<VectorId> {
        self.key_map.get(&key).copied()
    }

    pub fn key_of(&self, id: VectorId) -> Option<u64> {
        let (leaf, slot) = self.locate(id)?;
        let s = &self.nodes[leaf].leaf.as_ref()?.slots[slot];
        s.live.then_some(s.key)
    }

    pub fn vector(&self, id: VectorId) -> Option<&[f32]> {
        let (leaf, slot) = self.locate(id)?;
        let l = self.nodes[leaf].leaf.as_ref()?;
        l.slots[slot]
            .live
            .then(|| &l.vectors[slot * self.dim..(slot + 1) * self.dim])
    }

    /// Labels stored on a live vector.
    pub fn labels_of(&self, key: u64) -> Option<&[Label]> {
        let (leaf, slot) = self.locate(self.id_of(key)?)?;
        Some(&self.nodes[leaf].leaf.as_ref()?.slots[slot].labels)
    }

    pub fn key_map(&self) -> &HashMap<u64, VectorId> {
        &self.key_map
    }

    /// Live labels with their vector counts `|P_l|`.
    pub fn label_counts(&self) -> &BTreeMap<Label, usize> {
        &self.labels.counts
    }

    pub fn label_count(&self, label: Label) -> usize {
        self.labels.counts.get(&label).copied().unwrap_or(0)
    }

    /// Distance evaluations performed by queries and maintenance since
    /// construction (k-means training during builds is not counted).
    pub fn distance_evals(&self) -> u64 {
        self.distance_evals.load(Ordering::Relaxed)
    }

    pub(crate) fn add_distance_evals(&self, n: u64) {
        self.distance_evals.fetch_add(n, Ordering::Relaxed);
    }

    /// Bumped on every mutation; used to invalidate cached temporary indexes.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Warnings recorded while building (e.g. oversized leaves at max depth).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Snapshot of live vectors and their labels, ordered by vector id.
    pub fn live_dataset(&self) -> (Dataset, LabelAssignment) {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        let mut keys = Vec::with_capacity(self.len());
        let mut sets = Vec::with_capacity(self.len());
        for n in &self.nodes {
            let Some(leaf) = &n.leaf else { continue };
            for (i, s) in leaf.slots.iter().enumerate() {
                if s.live {
                    data.extend_from_slice(&leaf.vectors[i * self.dim..(i + 1) * self.dim]);
                    keys.push(s.key);
                    sets.push(s.labels.clone());
                }
            }
        }
        let ds = Dataset::with_keys(self.dim, data, keys).expect("live keys are unique");
        (ds, LabelAssignment::new(sets))
    }
}

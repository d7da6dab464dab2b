//! Single-label k-NN search: a label-aware beam descent seeds the frontier,
//! then best-first exploration ordered by `S(n, q) = ‖μ_n − q‖ − α·r_n`
//! folds buffers into a bounded result set until one leaves it unchanged.
//!
//! The engine runs over any [`SearchSpace`], so the embedded per-label trees
//! and the temporary predicate trees share one implementation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id::{NodeId, VectorId};
use crate::index::{l2_sq, Index};
use crate::oracle::GroundTruth;
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub k: usize,
    /// Result-set size; `usize::MAX` means unbounded.
    pub ef: usize,
    pub beam_width: usize,
    pub alpha: f32,
    /// Record the beam levels and pop order in [`SearchResult::trace`].
    pub trace: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            k: 10,
            ef: 64,
            beam_width: 4,
            alpha: 1.0,
            trace: false,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.ef < self.k {
            return Err(Error::InvalidConfig(format!("ef {} < k {}", self.ef, self.k)));
        }
        if self.beam_width == 0 {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("alpha must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub key: u64,
    pub id: VectorId,
    /// Euclidean distance to the query.
    pub distance: f32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SearchStats {
    pub centroid_distances: u64,
    pub vector_distances: u64,
    pub buffers_visited: u64,
    pub nodes_popped: u64,
}

impl SearchStats {
    pub fn total_distances(&self) -> u64 {
        self.centroid_distances + self.vector_distances
    }

    pub fn add(&mut self, o: &SearchStats) {
        self.centroid_distances += o.centroid_distances;
        self.vector_distances += o.vector_distances;
        self.buffers_visited += o.buffers_visited;
        self.nodes_popped += o.nodes_popped;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchTrace {
    /// Beam members kept at each level, best first, with their scores.
    pub levels: Vec<Vec<(NodeId, f32)>>,
    /// Frontier handed to the best-first phase.
    pub frontier: Vec<NodeId>,
    /// Nodes in the order they were popped.
    pub popped: Vec<NodeId>,
    /// Nodes whose buffers were folded into the result set, in order.
    pub buffers: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchResult {
    /// Ascending by distance, then by raw id.
    pub hits: Vec<Hit>,
    pub stats: SearchStats,
    pub trace: Option<SearchTrace>,
}

impl SearchResult {
    pub fn keys(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.key).collect()
    }
}

/// A tree that Algorithm-1 style search can walk.
pub trait SearchSpace {
    fn root(&self) -> Option<usize>;
    fn node_id(&self, n: usize) -> NodeId;
    fn centroid(&self, n: usize) -> &[f32];
    fn mean_radius(&self, n: usize) -> f32;
    fn children(&self, n: usize) -> &[usize];
    /// Whether `n` may lie inside the searched tree (false positives allowed).
    fn member(&self, n: usize) -> bool;
    /// Ids stored at `n` if it is a leaf of the searched tree.
    fn buffer(&self, n: usize) -> Option<&[u64]>;
}

/// One label's tree as seen through the base index.
pub struct LabelView<'a> {
    pub index: &'a Index,
    pub label: Label,
}

impl SearchSpace for LabelView<'_> {
    fn root(&self) -> Option<usize> {
        (!self.index.nodes.is_empty()).then_some(0)
    }
    fn node_id(&self, n: usize) -> NodeId {
        self.index.nodes[n].id
    }
    fn centroid(&self, n: usize) -> &[f32] {
        &self.index.nodes[n].centroid
    }
    fn mean_radius(&self, n: usize) -> f32 {
        self.index.nodes[n].mean_radius
    }
    fn children(&self, n: usize) -> &[usize] {
        &self.index.nodes[n].children
    }
    fn member(&self, n: usize) -> bool {
        self.index.bloom_query(n, self.label)
    }
    fn buffer(&self, n: usize) -> Option<&[u64]> {
        self.index.nodes[n].buffers.get(&self.label).map(Vec::as_slice)
    }
}

/// `S(n, q) = ‖μ_n − q‖ − α · mean_radius(n)`.
pub fn score(centroid: &[f32], mean_radius: f32, q: &[f32], alpha: f32) -> f32 {
    l2_sq(centroid, q).sqrt() - alpha * mean_radius
}

#[derive(Debug, Clone, Copy)]
struct Cand {
    score: f32,
    id: NodeId,
    node: usize,
}

impl PartialEq for Cand {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.score.total_cmp(&o.score).then(self.id.cmp(&o.id))
    }
}

/// Result-set entry ordered by `(distance², raw id)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Found {
    d2: f32,
    id: u64,
}
impl Eq for Found {}
impl PartialOrd for Found {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Found {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d2.total_cmp(&o.d2).then(self.id.cmp(&o.id))
    }
}

struct Run<'s, S: ?Sized> {
    space: &'s S,
    q: &'s [f32],
    alpha: f32,
    stats: SearchStats,
}

impl<S: SearchSpace + ?Sized> Run<'_, S> {
    fn cand(&mut self, n: usize) -> Cand {
        self.stats.centroid_distances += 1;
        Cand {
            score: score(self.space.centroid(n), self.space.mean_radius(n), self.q, self.alpha),
            id: self.space.node_id(n),
            node: n,
        }
    }
}

/// Beam descent from the root. Buffer-holding nodes join the frontier as
/// they are reached; at every level the member children of the remaining
/// beam nodes are scored and the best `b` form the next level. Candidates
/// that miss the cut also join the frontier, so best-first search can still
/// reach every part of the tree.
fn beam_init<S: SearchSpace + ?Sized>(run: &mut Run<'_, S>, b: usize, trace: &mut Option<SearchTrace>) -> Vec<Cand> {
    let mut frontier = Vec::new();
    let Some(root) = run.space.root() else {
        return frontier;
    };
    if !run.space.member(root) {
        return frontier;
    }
    let mut level = vec![run.cand(root)];
    if let Some(t) = trace {
        t.levels.push(vec![(level[0].id, level[0].score)]);
    }
    loop {
        let mut pool = Vec::new();
        for c in &level {
            if run.space.buffer(c.node).is_some() {
                frontier.push(*c);
                continue;
            }
            for &ch in run.space.children(c.node) {
                if run.space.member(ch) {
                    pool.push(run.cand(ch));
                }
            }
        }
        if pool.is_empty() {
            break;
        }
        pool.sort_unstable();
        let rest = pool.split_off(b.min(pool.len()));
        frontier.extend(rest);
        if let Some(t) = trace {
            t.levels.push(pool.iter().map(|c| (c.id, c.score)).collect());
        }
        level = pool;
    }
    if let Some(t) = trace {
        t.frontier = frontier.iter().map(|c| c.id).collect();
    }
    frontier
}

/// Run the two-phase search over `space` and return the top-k raw ids with
/// squared distances. `vector` resolves a raw id to its stored vector.
pub(crate) fn search_space<'v, S, F>(
    space: &S,
    q: &[f32],
    params: &SearchParams,
    vector: F,
) -> (Vec<(u64, f32)>, SearchStats, Option<SearchTrace>)
where
    S: SearchSpace + ?Sized,
    F: Fn(u64) -> &'v [f32],
{
    let mut trace = params.trace.then(SearchTrace::default);
    let mut run = Run {
        space,
        q,
        alpha: params.alpha,
        stats: SearchStats::default(),
    };
    let frontier = beam_init(&mut run, params.beam_width, &mut trace);
    let mut queue: BinaryHeap<std::cmp::Reverse<Cand>> = frontier.into_iter().map(std::cmp::Reverse).collect();
    let mut result: BinaryHeap<Found> = BinaryHeap::new();
    while let Some(std::cmp::Reverse(c)) = queue.pop() {
        run.stats.nodes_popped += 1;
        if let Some(t) = &mut trace {
            t.popped.push(c.id);
        }
        if let Some(buf) = space.buffer(c.node) {
            run.stats.buffers_visited += 1;
            if let Some(t) = &mut trace {
                t.buffers.push(c.id);
            }
            let mut changed = false;
            for &id in buf {
                let d2 = l2_sq(q, vector(id));
                run.stats.vector_distances += 1;
                let f = Found { d2, id };
                if result.len() < params.ef {
                    result.push(f);
                    changed = true;
                } else if result.peek().is_some_and(|w| f < *w) {
                    result.pop();
                    result.push(f);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            continue;
        }
        for &ch in space.children(c.node) {
            if space.member(ch) {
                let cand = run.cand(ch);
                queue.push(std::cmp::Reverse(cand));
            }
        }
    }
    let mut found = result.into_sorted_vec();
    found.truncate(params.k);
    (found.into_iter().map(|f| (f.id, f.d2)).collect(), run.stats, trace)
}

impl Index {
    /// k nearest neighbours of `q` among vectors carrying `label`.
    pub fn search_label(&self, q: &[f32], label: Label, params: &SearchParams) -> Result<SearchResult> {
        params.validate()?;
        self.check_query(q)?;
        if self.label_count(label) == 0 {
            return Ok(SearchResult {
                trace: params.trace.then(SearchTrace::default),
                ..Default::default()
            });
        }
        let view = LabelView { index: self, label };
        let (found, stats, trace) = search_space(&view, q, params, |id| self.vector_unchecked(id));
        Ok(self.finish(found, stats, trace))
    }

    pub(crate) fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(
        &self,
        found: Vec<(u64, f32)>,
        stats: SearchStats,
        trace: Option<SearchTrace>,
    ) -> SearchResult {
        self.add_distance_evals(stats.total_distances());
        let hits = found
            .into_iter()
            .map(|(id, d2)| Hit {
                key: self.key_of(VectorId(id)).expect("buffered id is live"),
                id: VectorId(id),
                distance: d2.sqrt(),
            })
            .collect();
        SearchResult { hits, stats, trace }
    }
}

/// `|R ∩ R*| / min(k, |R*|)` over the first `k` retrieved keys. The truth
/// list includes every vector tied with its k-th distance, so any of them
/// counts as a match. An empty truth list scores 1.0.
pub fn recall_at_k(retrieved: &[u64], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("recall@k needs k >= 1".into()));
    }
    let denom = k.min(truth.hits.len());
    if denom == 0 {
        return Ok(1.0);
    }
    let truth_keys: std::collections::HashSet<u64> = truth.hits.iter().map(|h| h.0).collect();
    let hit = retrieved.iter().take(k).filter(|k| truth_keys.contains(k)).count();
    Ok((hit.min(denom)) as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, LabelAssignment};
    use crate::id::TreeConfig;
    use crate::index::{IndexConfig, Membership};

    #[test]
    fn score_reductions() {
        let c = [3.0, 4.0];
        assert_eq!(score(&c, 2.0, &[0.0, 0.0], 0.0), 5.0);
        assert_eq!(score(&c, 2.0, &c, 1.0), -2.0);
    }

    #[test]
    fn params_validation() {
        assert!(SearchParams::default().validate().is_ok());
        assert!(SearchParams {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SearchParams {
            ef: 5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SearchParams {
            beam_width: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SearchParams {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn recall_formula() {
        let truth = GroundTruth {
            hits: (0..10).map(|i| (i, i as f32)).collect(),
        };
        let all: Vec<u64> = (0..10).collect();
        assert_eq!(recall_at_k(&all, &truth, 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[20, 21], &truth, 10).unwrap(), 0.0);
        let nine: Vec<u64> = (0..9).chain([99]).collect();
        assert!((recall_at_k(&nine, &truth, 10).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(recall_at_k(&[], &GroundTruth::default(), 10).unwrap(), 1.0);
        assert!(recall_at_k(&all, &truth, 0).is_err());
    }

    fn small_index(membership: Membership) -> (Dataset, LabelAssignment, Index) {
        let n = 400;
        let data: Vec<f32> = (0..n)
            .flat_map(|i| {
                let x = (i as f32 * 0.37).sin() * 10.0;
                let y = (i as f32 * 0.11).cos() * 10.0;
                [x, y]
            })
            .collect();
        let ds = Dataset::new(2, data).unwrap();
        let sets = (0..n).map(|i| if i % 3 == 0 { vec![1] } else { vec![2] }).collect();
        let la = LabelAssignment::new(sets);
        let cfg = IndexConfig {
            tree: TreeConfig::new(4, 8),
            buffer_capacity: 8,
            membership,
            ..Default::default()
        };
        let idx = Index::build(&ds, &la, cfg).unwrap();
        (ds, la, idx)
    }

    #[test]
    fn unknown_label_is_empty() {
        let (_, _, idx) = small_index(Membership::Bloom);
        let r = idx.search_label(&[0.0, 0.0], 77, &SearchParams::default()).unwrap();
        assert!(r.hits.is_empty());
        assert_eq!(r.stats, SearchStats::default());
    }

    #[test]
    fn unbounded_ef_is_exact() {
        let (ds, la, idx) = small_index(Membership::Exact);
        let params = SearchParams {
            ef: usize::MAX,
            ..Default::default()
        };
        for q in [[0.0, 0.0], [5.0, -3.0], [-9.0, 9.0]] {
            let r = idx.search_label(&q, 1, &params).unwrap();
            let mut exact: Vec<(f32, u64)> = (0..ds.len())
                .filter(|&i| la.has(i, 1))
                .map(|i| (l2_sq(&q, ds.row(i)), i as u64))
                .collect();
            exact.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<f32> = exact.iter().take(10).map(|e| e.0.sqrt()).collect();
            let got: Vec<f32> = r.hits.iter().map(|h| h.distance).collect();
            assert_eq!(got, want);
            assert!(r.hits.iter().all(|h| la.has(h.key as usize, 1)));
        }
    }

    #[test]
    fn trace_levels_respect_beam_width() {
        let (_, _, idx) = small_index(Membership::Bloom);
        let params = SearchParams {
            beam_width: 2,
            trace: true,
            ..Default::default()
        };
        let r = idx.search_label(&[1.0, 1.0], 2, &params).unwrap();
        let t = r.trace.unwrap();
        assert!(t.levels.iter().all(|l| l.len() <= 2));
        assert!(!t.frontier.is_empty());
    }
}

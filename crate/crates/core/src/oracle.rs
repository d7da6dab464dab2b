//! Exact filtered k-NN by brute force over raw label sets (pre-filtering).
//!
//! Comparisons use squared distances and break ties by external key;
//! reported distances are Euclidean. The result keeps every qualifier tied
//! with the k-th distance.

use std::collections::BinaryHeap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::{Dataset, LabelAssignment};
use crate::error::{Error, Result};
use crate::index::l2_sq;
use crate::predicate::Predicate;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// `(external key, distance)`, ascending by `(distance, key)`.
    pub hits: Vec<(u64, f32)>,
}

/// Result of one oracle query together with its cost.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleResult {
    pub truth: GroundTruth,
    /// `|P_σ|`, which is also the number of distances a pre-filter scan needs.
    pub qualified: usize,
}

impl GroundTruth {
    pub fn keys(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.0).collect()
    }
}

fn qualifiers<'a>(ds: &'a Dataset, la: &'a LabelAssignment, p: &'a Predicate) -> impl Iterator<Item = usize> + 'a {
    (0..ds.len()).filter(move |&i| p.matches(la.get(i)))
}

/// Heap-based scan: bounded max-heap for the top k, then a second pass for
/// ties at the k-th distance.
pub fn exact_filtered_knn(ds: &Dataset, la: &LabelAssignment, q: &[f32], p: &Predicate, k: usize) -> OracleResult {
    let mut heap: BinaryHeap<(OrdF32, u64)> = BinaryHeap::with_capacity(k + 1);
    let mut qualified = 0;
    for i in qualifiers(ds, la, p) {
        qualified += 1;
        let e = (OrdF32(l2_sq(q, ds.row(i))), ds.key(i));
        if heap.len() < k {
            heap.push(e);
        } else if heap.peek().is_some_and(|w| e < *w) {
            heap.pop();
            heap.push(e);
        }
    }
    let mut top: Vec<(OrdF32, u64)> = heap.into_sorted_vec();
    if top.len() == k && k > 0 {
        let kth = top[k - 1].0;
        let kept: std::collections::HashSet<u64> = top.iter().map(|e| e.1).collect();
        let mut ties: Vec<(OrdF32, u64)> = qualifiers(ds, la, p)
            .filter(|&i| !kept.contains(&ds.key(i)))
            .map(|i| (OrdF32(l2_sq(q, ds.row(i))), ds.key(i)))
            .filter(|e| e.0 == kth)
            .collect();
        ties.sort();
        top.extend(ties);
    }
    OracleResult {
        truth: GroundTruth {
            hits: top.into_iter().map(|(d, key)| (key, d.0.sqrt())).collect(),
        },
        qualified,
    }
}

/// Full-sort reference implementation.
pub fn exact_filtered_knn_sorted(
    ds: &Dataset,
    la: &LabelAssignment,
    q: &[f32],
    p: &Predicate,
    k: usize,
) -> OracleResult {
    let mut all: Vec<(f32, u64)> = qualifiers(ds, la, p)
        .map(|i| (l2_sq(q, ds.row(i)), ds.key(i)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let qualified = all.len();
    let mut end = k.min(all.len());
    if end > 0 {
        let kth = all[end - 1].0;
        while end < all.len() && all[end].0 == kth {
            end += 1;
        }
    }
    OracleResult {
        truth: GroundTruth {
            hits: all[..end].iter().map(|&(d, key)| (key, d.sqrt())).collect(),
        },
        qualified,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF32(f32);
impl Eq for OrdF32 {}
impl PartialOrd for OrdF32 {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for OrdF32 {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Serialize as, per query, a `u32` count followed by `(u64 key, f32 dist)`
/// pairs, little-endian.
pub fn encode_ground_truth(truths: &[GroundTruth]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in truths {
        out.extend_from_slice(&(t.hits.len() as u32).to_le_bytes());
        for &(key, d) in &t.hits {
            out.extend_from_slice(&key.to_le_bytes());
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    out
}

pub fn parse_ground_truth(bytes: &[u8]) -> Result<Vec<GroundTruth>> {
    let bad = |reason: String| Error::Malformed {
        format: "ground truth",
        reason,
    };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let head = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| bad(format!("truncated count at byte {pos}")))?;
        let n = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        pos += 4;
        let body = bytes
            .get(pos..pos + n * 12)
            .ok_or_else(|| bad(format!("query {} declares {n} entries past end of file", out.len())))?;
        let hits = body
            .chunks_exact(12)
            .map(|c| {
                (
                    u64::from_le_bytes(c[..8].try_into().unwrap()),
                    f32::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        pos += n * 12;
        out.push(GroundTruth { hits });
    }
    Ok(out)
}

pub fn save_ground_truth(truths: &[GroundTruth], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode_ground_truth(truths))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&bytes)
}

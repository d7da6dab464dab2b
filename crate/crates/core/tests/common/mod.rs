//! Test-side oracles, written independently of the library's own helpers.

#![allow(dead_code)]

use filtree::dataset::{Dataset, LabelAssignment};
use filtree::{Label, Predicate};

/// Squared distance, summed in the same order as the library so ties agree.
pub fn dist2(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s
}

/// Per-vector predicate evaluation straight from the definition.
pub fn eval_raw(p: &Predicate, labels: &[Label]) -> bool {
    match p {
        Predicate::Label(l) => labels.contains(l),
        Predicate::Or(ops) => ops.iter().any(|o| eval_raw(o, labels)),
        Predicate::And(ops) => {
            let pos = ops
                .iter()
                .filter(|o| !matches!(o, Predicate::Not(_)))
                .all(|o| eval_raw(o, labels));
            let neg = ops.iter().any(|o| match o {
                Predicate::Not(c) => eval_raw(c, labels),
                _ => false,
            });
            pos && !neg
        }
        Predicate::Not(_) => panic!("bare negation"),
    }
}

/// Exact top-k keys by full sort, extended with every qualifier tied at the
/// k-th distance.
pub fn brute_force(ds: &Dataset, la: &LabelAssignment, q: &[f32], p: &Predicate, k: usize) -> Vec<(u64, f32)> {
    let mut all: Vec<(f32, u64)> = (0..ds.len())
        .filter(|&i| eval_raw(p, la.get(i)))
        .map(|i| (dist2(q, ds.row(i)), ds.key(i)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut end = k.min(all.len());
    while end > 0 && end < all.len() && all[end].0 == all[end - 1].0 {
        end += 1;
    }
    all.truncate(end);
    all.into_iter().map(|(d, key)| (key, d)).collect()
}

/// `|R ∩ R*| / min(k, |R*|)`, 1.0 for an empty truth.
pub fn recall(retrieved: &[u64], truth: &[(u64, f32)], k: usize) -> f64 {
    let denom = k.min(truth.len());
    if denom == 0 {
        return 1.0;
    }
    let hit = retrieved
        .iter()
        .take(k)
        .filter(|r| truth.iter().any(|t| t.0 == **r))
        .count();
    hit.min(denom) as f64 / denom as f64
}

pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// R² of the least-squares line through `(x, y)`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let r = pearson(x, y);
    r * r
}

/// Random predicate over `labels` of bounded depth. Negations only appear
/// as operands of an `&` that also has a positive operand.
pub fn random_predicate<R: rand::Rng>(rng: &mut R, labels: &[Label], depth: usize) -> Predicate {
    if depth == 0 || rng.random_bool(0.3) {
        return Predicate::Label(labels[rng.random_range(0..labels.len())]);
    }
    let n = rng.random_range(2..=3);
    let mut ops: Vec<Predicate> = (0..n).map(|_| random_predicate(rng, labels, depth - 1)).collect();
    if rng.random_bool(0.5) {
        for op in ops.iter_mut().skip(1) {
            if rng.random_bool(0.4) {
                *op = Predicate::Not(Box::new(op.clone()));
            }
        }
        Predicate::And(ops)
    } else {
        Predicate::Or(ops)
    }
}

mod common;

use common::{brute_force, recall};
use filtree::dataset::{generate_queries, generate_synthetic, Dataset, LabelAssignment, SelectivitySpec};
use filtree::oracle::{exact_filtered_knn, exact_filtered_knn_sorted};
use filtree::{recall_at_k, Index, IndexConfig, Label, Membership, Predicate, SearchParams, TreeConfig};
use proptest::prelude::*;

fn fixture(n: usize, seed: u64) -> (Dataset, LabelAssignment, Index) {
    let spec = SelectivitySpec::log_spaced(6, 0.005, 0.3, 1, seed);
    let (ds, la) = generate_synthetic(n, 8, &spec).unwrap();
    let cfg = IndexConfig {
        tree: TreeConfig::new(8, 16),
        buffer_capacity: 16,
        seed,
        ..Default::default()
    };
    let idx = Index::build(&ds, &la, cfg).unwrap();
    (ds, la, idx)
}

fn params(k: usize, ef: usize) -> SearchParams {
    SearchParams {
        k,
        ef,
        ..Default::default()
    }
}

#[test]
fn exact_membership_with_unbounded_ef_is_exact() {
    let (ds, la, mut idx) = fixture(3000, 1);
    idx.set_membership(Membership::Exact);
    let qs = generate_queries(60, 8, 2).unwrap();
    for i in 0..qs.len() {
        let l = (i % 6) as Label;
        let truth = brute_force(&ds, &la, qs.row(i), &Predicate::Label(l), 10);
        let r = idx.search_label(qs.row(i), l, &params(10, usize::MAX)).unwrap();
        assert_eq!(recall(&r.keys(), &truth, 10), 1.0, "query {i} label {l}");
        for (h, t) in r.hits.iter().zip(&truth) {
            assert_eq!(h.distance, t.1.sqrt());
        }
    }
}

#[test]
fn hits_are_sorted_qualified_and_distances_exact() {
    let (ds, la, idx) = fixture(2000, 3);
    let q = generate_queries(1, 8, 9).unwrap();
    let r = idx.search_label(q.row(0), 2, &params(20, 128)).unwrap();
    assert!(!r.hits.is_empty());
    for w in r.hits.windows(2) {
        assert!(w[0].distance <= w[1].distance);
    }
    for h in &r.hits {
        let i = ds.keys().iter().position(|&k| k == h.key).unwrap();
        assert!(la.has(i, 2));
        assert_eq!(h.distance, common::dist2(q.row(0), ds.row(i)).sqrt());
    }
}

#[test]
fn library_oracle_agrees_with_sorting_oracles() {
    let (ds, la, _) = fixture(2500, 4);
    let qs = generate_queries(100, 8, 5).unwrap();
    let labels: Vec<Label> = (0..6).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(6);
    for i in 0..qs.len() {
        let p = common::random_predicate(&mut rng, &labels, 2).normalize();
        let heap = exact_filtered_knn(&ds, &la, qs.row(i), &p, 10);
        let sorted = exact_filtered_knn_sorted(&ds, &la, qs.row(i), &p, 10);
        let ours = brute_force(&ds, &la, qs.row(i), &p, 10);
        assert_eq!(heap.truth, sorted.truth);
        let ours: Vec<(u64, f32)> = ours.into_iter().map(|(k, d)| (k, d.sqrt())).collect();
        assert_eq!(heap.truth.hits, ours);
        assert_eq!(
            heap.qualified,
            (0..ds.len()).filter(|&j| common::eval_raw(&p, la.get(j))).count()
        );
    }
}

#[test]
fn recall_matches_test_oracle() {
    let (ds, la, idx) = fixture(2000, 8);
    let qs = generate_queries(20, 8, 10).unwrap();
    for i in 0..qs.len() {
        let p = Predicate::Label(5);
        let truth = exact_filtered_knn(&ds, &la, qs.row(i), &p, 10).truth;
        let r = idx.search_label(qs.row(i), 5, &params(10, 32)).unwrap();
        let ours = brute_force(&ds, &la, qs.row(i), &p, 10);
        assert_eq!(
            recall_at_k(&r.keys(), &truth, 10).unwrap(),
            recall(&r.keys(), &ours, 10)
        );
    }
}

#[test]
fn mean_radius_matches_direct_computation() {
    let (ds, _, idx) = fixture(1500, 11);
    for node in idx.nodes() {
        let rows: Vec<&[f32]> = node.live_slots().iter().map(|s| s.2).collect();
        let rows = if rows.is_empty() {
            // Internal node: gather from the leaves underneath.
            let (lo, hi) = node.range();
            idx.leaves()
                .filter(|l| {
                    let (a, b) = l.range();
                    a >= lo && b <= hi
                })
                .flat_map(|l| l.live_slots().into_iter().map(|s| s.2))
                .collect()
        } else {
            rows
        };
        let n = rows.len() as f64;
        let mut c = vec![0f64; ds.dim()];
        for r in &rows {
            for (a, &x) in c.iter_mut().zip(r.iter()) {
                *a += f64::from(x);
            }
        }
        c.iter_mut().for_each(|a| *a /= n);
        let radius: f64 = rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&c)
                    .map(|(&x, &m)| (f64::from(x) - m).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n;
        let want = radius as f32;
        assert!(
            (node.mean_radius() - want).abs() <= 1e-5 * want.max(1.0),
            "node {}: {} vs {want}",
            node.id(),
            node.mean_radius()
        );
    }
}

#[test]
fn nearest_leaf_follows_greedy_descent() {
    let (_, _, idx) = fixture(2000, 12);
    let qs = generate_queries(200, 8, 13).unwrap();
    for x in qs.rows() {
        let mut cur = idx.root();
        while !cur.is_leaf() {
            cur = cur
                .children()
                .min_by(|a, b| common::dist2(x, a.centroid()).total_cmp(&common::dist2(x, b.centroid())))
                .unwrap();
        }
        assert_eq!(idx.nearest_leaf(x).id(), cur.id());
    }
}

#[test]
fn beam_levels_keep_the_best_scored_members() {
    let (_, _, mut idx) = fixture(4000, 14);
    idx.set_membership(Membership::Exact);
    let q = generate_queries(1, 8, 15).unwrap();
    let p = SearchParams {
        trace: true,
        beam_width: 3,
        ..params(10, 64)
    };
    let label = 5;
    let r = idx.search_label(q.row(0), label, &p).unwrap();
    let trace = r.trace.unwrap();
    let score = |n: filtree::NodeRef<'_>| common::dist2(q.row(0), n.centroid()).sqrt() - n.mean_radius();
    for w in trace.levels.windows(2) {
        // Expected next level: the best `b` member children of the
        // non-buffer beam nodes.
        let mut pool = Vec::new();
        for &(id, _) in &w[0] {
            let n = idx.find_node(id).unwrap();
            if n.buffer(label).is_some() {
                continue;
            }
            for c in n.children() {
                if idx.in_label_tree(c.handle(), label) {
                    pool.push((score(c), c.id()));
                }
            }
        }
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pool.truncate(3);
        let got: Vec<_> = w[1].iter().map(|&(id, s)| (s, id)).collect();
        assert_eq!(got.len(), pool.len());
        for (g, e) in got.iter().zip(&pool) {
            assert_eq!(g.1, e.1);
            assert!((g.0 - e.0).abs() <= 1e-4);
        }
    }
}

#[test]
fn unknown_label_gives_empty_result() {
    let (_, _, idx) = fixture(500, 16);
    let r = idx.search_label(&[0.0; 8], 999, &params(10, 64)).unwrap();
    assert!(r.hits.is_empty());
    assert_eq!(r.stats.total_distances(), 0);
}

#[test]
fn wrong_dimension_is_rejected() {
    let (_, _, idx) = fixture(500, 17);
    assert!(idx.search_label(&[0.0; 3], 0, &params(10, 64)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_search_is_complete(seed in 0u64..1000, bf in 2usize..6, cap in 2usize..12, k in 1usize..15) {
        let n = 300;
        let spec = SelectivitySpec::log_spaced(3, 0.01, 0.4, 1, seed);
        let (ds, la) = generate_synthetic(n, 3, &spec).unwrap();
        let cfg = IndexConfig {
            tree: TreeConfig::new(bf, cap),
            buffer_capacity: cap,
            membership: Membership::Exact,
            seed,
            ..Default::default()
        };
        let idx = Index::build(&ds, &la, cfg).unwrap();
        let qs = generate_queries(5, 3, seed + 1).unwrap();
        for i in 0..qs.len() {
            for l in 0..3 {
                let truth = brute_force(&ds, &la, qs.row(i), &Predicate::Label(l), k);
                let r = idx.search_label(qs.row(i), l, &params(k, usize::MAX)).unwrap();
                prop_assert_eq!(recall(&r.keys(), &truth, k), 1.0);
            }
        }
    }
}

mod common;

use common::{brute_force, recall};
use filtree::dataset::{generate_queries, generate_synthetic, Dataset, LabelAssignment, SelectivitySpec};
use filtree::{Index, IndexConfig, Label, Membership, Predicate, RebuildMode, SearchParams, TreeConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 6;
const LABELS: usize = 8;

fn config(cap: usize, seed: u64) -> IndexConfig {
    IndexConfig {
        tree: TreeConfig::new(4, cap),
        buffer_capacity: cap,
        rebuild_threshold: 0.5,
        seed,
        ..Default::default()
    }
}

fn data(n: usize, seed: u64) -> (Dataset, LabelAssignment) {
    // Rarest label keeps at least one member for n >= 50.
    let lo = (0.005f64).max(1.0 / n as f64);
    let spec = SelectivitySpec::log_spaced(LABELS, lo, 0.3, 1, seed);
    generate_synthetic(n, DIM, &spec).unwrap()
}

/// Per-node label placement: buffers with their ids and interior labels.
fn placement(idx: &Index) -> Vec<String> {
    idx.nodes()
        .map(|n| {
            let bufs: Vec<_> = n.buffers().collect();
            let interior: Vec<Label> = n.label_set().into_iter().filter(|&l| n.is_interior_of(l)).collect();
            format!("{} {bufs:?} {interior:?}", n.id())
        })
        .collect()
}

/// Random mixed vector and label operations.
fn churn(idx: &mut Index, ops: usize, rng: &mut ChaCha8Rng, next_key: &mut u64) {
    let mut live: Vec<u64> = idx.key_map().keys().copied().collect();
    live.sort_unstable();
    for _ in 0..ops {
        match rng.random_range(0..4) {
            0 => {
                let x: Vec<f32> = (0..DIM).map(|_| rng.random_range(-4.0..4.0)).collect();
                let ls: Vec<Label> = (0..LABELS as Label).filter(|_| rng.random_bool(0.2)).collect();
                idx.insert_vector_with_labels(*next_key, &x, &ls).unwrap();
                live.push(*next_key);
                *next_key += 1;
            }
            1 if live.len() > 1 => {
                let k = live.swap_remove(rng.random_range(0..live.len()));
                idx.delete_vector(k).unwrap();
            }
            2 => {
                let k = live[rng.random_range(0..live.len())];
                let l = rng.random_range(0..LABELS) as Label;
                if !idx.labels_of(k).unwrap().contains(&l) {
                    idx.insert_label(k, l).unwrap();
                }
            }
            _ => {
                let k = live[rng.random_range(0..live.len())];
                if let Some(&l) = idx.labels_of(k).unwrap().first() {
                    idx.delete_label(k, l).unwrap();
                }
            }
        }
    }
}

fn mean_recall(idx: &Index, qs: &Dataset, ef: usize) -> f64 {
    let (ds, la) = idx.live_dataset();
    let params = SearchParams {
        k: 10,
        ef,
        ..Default::default()
    };
    let mut total = 0.0;
    for i in 0..qs.len() {
        let l = (i % LABELS) as Label;
        let truth = brute_force(&ds, &la, qs.row(i), &Predicate::Label(l), 10);
        total += recall(&idx.search_label(qs.row(i), l, &params).unwrap().keys(), &truth, 10);
    }
    total / qs.len() as f64
}

#[test]
fn global_rebuild_matches_a_fresh_build() {
    let (ds, la) = data(4000, 1);
    let mut idx = Index::build(&ds, &la, config(16, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut next = 1 << 40;
    churn(&mut idx, 3000, &mut rng, &mut next);
    idx.check_invariants().unwrap();
    idx.rebuild_global().unwrap();
    idx.check_invariants().unwrap();
    let (live, live_labels) = idx.live_dataset();
    let fresh = Index::build(&live, &live_labels, config(16, 1)).unwrap();
    let qs = generate_queries(200, DIM, 3).unwrap();
    let a = mean_recall(&idx, &qs, 64);
    let b = mean_recall(&fresh, &qs, 64);
    assert!((a - b).abs() <= 0.02, "rebuilt {a:.3} vs fresh {b:.3}");
}

#[test]
fn local_rebuilds_keep_exact_search_exact() {
    let (ds, la) = data(3000, 4);
    let mut idx = Index::build(&ds, &la, config(16, 4)).unwrap();
    idx.set_membership(Membership::Exact);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut next = 1 << 40;
    churn(&mut idx, 2500, &mut rng, &mut next);
    assert!(!idx.rebuild_queue().is_empty(), "workload should queue rebuilds");
    let done = idx.run_rebuilds(RebuildMode::Local, 6).unwrap();
    assert!(!done.is_empty());
    assert!(idx.rebuild_queue().is_empty());
    idx.check_invariants().unwrap();
    let qs = generate_queries(40, DIM, 7).unwrap();
    assert_eq!(mean_recall(&idx, &qs, usize::MAX), 1.0);
}

#[test]
fn label_ops_and_deletes_compute_no_distances() {
    let (ds, la) = data(2000, 8);
    let mut idx = Index::build(&ds, &la, config(16, 8)).unwrap();
    let before = idx.distance_evals();
    let keys: Vec<u64> = (0..200).collect();
    for &k in &keys {
        idx.insert_label(k, 100).unwrap();
    }
    for &k in &keys[..150] {
        idx.delete_label(k, 100).unwrap();
    }
    for &k in &keys[150..] {
        idx.delete_vector(k).unwrap();
    }
    assert_eq!(idx.distance_evals(), before);
    assert_eq!(idx.label_count(100), 0);
    idx.check_invariants().unwrap();
}

#[test]
fn update_errors() {
    let (ds, la) = data(300, 9);
    let mut idx = Index::build(&ds, &la, config(16, 9)).unwrap();
    assert!(idx.insert_vector(0, &[0.0; DIM]).is_err(), "duplicate key");
    assert!(idx.insert_vector(99_999, &[0.0; 2]).is_err(), "wrong dimension");
    assert!(idx.delete_vector(99_999).is_err());
    assert!(idx.delete_label(0, 77).is_err());
    let l = idx.labels_of(0).unwrap().first().copied();
    if let Some(l) = l {
        assert!(idx.insert_label(0, l).is_err(), "label already present");
    }
}

#[test]
fn snapshot_round_trip_after_updates() {
    let (ds, la) = data(1500, 10);
    let mut idx = Index::build(&ds, &la, config(16, 10)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut next = 1 << 40;
    churn(&mut idx, 800, &mut rng, &mut next);
    idx.integrate_as_virtual_label(&Predicate::parse("1 | 2").unwrap())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    idx.save(&path).unwrap();
    let back = Index::load(&path).unwrap();
    assert_eq!(back.to_snapshot_bytes(), idx.to_snapshot_bytes());
    assert_eq!(placement(&back), placement(&idx));
    assert_eq!(back.rebuild_queue(), idx.rebuild_queue());

    let mut bytes = idx.to_snapshot_bytes();
    bytes.push(0);
    assert!(Index::from_snapshot_bytes(&bytes).is_err());
    let mut bytes = idx.to_snapshot_bytes();
    bytes[0] = b'X';
    assert!(Index::from_snapshot_bytes(&bytes).is_err());
    let bytes = idx.to_snapshot_bytes();
    assert!(Index::from_snapshot_bytes(&bytes[..bytes.len() / 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn incremental_labels_match_batch_placement(seed in 0u64..10_000, cap in 2usize..20, n in 50usize..400) {
        let (ds, la) = data(n, seed);
        let mut idx = Index::build(&ds, &LabelAssignment::empty(n), config(cap, seed)).unwrap();
        let mut pairs: Vec<(u64, Label)> = (0..n).flat_map(|i| la.get(i).iter().map(move |&l| (i as u64, l))).collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for &(k, l) in &pairs {
            idx.insert_label(k, l).unwrap();
        }
        // Remove a random tail so merges are exercised as well.
        for &(k, l) in &pairs[pairs.len() / 2..] {
            idx.delete_label(k, l).unwrap();
        }
        let mut batch = idx.clone();
        batch.build_all_labels();
        prop_assert_eq!(placement(&idx), placement(&batch));
        prop_assert!(idx.check_invariants().is_ok());
    }

    #[test]
    fn invariants_survive_random_churn(seed in 0u64..10_000, ops in 1usize..400) {
        let (ds, la) = data(300, seed);
        let mut idx = Index::build(&ds, &la, config(8, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = 1 << 40;
        churn(&mut idx, ops, &mut rng, &mut next);
        if let Err(v) = idx.check_invariants() {
            prop_assert!(false, "{}", v);
        }
        idx.run_rebuilds(RebuildMode::Local, seed).unwrap();
        if let Err(v) = idx.check_invariants() {
            prop_assert!(false, "after local rebuilds: {}", v);
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use filtree::dataset::{self, Dataset, LabelAssignment, VectorFormat};
use filtree::labels::is_virtual;
use filtree::oracle::{self, GroundTruth};
use filtree::{Index, Label, Predicate, PredicateCache, RebuildMode, SearchParams, SearchStats, TempIndex, VectorId};
use rand::Rng;
use tracing::info;

use crate::config::RunConfig;
use crate::output::Outputs;
use crate::{DataArgs, FilterArgs};

fn load_data(args: &DataArgs) -> anyhow::Result<(Dataset, LabelAssignment)> {
    let format = match args.format {
        Some(f) => f,
        None => VectorFormat::from_path(&args.data)
            .with_context(|| format!("cannot tell the format of {}; pass --format", args.data.display()))?,
    };
    let ds = dataset::load_vectors(&args.data, format, args.raw_dim)?;
    let la = dataset::load_labels(&args.labels, ds.len())?;
    Ok((ds, la))
}

fn load_queries(path: &Path) -> anyhow::Result<Dataset> {
    let format = VectorFormat::from_path(path).unwrap_or(VectorFormat::Fvecs);
    Ok(dataset::load_vectors(path, format, None)?)
}

fn read_u64s(path: &Path) -> anyhow::Result<Vec<u64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        bytes.len() % 8 == 0,
        "{} is not a whole number of u64 values",
        path.display()
    );
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Filter for each query.
enum Filters {
    PerQuery(Vec<Predicate>),
    /// A sorted id list shared by all queries, with a display name.
    Ids(Vec<u64>, String),
}

impl Filters {
    fn name(&self, i: usize) -> String {
        match self {
            Filters::PerQuery(p) => p[i].to_string(),
            Filters::Ids(_, name) => name.clone(),
        }
    }
}

fn read_filters(f: &FilterArgs, n_queries: usize, index: Option<&Index>) -> anyhow::Result<Filters> {
    if let Some(path) = &f.predicates {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ps = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, l)| Predicate::parse(l).with_context(|| format!("{} predicate {}", path.display(), i + 1)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        ensure!(
            ps.len() == n_queries,
            "{} has {} predicates for {n_queries} queries",
            path.display(),
            ps.len()
        );
        return Ok(Filters::PerQuery(ps));
    }
    if let Some(p) = &f.predicate {
        return Ok(Filters::PerQuery(vec![Predicate::parse(p)?; n_queries]));
    }
    if let Some(l) = f.label {
        return Ok(Filters::PerQuery(vec![Predicate::Label(l); n_queries]));
    }
    let Some(index) = index else {
        bail!("id and key lists need an index; use --predicate, --label or --predicates");
    };
    if let Some(path) = &f.id_list {
        return Ok(Filters::Ids(read_u64s(path)?, format!("ids:{}", path.display())));
    }
    if let Some(path) = &f.key_list {
        let mut ids = read_u64s(path)?
            .into_iter()
            .map(|k| {
                index
                    .id_of(k)
                    .map(|v| v.0)
                    .with_context(|| format!("key {k} is not in the index"))
            })
            .collect::<anyhow::Result<Vec<u64>>>()?;
        ids.sort_unstable();
        ids.dedup();
        return Ok(Filters::Ids(ids, format!("keys:{}", path.display())));
    }
    bail!("no filter given")
}

struct Outcome {
    keys: Vec<u64>,
    latency_us: f64,
    stats: SearchStats,
}

fn run_queries(
    index: &Index,
    queries: &Dataset,
    filters: &Filters,
    params: &SearchParams,
    readers: usize,
    cache_capacity: usize,
) -> anyhow::Result<Vec<Outcome>> {
    let shared: Option<TempIndex> = match filters {
        Filters::Ids(ids, _) => {
            if let Some(&bad) = ids.iter().find(|&&id| index.key_of(VectorId(id)).is_none()) {
                bail!("id {bad:#x} is not a live vector");
            }
            Some(index.build_temp_index(ids.clone())?)
        }
        Filters::PerQuery(_) => None,
    };
    let run_range = |lo: usize, hi: usize| -> anyhow::Result<Vec<Outcome>> {
        let mut cache = PredicateCache::new(cache_capacity);
        let mut out = Vec::with_capacity(hi - lo);
        for i in lo..hi {
            let q = queries.row(i);
            let start = Instant::now();
            let r = match (&shared, filters) {
                (Some(t), _) => index.search_temp(t, q, params)?,
                (None, Filters::PerQuery(ps)) => match &ps[i] {
                    Predicate::Label(l) => index.search_label(q, *l, params)?,
                    p => {
                        let t = cache.get_or_build(index, p)?;
                        index.search_temp(&t, q, params)?
                    }
                },
                (None, Filters::Ids(..)) => unreachable!(),
            };
            out.push(Outcome {
                keys: r.keys(),
                latency_us: start.elapsed().as_secs_f64() * 1e6,
                stats: r.stats,
            });
        }
        Ok(out)
    };
    let n = queries.len();
    if readers <= 1 || n < 2 {
        return run_range(0, n);
    }
    let chunk = n.div_ceil(readers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                let run_range = &run_range;
                s.spawn(move || run_range(lo, (lo + chunk).min(n)))
            })
            .collect();
        let mut all = Vec::with_capacity(n);
        for h in handles {
            all.extend(h.join().expect("reader thread panicked")?);
        }
        Ok(all)
    })
}

fn load_index(path: &Path) -> anyhow::Result<Index> {
    Index::load(path).with_context(|| format!("loading index {}", path.display()))
}

fn check_dims(index: &Index, queries: &Dataset) -> anyhow::Result<()> {
    ensure!(
        index.dim() == queries.dim(),
        "queries have dimension {} but the index has {}",
        queries.dim(),
        index.dim()
    );
    Ok(())
}

pub fn gen(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let w = &cfg.workload;
    let spec = w.selectivity(cfg.seed);
    let (ds, la) = dataset::generate_synthetic(w.n, w.dim, &spec)?;
    let queries = dataset::generate_queries(w.queries, w.dim, cfg.seed.wrapping_add(1))?;
    let preds: Vec<String> = if w.predicates.is_empty() {
        (0..w.queries)
            .map(|i| {
                let level = i * w.levels / w.queries.max(1);
                spec.label_id(level, i % w.labels_per_level.max(1)).to_string()
            })
            .collect()
    } else {
        let parsed = w
            .predicates
            .iter()
            .map(|p| Predicate::parse(p).map(|p| p.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        (0..w.queries).map(|i| parsed[i % parsed.len()].clone()).collect()
    };
    let mut out = Outputs::default();
    out.with_sidecar(&dir.join("base.fvecs"), "gen", cfg, |p| {
        Ok(dataset::save_vectors(&ds, p, VectorFormat::Fvecs)?)
    })?;
    out.with_sidecar(&dir.join("base.labels"), "gen", cfg, |p| {
        Ok(dataset::save_labels(&la, p)?)
    })?;
    out.with_sidecar(&dir.join("queries.fvecs"), "gen", cfg, |p| {
        Ok(dataset::save_vectors(&queries, p, VectorFormat::Fvecs)?)
    })?;
    out.with_sidecar(&dir.join("queries.predicates"), "gen", cfg, |p| {
        let mut text = preds.join("\n");
        text.push('\n');
        Ok(fs::write(p, text)?)
    })?;
    out.commit()?;
    println!(
        "generated {} vectors (dim {}) with {} labels and {} queries in {}",
        ds.len(),
        ds.dim(),
        la.distinct().len(),
        queries.len(),
        dir.display()
    );
    Ok(())
}

pub fn build(cfg: &RunConfig, data: &DataArgs, path: &Path) -> anyhow::Result<()> {
    let (ds, la) = load_data(data)?;
    let start = Instant::now();
    let index = Index::build(&ds, &la, cfg.index.clone())?;
    let secs = start.elapsed().as_secs_f64();
    for w in index.warnings() {
        eprintln!("warning: {w}");
    }
    let mut out = Outputs::default();
    out.with_sidecar(path, "build", cfg, |p| Ok(index.save(p)?))?;
    out.commit()?;
    println!(
        "built index over {} vectors: {} nodes, {} leaves, {} labels in {secs:.2}s",
        index.len(),
        index.node_count(),
        index.leaves().count(),
        index.label_counts().len()
    );
    Ok(())
}

pub fn gt(cfg: &RunConfig, data: &DataArgs, queries: &Path, filter: &FilterArgs, path: &Path) -> anyhow::Result<()> {
    let (ds, la) = load_data(data)?;
    let qs = load_queries(queries)?;
    ensure!(
        qs.dim() == ds.dim(),
        "queries have dimension {} but data has {}",
        qs.dim(),
        ds.dim()
    );
    let Filters::PerQuery(preds) = read_filters(filter, qs.len(), None)? else {
        unreachable!("without an index only predicates are read")
    };
    let mut truths = Vec::with_capacity(qs.len());
    let mut qualified = 0usize;
    for (i, p) in preds.iter().enumerate() {
        let r = oracle::exact_filtered_knn(&ds, &la, qs.row(i), p, cfg.search.k);
        qualified += r.qualified;
        truths.push(r.truth);
    }
    let mut out = Outputs::default();
    out.with_sidecar(path, "gt", cfg, |p| Ok(oracle::save_ground_truth(&truths, p)?))?;
    out.commit()?;
    println!(
        "ground truth for {} queries at k={}; mean {:.1} qualifying vectors",
        qs.len(),
        cfg.search.k,
        qualified as f64 / qs.len().max(1) as f64
    );
    Ok(())
}

fn load_gt(path: &Path, n: usize) -> anyhow::Result<Vec<GroundTruth>> {
    let gt = oracle::load_ground_truth(path)?;
    ensure!(
        gt.len() == n,
        "{} holds {} queries, expected {n}",
        path.display(),
        gt.len()
    );
    Ok(gt)
}

pub fn query(
    cfg: &RunConfig,
    index_path: &Path,
    queries: &Path,
    filter: &FilterArgs,
    gt: Option<&Path>,
    path: &Path,
) -> anyhow::Result<()> {
    let mut index = load_index(index_path)?;
    // Membership mode is a query-time choice.
    index.set_membership(cfg.index.membership);
    let qs = load_queries(queries)?;
    check_dims(&index, &qs)?;
    let filters = read_filters(filter, qs.len(), Some(&index))?;
    let truth = gt.map(|p| load_gt(p, qs.len())).transpose()?;
    let ef = cfg.search.ef[0];
    let params = cfg.search.params(ef);
    let results = run_queries(&index, &qs, &filters, &params, cfg.readers, cfg.cache_capacity)?;

    let mut out = Outputs::default();
    let mut w = out.csv(path, "query", cfg)?;
    w.write_record([
        "query",
        "predicate",
        "ef",
        "recall",
        "latency_us",
        "centroid_distances",
        "vector_distances",
        "buffers_visited",
        "keys",
    ])?;
    let mut recall_sum = 0.0;
    for (i, r) in results.iter().enumerate() {
        let recall = match &truth {
            Some(t) => {
                let v = filtree::recall_at_k(&r.keys, &t[i], cfg.search.k)?;
                recall_sum += v;
                format!("{v:.6}")
            }
            None => String::new(),
        };
        let keys: Vec<String> = r.keys.iter().map(u64::to_string).collect();
        w.write_record([
            i.to_string(),
            filters.name(i),
            ef.to_string(),
            recall,
            format!("{:.1}", r.latency_us),
            r.stats.centroid_distances.to_string(),
            r.stats.vector_distances.to_string(),
            r.stats.buffers_visited.to_string(),
            keys.join(" "),
        ])?;
    }
    w.flush()?;
    drop(w);
    out.commit()?;
    let n = results.len().max(1) as f64;
    let mean_us = results.iter().map(|r| r.latency_us).sum::<f64>() / n;
    match truth {
        Some(_) => println!(
            "{} queries at ef={ef}: mean recall@{} {:.4}, mean latency {mean_us:.1}us",
            results.len(),
            cfg.search.k,
            recall_sum / n
        ),
        None => println!("{} queries at ef={ef}: mean latency {mean_us:.1}us", results.len()),
    }
    Ok(())
}

fn p99(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let rank = ((xs.len() as f64) * 0.99).ceil() as usize;
    xs[rank.clamp(1, xs.len()) - 1]
}

pub fn sweep(
    cfg: &RunConfig,
    index_path: &Path,
    queries: &Path,
    filter: &FilterArgs,
    gt: &Path,
    path: &Path,
) -> anyhow::Result<()> {
    let mut index = load_index(index_path)?;
    // Membership mode is a query-time choice.
    index.set_membership(cfg.index.membership);
    let qs = load_queries(queries)?;
    check_dims(&index, &qs)?;
    let filters = read_filters(filter, qs.len(), Some(&index))?;
    let truth = load_gt(gt, qs.len())?;

    // Queries grouped by filter, groups ordered by selectivity.
    let mut groups: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for i in 0..qs.len() {
        let name = filters.name(i);
        if !groups.contains_key(&name) {
            let qualified = match &filters {
                Filters::PerQuery(ps) => match &ps[i] {
                    Predicate::Label(l) => index.label_count(*l),
                    p => index.eval_predicate(p).len(),
                },
                Filters::Ids(ids, _) => ids.len(),
            };
            groups.insert(name.clone(), (qualified, Vec::new()));
        }
        groups.get_mut(&name).unwrap().1.push(i);
    }
    let mut order: Vec<(&String, &(usize, Vec<usize>))> = groups.iter().collect();
    order.sort_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.0.cmp(b.0)));

    let mut out = Outputs::default();
    let mut w = out.csv(path, "sweep", cfg)?;
    w.write_record([
        "predicate",
        "selectivity",
        "qualified",
        "ef",
        "queries",
        "recall",
        "mean_latency_us",
        "p99_latency_us",
        "centroid_distances",
        "vector_distances",
        "buffers_visited",
    ])?;
    let n_index = index.len().max(1) as f64;
    let mut rows = Vec::new();
    for &ef in &cfg.search.ef {
        let params = cfg.search.params(ef);
        let results = run_queries(&index, &qs, &filters, &params, cfg.readers, cfg.cache_capacity)?;
        info!(%ef, "swept {} queries", results.len());
        for (name, (qualified, members)) in &order {
            let m = members.len() as f64;
            let mut recall = 0.0;
            let mut lat = Vec::with_capacity(members.len());
            let (mut cd, mut vd, mut bv) = (0u64, 0u64, 0u64);
            for &i in members {
                let r = &results[i];
                recall += filtree::recall_at_k(&r.keys, &truth[i], cfg.search.k)?;
                lat.push(r.latency_us);
                cd += r.stats.centroid_distances;
                vd += r.stats.vector_distances;
                bv += r.stats.buffers_visited;
            }
            let mean_lat = lat.iter().sum::<f64>() / m;
            rows.push((ef, *qualified, name.to_string(), recall / m));
            w.write_record([
                name.to_string(),
                format!("{:.6}", *qualified as f64 / n_index),
                qualified.to_string(),
                ef.to_string(),
                members.len().to_string(),
                format!("{:.6}", recall / m),
                format!("{mean_lat:.1}"),
                format!("{:.1}", p99(&mut lat)),
                format!("{:.3}", cd as f64 / m),
                format!("{:.3}", vd as f64 / m),
                format!("{:.3}", bv as f64 / m),
            ])?;
        }
    }
    w.flush()?;
    drop(w);
    out.commit()?;
    println!(
        "{} rows ({} filters x {} ef values) written to {}",
        rows.len(),
        order.len(),
        cfg.search.ef.len(),
        path.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Op {
    InsertVector,
    DeleteVector,
    InsertLabel,
    DeleteLabel,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::InsertVector => "insert_vector",
            Op::DeleteVector => "delete_vector",
            Op::InsertLabel => "insert_label",
            Op::DeleteLabel => "delete_label",
        }
    }
}

pub fn update_bench(
    cfg: &RunConfig,
    index_path: &Path,
    path: &Path,
    save: Option<&Path>,
    check: bool,
) -> anyhow::Result<()> {
    let mut index = load_index(index_path)?;
    let mut rng = filtree::rng::stream(cfg.seed, "update-bench", 0);
    let mut live: Vec<u64> = index.key_map().keys().copied().collect();
    live.sort_unstable();
    ensure!(!live.is_empty(), "index is empty");
    let labels: Vec<Label> = index
        .label_counts()
        .keys()
        .copied()
        .filter(|&l| !is_virtual(l))
        .collect();
    let mut next_key = live.last().copied().unwrap_or(0) + 1;

    let mut out = Outputs::default();
    let mut w = out.csv(path, "update-bench", cfg)?;
    w.write_record(["seq", "op", "key", "label", "latency_us", "distance_computations"])?;
    let mut per_op: BTreeMap<Op, Vec<f64>> = BTreeMap::new();
    for seq in 0..cfg.workload.update_ops {
        let mut op = [Op::InsertVector, Op::DeleteVector, Op::InsertLabel, Op::DeleteLabel][rng.random_range(0..4)];
        let key = live[rng.random_range(0..live.len())];
        let own: Vec<Label> = index
            .labels_of(key)
            .unwrap()
            .iter()
            .copied()
            .filter(|&l| !is_virtual(l))
            .collect();
        let candidate = (!labels.is_empty()).then(|| labels[rng.random_range(0..labels.len())]);
        // Fall back to an insert when the drawn op has nothing to act on.
        if op == Op::DeleteVector && live.len() < 2 {
            op = Op::InsertVector;
        }
        if op == Op::DeleteLabel && own.is_empty() {
            op = Op::InsertLabel;
        }
        if op == Op::InsertLabel && candidate.is_none_or(|l| own.contains(&l)) {
            op = Op::InsertVector;
        }
        let x: Vec<f32> = if op == Op::InsertVector {
            let base = index.vector(index.id_of(key).unwrap()).unwrap();
            base.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()
        } else {
            Vec::new()
        };
        let before = index.distance_evals();
        let start = Instant::now();
        let (k, l) = match op {
            Op::InsertVector => {
                index.insert_vector(next_key, &x)?;
                live.push(next_key);
                next_key += 1;
                (next_key - 1, None)
            }
            Op::DeleteVector => {
                index.delete_vector(key)?;
                let at = live
                    .binary_search(&key)
                    .unwrap_or_else(|_| live.iter().position(|&k| k == key).unwrap());
                live.remove(at);
                (key, None)
            }
            Op::InsertLabel => {
                let l = candidate.unwrap();
                index.insert_label(key, l)?;
                (key, Some(l))
            }
            Op::DeleteLabel => {
                let l = own[rng.random_range(0..own.len())];
                index.delete_label(key, l)?;
                (key, Some(l))
            }
        };
        let us = start.elapsed().as_secs_f64() * 1e6;
        per_op.entry(op).or_default().push(us);
        w.write_record([
            seq.to_string(),
            op.name().to_string(),
            k.to_string(),
            l.map(|l| l.to_string()).unwrap_or_default(),
            format!("{us:.2}"),
            (index.distance_evals() - before).to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    if check {
        index.check_invariants().map_err(|v| anyhow::anyhow!("{v}"))?;
    }
    if let Some(p) = save {
        out.with_sidecar(p, "update-bench", cfg, |p| Ok(index.save(p)?))?;
    }
    out.commit()?;
    for (op, lat) in &per_op {
        let mean = lat.iter().sum::<f64>() / lat.len() as f64;
        println!("{:<14} {:>6} ops  mean {mean:>8.2}us", op.name(), lat.len());
    }
    println!("{} subtrees queued for rebuild", index.rebuild_queue().len());
    Ok(())
}

pub fn integrate(cfg: &RunConfig, index_path: &Path, predicate: &str, path: &Path) -> anyhow::Result<()> {
    let mut index = load_index(index_path)?;
    let p = Predicate::parse(predicate)?;
    let v = index.integrate_as_virtual_label(&p)?;
    let mut out = Outputs::default();
    out.with_sidecar(path, "integrate", cfg, |p| Ok(index.save(p)?))?;
    out.commit()?;
    println!("virtual label {v} = {p} ({} vectors)", index.label_count(v));
    Ok(())
}

pub fn rebuild(cfg: &RunConfig, index_path: &Path, mode: RebuildMode, path: &Path) -> anyhow::Result<()> {
    let mut index = load_index(index_path)?;
    let queued = index.rebuild_queue().len();
    let start = Instant::now();
    let rebuilt = match mode {
        RebuildMode::Local => index.run_rebuilds(RebuildMode::Local, cfg.seed)?.len(),
        RebuildMode::Global => {
            index.rebuild_global()?;
            1
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let mut out = Outputs::default();
    out.with_sidecar(path, "rebuild", cfg, |p| Ok(index.save(p)?))?;
    out.commit()?;
    println!(
        "{queued} queued, {rebuilt} subtrees rebuilt in {secs:.2}s; {} nodes",
        index.node_count()
    );
    Ok(())
}

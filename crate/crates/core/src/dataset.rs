//! Vector datasets, label assignments, file formats and synthetic generation.
//!
//! Supported vector formats (all little-endian):
//! - `fvecs`: per record a `u32` dimension followed by `dim` `f32` values.
//! - `bvecs`: per record a `u32` dimension followed by `dim` `u8` values.
//! - `raw-f32-le`: a headerless stream of `f32`; the dimension is supplied
//!   by the caller (usually from a sidecar or a flag).
//!
//! Label files are UTF-8 text with one line per vector, holding
//! whitespace-separated non-negative integers.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, Label};

/// Dense `f32` vectors with one external key per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    data: Vec<f32>,
    keys: Vec<u64>,
}

impl Dataset {
    /// Row-major `data` of `data.len() / dim` vectors with keys `0..n`.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        let n = data.len() / dim;
        Ok(Self {
            dim,
            data,
            keys: (0..n as u64).collect(),
        })
    }

    pub fn with_keys(dim: usize, data: Vec<f32>, keys: Vec<u64>) -> Result<Self> {
        let mut ds = Self::new(dim, data)?;
        if keys.len() != ds.len() {
            return Err(Error::InvalidConfig(format!(
                "{} keys for {} vectors",
                keys.len(),
                ds.len()
            )));
        }
        let mut seen = HashSet::with_capacity(keys.len());
        for &k in &keys {
            if !seen.insert(k) {
                return Err(Error::DuplicateKey(k));
            }
        }
        ds.keys = keys;
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn key(&self, i: usize) -> u64 {
        self.keys[i]
    }
}

/// Per-vector label sets, each sorted ascending without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelAssignment {
    sets: Vec<Vec<Label>>,
}

impl LabelAssignment {
    /// Normalizes every set (sort + dedup).
    pub fn new(mut sets: Vec<Vec<Label>>) -> Self {
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        Self { sets }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            sets: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, i: usize) -> &[Label] {
        &self.sets[i]
    }

    pub fn sets(&self) -> &[Vec<Label>] {
        &self.sets
    }

    pub fn has(&self, i: usize, label: Label) -> bool {
        self.sets[i].binary_search(&label).is_ok()
    }

    /// Indices of vectors carrying `label`, ascending.
    pub fn members(&self, label: Label) -> Vec<usize> {
        (0..self.sets.len()).filter(|&i| self.has(i, label)).collect()
    }

    /// All distinct labels, ascending.
    pub fn distinct(&self) -> Vec<Label> {
        let mut all: Vec<Label> = self.sets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorFormat {
    Fvecs,
    Bvecs,
    RawF32Le,
}

impl FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvecs" => Ok(Self::Fvecs),
            "bvecs" => Ok(Self::Bvecs),
            "raw-f32-le" | "raw" => Ok(Self::RawF32Le),
            other => Err(Error::InvalidConfig(format!("unknown vector format {other:?}"))),
        }
    }
}

impl VectorFormat {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(Self::Fvecs),
            "bvecs" => Some(Self::Bvecs),
            "f32" | "raw" | "bin" => Some(Self::RawF32Le),
            _ => None,
        }
    }
}

/// Parse vectors from an in-memory buffer. `raw_dim` is required for
/// [`VectorFormat::RawF32Le`] and ignored otherwise.
pub fn parse_vectors(bytes: &[u8], format: VectorFormat, raw_dim: Option<usize>) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Empty("vector file".into()));
    }
    match format {
        VectorFormat::RawF32Le => {
            let dim = raw_dim.ok_or_else(|| Error::InvalidConfig("raw-f32-le requires a dimension".into()))?;
            if dim == 0 {
                return Err(Error::InvalidConfig("dimension must be positive".into()));
            }
            if !bytes.len().is_multiple_of(4 * dim) {
                return Err(Error::Malformed {
                    format: "raw-f32-le",
                    reason: format!("{} bytes is not a multiple of 4*{dim}", bytes.len()),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Dataset::new(dim, data)
        }
        VectorFormat::Fvecs | VectorFormat::Bvecs => {
            let (name, width) = match format {
                VectorFormat::Fvecs => ("fvecs", 4),
                _ => ("bvecs", 1),
            };
            let mut pos = 0;
            let mut dim = None;
            let mut data = Vec::new();
            while pos < bytes.len() {
                let Some(head) = bytes.get(pos..pos + 4) else {
                    return Err(Error::Malformed {
                        format: name,
                        reason: format!("truncated header at byte {pos}"),
                    });
                };
                let d = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
                if d == 0 {
                    return Err(Error::Malformed {
                        format: name,
                        reason: format!("zero dimension at byte {pos}"),
                    });
                }
                match dim {
                    None => dim = Some(d),
                    Some(prev) if prev != d => return Err(Error::DimensionMismatch { expected: prev, got: d }),
                    _ => {}
                }
                pos += 4;
                let end = pos + d * width;
                let Some(body) = bytes.get(pos..end) else {
                    return Err(Error::Malformed {
                        format: name,
                        reason: format!("record declares dim {d} but only {} bytes remain", bytes.len() - pos),
                    });
                };
                if width == 4 {
                    data.extend(
                        body.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                    );
                } else {
                    data.extend(body.iter().map(|&b| f32::from(b)));
                }
                pos = end;
            }
            Dataset::new(dim.unwrap_or(1), data)
        }
    }
}

pub fn load_vectors(path: &Path, format: VectorFormat, raw_dim: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(&bytes, format, raw_dim)
}

/// Serialize vectors. `bvecs` requires every coordinate to be an integer in `0..=255`.
pub fn encode_vectors(ds: &Dataset, format: VectorFormat) -> Result<Vec<u8>> {
    let dim = ds.dim();
    let mut out = Vec::with_capacity(ds.data().len() * 4 + ds.len() * 4);
    match format {
        VectorFormat::RawF32Le => {
            for v in ds.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        VectorFormat::Fvecs => {
            for row in ds.rows() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        VectorFormat::Bvecs => {
            for (i, row) in ds.rows().enumerate() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
                for &v in row {
                    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                        return Err(Error::Malformed {
                            format: "bvecs",
                            reason: format!("vector {i} has non-byte coordinate {v}"),
                        });
                    }
                    out.push(v as u8);
                }
            }
        }
    }
    Ok(out)
}

pub fn save_vectors(ds: &Dataset, path: &Path, format: VectorFormat) -> Result<()> {
    let bytes = encode_vectors(ds, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_labels(text: &str, n_vectors: usize) -> Result<LabelAssignment> {
    // A trailing newline terminates the last line rather than opening a new one.
    let body = text.strip_suffix('\n').unwrap_or(text);
    let lines: Vec<&str> = if text.is_empty() {
        Vec::new()
    } else {
        body.split('\n').collect()
    };
    if lines.len() != n_vectors {
        return Err(Error::LabelCountMismatch {
            expected: n_vectors,
            got: lines.len(),
        });
    }
    let mut sets = Vec::with_capacity(lines.len());
    for (lineno, line) in lines.iter().enumerate() {
        let mut set = Vec::new();
        for tok in line.split_whitespace() {
            let l: Label = tok.parse().map_err(|_| Error::Malformed {
                format: "labels",
                reason: format!("line {}: bad token {tok:?}", lineno + 1),
            })?;
            set.push(l);
        }
        sets.push(set);
    }
    Ok(LabelAssignment::new(sets))
}

pub fn load_labels(path: &Path, n_vectors: usize) -> Result<LabelAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, n_vectors)
}

pub fn format_labels(la: &LabelAssignment) -> String {
    let mut out = String::new();
    for set in la.sets() {
        let line: Vec<String> = set.iter().map(|l| l.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_labels(la: &LabelAssignment, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_labels(la).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Selectivity levels for synthetic label generation. Each level `s`
/// receives `labels_per_level` labels, each carried by `round(s * n)` vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivitySpec {
    pub levels: Vec<f64>,
    pub labels_per_level: usize,
    pub seed: u64,
    /// Plant one Gaussian center per label and draw its members around it.
    #[serde(default)]
    pub correlated: bool,
}

impl SelectivitySpec {
    /// `count` levels spaced evenly in log scale over `[lo, hi]`.
    pub fn log_spaced(count: usize, lo: f64, hi: f64, labels_per_level: usize, seed: u64) -> Self {
        let levels = if count == 1 {
            vec![lo]
        } else {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        };
        Self {
            levels,
            labels_per_level,
            seed,
            correlated: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.labels_per_level == 0 {
            return Err(Error::InvalidConfig("labels_per_level must be positive".into()));
        }
        for &s in &self.levels {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::InvalidConfig(format!("selectivity {s} outside (0,1]")));
            }
            if population(s, n) == 0 {
                return Err(Error::InvalidConfig(format!(
                    "selectivity {s} with n={n} yields no vectors"
                )));
            }
        }
        Ok(())
    }

    /// Label id of the `j`-th label at level `i`.
    pub fn label_id(&self, level: usize, j: usize) -> Label {
        (level * self.labels_per_level + j) as Label
    }
}

/// Number of vectors carrying a label of selectivity `s`.
pub fn population(s: f64, n: usize) -> usize {
    (s * n as f64).round() as usize
}

/// Synthetic dataset with planted label populations. Vectors are i.i.d.
/// standard normal unless `spec.correlated` is set.
pub fn generate_synthetic(n: usize, dim: usize, spec: &SelectivitySpec) -> Result<(Dataset, LabelAssignment)> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidConfig("n and dim must be positive".into()));
    }
    spec.validate(n)?;
    let mut data = Vec::with_capacity(n * dim);
    let mut vrng = rng::stream(spec.seed, "synthetic/vectors", 0);
    for _ in 0..n * dim {
        let z: f64 = StandardNormal.sample(&mut vrng);
        data.push(z as f32);
    }
    let mut sets: Vec<Vec<Label>> = vec![Vec::new(); n];
    let mut crng = rng::stream(spec.seed, "synthetic/centers", 0);
    for (li, &s) in spec.levels.iter().enumerate() {
        let pop = population(s, n);
        for j in 0..spec.labels_per_level {
            let label = spec.label_id(li, j);
            let mut lrng = rng::stream(spec.seed, "synthetic/labels", u64::from(label));
            let members = sample(&mut lrng, n, pop).into_vec();
            if spec.correlated {
                let center: Vec<f32> = (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut crng);
                        (z * 3.0) as f32
                    })
                    .collect();
                for &m in &members {
                    // Members already claimed by an earlier label keep their position.
                    if !sets[m].is_empty() {
                        continue;
                    }
                    for (d, c) in center.iter().enumerate() {
                        let z: f64 = StandardNormal.sample(&mut crng);
                        data[m * dim + d] = c + (z * 0.5) as f32;
                    }
                }
            }
            for m in members {
                sets[m].push(label);
            }
        }
    }
    Ok((Dataset::new(dim, data)?, LabelAssignment::new(sets)))
}

/// Standard-normal query vectors.
pub fn generate_queries(count: usize, dim: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, "synthetic/queries", 0);
    let data = (0..count * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            z as f32
        })
        .collect();
    Dataset::new(dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fvecs(records: &[&[f32]]) -> Vec<u8> {
        let mut out = Vec::new();
        for r in records {
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            for v in *r {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn fvecs_two_records() {
        let bytes = fvecs(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let ds = parse_vectors(&bytes, VectorFormat::Fvecs, None).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        assert_eq!(ds.row(1), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(ds.keys(), &[0, 1]);
    }

    #[test]
    fn raw_dim_three() {
        let bytes = vec![0u8; 24];
        let ds = parse_vectors(&bytes, VectorFormat::RawF32Le, Some(3)).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn short_fvecs_record_is_rejected() {
        let mut bytes = 4u32.to_le_bytes().to_vec();
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            parse_vectors(&bytes, VectorFormat::Fvecs, None),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn inconsistent_dim_and_empty() {
        let bytes = fvecs(&[&[1.0, 2.0], &[1.0, 2.0, 3.0]]);
        assert!(matches!(
            parse_vectors(&bytes, VectorFormat::Fvecs, None),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            parse_vectors(&[], VectorFormat::Fvecs, None),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn labels_sorted_and_deduplicated() {
        let la = parse_labels("3 1 1\n\n7\n", 3).unwrap();
        assert_eq!(la.sets(), &[vec![1, 3], vec![], vec![7]]);
        let la = parse_labels("2 2 2", 1).unwrap();
        assert_eq!(la.get(0), &[2]);
    }

    #[test]
    fn label_line_count_and_token_errors() {
        assert!(matches!(
            parse_labels("1\n2\n", 3),
            Err(Error::LabelCountMismatch { expected: 3, got: 2 })
        ));
        assert!(matches!(parse_labels("1 x\n", 1), Err(Error::Malformed { .. })));
        assert!(matches!(parse_labels("-1\n", 1), Err(Error::Malformed { .. })));
    }

    #[test]
    fn synthetic_populations_exact() {
        let spec = SelectivitySpec {
            levels: vec![0.01],
            labels_per_level: 10,
            seed: 3,
            correlated: false,
        };
        let (ds, la) = generate_synthetic(1000, 8, &spec).unwrap();
        assert_eq!(ds.len(), 1000);
        for j in 0..10 {
            assert_eq!(la.members(spec.label_id(0, j)).len(), 10);
        }
        let again = generate_synthetic(1000, 8, &spec).unwrap();
        assert_eq!(ds.data(), again.0.data());
        assert_eq!(la, again.1);
    }

    #[test]
    fn log_spaced_populations() {
        let spec = SelectivitySpec::log_spaced(20, 0.001, 0.2, 1, 0);
        assert_eq!(spec.levels.len(), 20);
        let pops: Vec<usize> = spec.levels.iter().map(|&s| population(s, 100_000)).collect();
        assert_eq!(pops[0], 100);
        assert_eq!(pops[19], 20_000);
        assert!(pops.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_population_level_is_rejected() {
        let spec = SelectivitySpec {
            levels: vec![0.0001],
            labels_per_level: 1,
            seed: 0,
            correlated: false,
        };
        assert!(generate_synthetic(1000, 4, &spec).is_err());
    }

    #[test]
    fn correlated_mode_keeps_populations() {
        let mut spec = SelectivitySpec::log_spaced(3, 0.01, 0.1, 2, 9);
        spec.correlated = true;
        let (_, la) = generate_synthetic(2000, 4, &spec).unwrap();
        for (i, &s) in spec.levels.iter().enumerate() {
            for j in 0..2 {
                assert_eq!(la.members(spec.label_id(i, j)).len(), population(s, 2000));
            }
        }
    }
}

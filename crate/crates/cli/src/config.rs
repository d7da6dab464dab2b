//! Run configuration: file (TOML or JSON) first, command-line flags on top.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::Args;
use filtree::dataset::SelectivitySpec;
use filtree::{IndexConfig, Membership, SearchParams};
use serde::{Deserialize, Serialize};

/// Result-set size; `max` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "EfRepr", into = "EfRepr")]
pub struct Ef(pub usize);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EfRepr {
    Num(usize),
    Text(String),
}

impl TryFrom<EfRepr> for Ef {
    type Error = String;

    fn try_from(r: EfRepr) -> Result<Self, String> {
        match r {
            EfRepr::Num(n) => Ok(Ef(n)),
            EfRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Ef> for EfRepr {
    fn from(e: Ef) -> Self {
        if e.0 == usize::MAX {
            EfRepr::Text("max".into())
        } else {
            EfRepr::Num(e.0)
        }
    }
}

impl FromStr for Ef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "max" | "inf" => Ok(Ef(usize::MAX)),
            t => t
                .parse()
                .map(Ef)
                .map_err(|_| format!("ef must be a number or \"max\", got {t:?}")),
        }
    }
}

impl fmt::Display for Ef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == usize::MAX {
            f.write_str("max")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
    /// Swept by `sweep`; `query` uses the first entry.
    pub ef: Vec<Ef>,
    pub beam_width: usize,
    pub alpha: f32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 10,
            ef: [64, 128, 256, 512, 1024].into_iter().map(Ef).collect(),
            beam_width: 4,
            alpha: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn params(&self, ef: Ef) -> SearchParams {
        SearchParams {
            k: self.k,
            ef: ef.0,
            beam_width: self.beam_width,
            alpha: self.alpha,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub n: usize,
    pub dim: usize,
    pub queries: usize,
    /// Number of log-spaced selectivity levels in `[sel_lo, sel_hi]`.
    pub levels: usize,
    pub sel_lo: f64,
    pub sel_hi: f64,
    pub labels_per_level: usize,
    pub correlated: bool,
    /// Query predicates assigned round-robin by `gen`; empty means one
    /// label per level.
    pub predicates: Vec<String>,
    /// Operations issued by `update-bench`, split evenly over the four kinds.
    pub update_ops: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            n: 20_000,
            dim: 16,
            queries: 2000,
            levels: 20,
            sel_lo: 0.001,
            sel_hi: 0.2,
            labels_per_level: 1,
            correlated: false,
            predicates: Vec::new(),
            update_ops: 10_000,
        }
    }
}

impl Workload {
    pub fn selectivity(&self, seed: u64) -> SelectivitySpec {
        let mut s = SelectivitySpec::log_spaced(self.levels, self.sel_lo, self.sel_hi, self.labels_per_level, seed);
        s.correlated = self.correlated;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub index: IndexConfig,
    pub search: SearchConfig,
    pub workload: Workload,
    /// Concurrent searcher threads for `query` and `sweep`.
    pub readers: usize,
    /// Temporary-index cache entries for predicate queries; 0 disables it.
    pub cache_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            index: IndexConfig::default(),
            search: SearchConfig::default(),
            workload: Workload::default(),
            readers: 1,
            cache_capacity: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("config {} must end in .toml or .json", path.display()),
        };
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.index.validate()?;
        if self.search.ef.is_empty() {
            bail!("search.ef must list at least one value");
        }
        for &ef in &self.search.ef {
            self.search.params(ef).validate()?;
        }
        if self.readers == 0 {
            bail!("readers must be at least 1");
        }
        Ok(())
    }
}

/// Flags shared by every subcommand. Any flag given overrides the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Config file (.toml or .json).
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Neighbours per query.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Comma-separated result-set sizes; "max" is unbounded.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ef: Option<Vec<Ef>>,
    #[arg(long, global = true)]
    pub beam_width: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f32>,
    #[arg(long, global = true)]
    pub branch_factor: Option<usize>,
    #[arg(long, global = true)]
    pub leaf_capacity: Option<usize>,
    /// Per-label buffer capacity.
    #[arg(long, global = true)]
    pub buffer_capacity: Option<usize>,
    #[arg(long, global = true)]
    pub bloom_fp_rate: Option<f64>,
    /// bloom or exact.
    #[arg(long, global = true)]
    pub membership: Option<String>,
    /// Update ratio that queues a subtree rebuild.
    #[arg(long, global = true)]
    pub rebuild_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub readers: Option<usize>,
    #[arg(long, global = true)]
    pub cache_capacity: Option<usize>,
    /// Synthetic dataset size for `gen`.
    #[arg(long, global = true)]
    pub num_vectors: Option<usize>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub num_queries: Option<usize>,
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    #[arg(long, global = true)]
    pub update_ops: Option<usize>,
}

impl ConfigFlags {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($dst:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($dst)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(k => search.k);
        set!(ef => search.ef);
        set!(beam_width => search.beam_width);
        set!(alpha => search.alpha);
        set!(leaf_capacity => index.tree.leaf_capacity);
        set!(buffer_capacity => index.buffer_capacity);
        set!(bloom_fp_rate => index.bloom_fp_rate);
        set!(rebuild_threshold => index.rebuild_threshold);
        set!(readers => readers);
        set!(cache_capacity => cache_capacity);
        set!(num_vectors => workload.n);
        set!(dim => workload.dim);
        set!(num_queries => workload.queries);
        set!(levels => workload.levels);
        set!(update_ops => workload.update_ops);
        if let Some(bf) = self.branch_factor {
            // Keep the derived depth budget consistent with the new fanout.
            let t = filtree::TreeConfig::new(bf, c.index.tree.leaf_capacity);
            c.index.tree.branch_factor = bf;
            c.index.tree.max_depth = c.index.tree.max_depth.min(t.max_depth);
        }
        if let Some(m) = &self.membership {
            c.index.membership = match m.as_str() {
                "bloom" => Membership::Bloom,
                "exact" => Membership::Exact,
                other => bail!("membership must be bloom or exact, got {other:?}"),
            };
        }
        c.index.seed = c.seed;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ef_text_forms() {
        assert_eq!("max".parse::<Ef>().unwrap(), Ef(usize::MAX));
        assert_eq!("128".parse::<Ef>().unwrap(), Ef(128));
        assert!("x".parse::<Ef>().is_err());
        assert_eq!(Ef(usize::MAX).to_string(), "max");
    }

    #[test]
    fn json_and_toml_round_trip() {
        let mut c = RunConfig::default();
        c.search.ef = vec![Ef(32), Ef(usize::MAX)];
        let j = c.to_json();
        assert_eq!(serde_json::from_str::<RunConfig>(&j).unwrap(), c);
        let t = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&t).unwrap(), c);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 5\n[search]\nk = 3\nef = [16]\n[index]\nbuffer_capacity = 32\n",
        )
        .unwrap();
        let flags = ConfigFlags {
            config: Some(p),
            k: Some(7),
            ..Default::default()
        };
        let c = flags.resolve().unwrap();
        assert_eq!(
            (c.seed, c.search.k, c.search.ef.clone(), c.index.buffer_capacity),
            (5, 7, vec![Ef(16)], 32)
        );
        assert_eq!(c.index.seed, 5);
    }

    #[test]
    fn partial_tree_table_derives_the_rest() {
        let c: RunConfig = toml::from_str("[index.tree]\nbranch_factor = 4\n").unwrap();
        assert_eq!(c.index.tree, filtree::TreeConfig::new(4, 64));
        let c: RunConfig = toml::from_str("[index.tree]\nslot_bits = 16\n").unwrap();
        assert_eq!((c.index.tree.slot_bits, c.index.tree.max_depth), (16, 12));
        assert!(toml::from_str::<RunConfig>("[index.tree]\nfanout = 4\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}

//! Output files are written to `<path>.partial` and renamed into place only
//! when the whole command succeeds. Dropping an uncommitted [`Outputs`]
//! removes whatever was staged.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;

pub const VERSION: &str = env!("FILTREE_VERSION");

#[derive(Default)]
pub struct Outputs {
    staged: Vec<(PathBuf, PathBuf)>,
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'a str,
    command: &'a str,
    config: &'a RunConfig,
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Outputs {
    /// Reserve `path`; returns where to write in the meantime.
    pub fn stage(&mut self, path: &Path) -> anyhow::Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let tmp = partial(path);
        self.staged.push((tmp.clone(), path.to_path_buf()));
        Ok(tmp)
    }

    /// Stage a binary or plain-text file written by `write`, plus a
    /// `.meta.json` sidecar carrying the version and resolved config.
    pub fn with_sidecar(
        &mut self,
        path: &Path,
        command: &str,
        cfg: &RunConfig,
        write: impl FnOnce(&Path) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let tmp = self.stage(path)?;
        write(&tmp)?;
        let meta = serde_json::to_string_pretty(&Meta {
            version: VERSION,
            command,
            config: cfg,
        })?;
        let side = self.stage(&meta_path(path))?;
        fs::write(&side, meta).with_context(|| format!("writing {}", side.display()))?;
        Ok(())
    }

    /// CSV with `#` comment lines for the version and the resolved config.
    pub fn csv(&mut self, path: &Path, command: &str, cfg: &RunConfig) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
        let tmp = self.stage(path)?;
        let f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "# filtree {VERSION} {command}")?;
        writeln!(w, "# config: {}", cfg.to_json())?;
        Ok(csv::Writer::from_writer(w))
    }

    pub fn commit(mut self) -> anyhow::Result<()> {
        let staged = std::mem::take(&mut self.staged);
        for (i, (tmp, dst)) in staged.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, dst) {
                for (_, done) in &staged[..i] {
                    let _ = fs::remove_file(done);
                }
                for (t, _) in &staged[i..] {
                    let _ = fs::remove_file(t);
                }
                return Err(e).with_context(|| format!("moving {} into place", dst.display()));
            }
        }
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}

//! Run directories and their structured outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use vdpg_core::data::{read_dataset, Dataset};
use vdpg_core::Error;

use crate::config::RunConfig;
use crate::error::CliError;

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `out`, or the first free `runs/<command>-NNN`. An existing
    /// directory is never reused.
    pub fn create(out: Option<&Path>, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => (0..)
                .map(|i| PathBuf::from("runs").join(format!("{command}-{i:03}")))
                .find(|p| !p.exists())
                .expect("unbounded range"),
        };
        if path.exists() {
            return Err(CliError::Usage(format!(
                "run directory {} already exists; refusing to overwrite",
                path.display()
            )));
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let dir = Self { path };
        dir.write("config.toml", cfg.to_toml())?;
        info!("run directory {}", dir.path.display());
        Ok(dir)
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let p = self.join(name);
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        for r in rows {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// A dataset file, or every `<prefix>-*.vdpg` in a directory, sorted.
pub fn load_split(path: &Path, prefix: &str) -> Result<Vec<Dataset>, CliError> {
    if path.is_file() {
        return Ok(vec![read_dataset(path)?]);
    }
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with(&format!("{prefix}-")) && name.ends_with(".vdpg")
        })
        .collect();
    files.sort();
    files.iter().map(|p| read_dataset(p).map_err(CliError::from)).collect()
}

pub fn require_split(path: &Path, prefix: &str) -> Result<Vec<Dataset>, CliError> {
    let sets = load_split(path, prefix)?;
    if sets.is_empty() {
        return Err(Error::Lookup(format!("no {prefix}-*.vdpg datasets under {}", path.display())).into());
    }
    Ok(sets)
}

/// Fixed-width text table.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

//! Output directories and small CSV helpers.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;

/// Create the run directory: `out` if given, otherwise
/// `befa-<command>-<timestamp>` in the working directory.
pub fn run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = PathBuf::from(format!("befa-{command}-{stamp}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Write the resolved configuration as `run.toml`.
pub fn echo_config<T: Serialize>(dir: &Path, command: &str, cfg: &T) -> Result<()> {
    let body = toml::to_string(cfg).context("serialising run configuration")?;
    let text = format!("command = \"{command}\"\n\n{body}");
    let path = dir.join("run.toml");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Row-labelled matrix with a header of `corner` then `cols`.
pub fn write_matrix(path: &Path, corner: &str, rows: &[String], cols: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![corner.to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in rows.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn factor_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("f{i}")).collect()
}

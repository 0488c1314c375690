//! Shared training plumbing: per-step RNG, loss history, checkpoints.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shapewarp_tensor::archive::{read_archive, write_archive};
use shapewarp_tensor::{Adam, AdamConfig, ParamStore, Scalar, Tensor};

use crate::error::{io_err, Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// RNG for one training step; independent of how many steps ran before, so
/// resumed runs draw the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl History {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    format!("{}", *v as i64)
                } else {
                    format!("{v:.9e}")
                }
            }))?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Trailing moving averages with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub code_version: String,
    pub step: u64,
    pub config: Value,
    pub adam: Option<(AdamConfig, u64)>,
    pub history: History,
}

impl CheckpointMeta {
    pub fn is_untrained(&self) -> bool {
        self.step == 0
    }
}

/// Parameters plus optional optimizer state.
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam: Option<Adam<T>>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<T>,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<T>)> = store
        .named()
        .map(|(n, t)| (format!("param/{n}"), t.clone()))
        .collect();
    if let Some(a) = adam {
        for (n, (m, v)) in store.names().iter().zip(a.m.iter().zip(&a.v)) {
            tensors.push((format!("adam_m/{n}"), m.clone()));
            tensors.push((format!("adam_v/{n}"), v.clone()));
        }
    }
    let mut meta = meta.clone();
    meta.adam = adam.map(|a| (a.config, a.step));
    write_archive(path, &serde_json::to_value(&meta)?, &tensors)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path, kind: &str) -> Result<Checkpoint<T>> {
    if !path.is_file() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let (meta, tensors) = read_archive::<T>(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            meta.kind
        )));
    }
    let mut params = Vec::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix("param/") {
            params.push((n.to_string(), t));
        } else if name.starts_with("adam_m/") {
            m.push(t);
        } else if name.starts_with("adam_v/") {
            v.push(t);
        }
    }
    let adam = match meta.adam {
        Some((config, step)) if m.len() == params.len() && v.len() == params.len() => {
            Some(Adam { config, step, m, v })
        }
        _ => None,
    };
    if meta.is_untrained() {
        log::warn!("{} is an untrained {kind} checkpoint (step 0)", path.display());
    }
    Ok(Checkpoint { meta, params, adam })
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn step_rng_is_position_independent() {
        let a: u64 = step_rng(3, 10).gen();
        let b: u64 = step_rng(3, 10).gen();
        let c: u64 = step_rng(3, 11).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}

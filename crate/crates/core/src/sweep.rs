//! Macro-F1 over a grid of `(alpha, c)` noise-level settings.
//!
//! The `alpha = 0` row is trained with `lambda = 1` for every class, the
//! plain diffusion baseline, so it does not depend on `c`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetTable;
use crate::error::{Error, Result};
use crate::metrics::classification_metrics;
use crate::trainer::{fit, FitOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub cs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `f1[a][c]`: macro-F1 averaged over seeds.
    pub f1: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha");
        for c in &self.cs {
            out.push_str(&format!(",c={c:?}"));
        }
        out.push('\n');
        for (a, row) in self.alphas.iter().zip(&self.f1) {
            out.push_str(&format!("{a:?}"));
            for v in row {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Training config of one cell.
pub fn cell_config(base: &TrainConfig, alpha: f64, c: f64, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.noise.alpha = alpha;
    cfg.noise.c = c;
    cfg.seed = seed;
    if alpha == 0.0 {
        cfg.noise_level = "isotropic".into();
    }
    cfg
}

/// Trains and evaluates every `(alpha, c, seed)` on the same split. With
/// `out_dir`, each cell keeps its checkpoint and log in its own
/// subdirectory.
pub fn run_sweep(
    train: &DatasetTable,
    test: &DatasetTable,
    base: &TrainConfig,
    alphas: &[f64],
    cs: &[f64],
    seeds: &[u64],
    out_dir: Option<&std::path::Path>,
) -> Result<SweepResult> {
    if alphas.is_empty() || cs.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one alpha, c and seed".into()));
    }
    let mut f1 = Vec::with_capacity(alphas.len());
    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut row = Vec::with_capacity(cs.len());
        for (ci, &c) in cs.iter().enumerate() {
            let mut total = 0.0;
            for &seed in seeds {
                let cfg = cell_config(base, alpha, c, seed);
                let opts = FitOptions {
                    out_dir: out_dir.map(|d| -> PathBuf { d.join(format!("cell_a{ai}_c{ci}_s{seed}")) }),
                    ..FitOptions::default()
                };
                let model = fit(train, &cfg, &opts)?.model;
                let preds: Vec<usize> = model.predict(test, false)?.iter().map(|o| o.class).collect();
                let report = classification_metrics(test.labels(), &preds, test.classes())?;
                log::info!("alpha {alpha} c {c} seed {seed}: macro-F1 {:.4}", report.macro_f1);
                total += report.macro_f1;
            }
            row.push(total / seeds.len() as f64);
        }
        f1.push(row);
    }
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        cs: cs.to_vec(),
        seeds: seeds.to_vec(),
        f1,
    })
}

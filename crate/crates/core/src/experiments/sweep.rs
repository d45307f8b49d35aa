//! Grid over regularizer strength, skip ratio, metric and seed.

use crate::diffusion::ScoreNet;
use crate::error::{Error, Result};
use crate::experiments::toy2d::{eval_dsm, train_toy_diffusion, Toy2DConfig, Toy2DData};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::regularizers::{IsoConfig, MetricKind};

/// Sweeps over which the evaluation DSM is averaged.
pub const EVAL_DSM_PASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub metrics: Vec<MetricKind>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        if self.lambdas.is_empty() || self.gammas.is_empty() || self.metrics.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("every sweep grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &lambda_iso in &self.lambdas {
            for &gamma in &self.gammas {
                for &metric in &self.metrics {
                    for &seed in &self.seeds {
                        out.push(SweepCell { lambda_iso, gamma, metric, seed });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub lambda_iso: f64,
    pub gamma: f64,
    pub metric: MetricKind,
    pub seed: u64,
}

impl SweepCell {
    pub fn config(&self, base: &Toy2DConfig) -> Toy2DConfig {
        Toy2DConfig {
            seed: self.seed,
            iso: IsoConfig { lambda_iso: self.lambda_iso, gamma: self.gamma, metric: self.metric, ..base.iso.clone() },
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    /// Denoising loss on the held-out rows under the evaluation seed.
    pub dsm_final: f64,
    pub report: MetricsReport,
    pub net: ScoreNet,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub result: std::result::Result<CellResult, String>,
}

/// Trains and evaluates one cell. Evaluation uses `mcfg.seed` regardless of the cell seed.
pub fn run_cell(base: &Toy2DConfig, cell: &SweepCell, mcfg: &MetricsConfig, data: &Toy2DData) -> Result<CellResult> {
    let cfg = cell.config(base);
    let out = train_toy_diffusion(&cfg, &data.train)?;
    let sched = cfg.schedule()?;
    let dsm_final = eval_dsm(&out.net, &sched, &data.test, EVAL_DSM_PASSES, mcfg.seed)?;
    let report = evaluate(&out.net, &sched, &data.train, mcfg)?;
    Ok(CellResult { dsm_final, report, net: out.net })
}

/// Runs every cell; a failing cell is recorded and the sweep continues.
pub fn run_sweep(base: &Toy2DConfig, grid: &SweepGrid, mcfg: &MetricsConfig, data: &Toy2DData) -> Result<Vec<SweepRow>> {
    Ok(grid
        .cells()?
        .into_iter()
        .map(|cell| SweepRow { cell, result: run_cell(base, &cell, mcfg, data).map_err(|e| e.to_string()) })
        .collect())
}

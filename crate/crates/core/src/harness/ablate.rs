//! Train-then-test experiments and the ablation grid.

use std::path::Path;
use std::sync::Arc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, Variant};
use crate::harness::eval::{csv_row, evaluate, EvalShift, Metrics};
use crate::harness::train::{train, TrainReport};
use crate::icogroup::IcoGroup;

/// Reference image width of the shift sweep values below.
pub const SWEEP_REFERENCE_WIDTH: usize = 128;
pub const SWEEP_SHIFT_PX: [usize; 6] = [5, 10, 15, 20, 25, 30];
pub const SWEEP_SHIFT_DEPTH: [f64; 6] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30];

/// A sweep shift rescaled to an image of `width` pixels, rounded to the
/// nearest pixel.
pub fn scaled_shift(px: usize, width: usize) -> usize {
    (px as f64 * width as f64 / SWEEP_REFERENCE_WIDTH as f64).round() as usize
}

/// Train and test splits for a run: split by instance, then keep
/// `cfg.views` training views per instance when nonzero.
pub fn splits(cfg: &RunConfig, data: &Dataset) -> (Dataset, Dataset) {
    let (train, test) = data.split(cfg.split_seed);
    let train = if cfg.views > 0 {
        train.subsample_views(cfg.views, cfg.seed)
    } else {
        train
    };
    (train, test)
}

/// Views per instance in `data` (the largest count).
pub fn views_per_instance(data: &Dataset) -> usize {
    let mut counts = std::collections::HashMap::new();
    for s in &data.samples {
        *counts.entry(s.instance_id).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

pub struct ExperimentResult {
    pub report: TrainReport,
    pub metrics: Metrics,
}

/// Trains on the training split and evaluates on the test split.
pub fn run_experiment(
    cfg: &RunConfig,
    data: &Dataset,
    group: Arc<IcoGroup>,
    log: Option<&Path>,
) -> Result<ExperimentResult> {
    let (train_set, test_set) = splits(cfg, data);
    if test_set.samples.is_empty() {
        return Err(Error::Config("test split is empty; the dataset needs at least 2 instances".into()));
    }
    let report = train(cfg, &train_set, group, log)?;
    let shift = EvalShift {
        px: cfg.eval_shift_px,
        depth: cfg.eval_shift_depth,
        seed: cfg.seed,
    };
    let metrics = evaluate(&report.model, &test_set, cfg.symmetry, shift, cfg.precision)?;
    Ok(ExperimentResult { report, metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub views: Vec<usize>,
    pub seeds: Vec<u64>,
    /// In-plane sweep values already scaled to the dataset width.
    pub shift_px: Vec<usize>,
    pub shift_depth: Vec<f64>,
}

impl AblationGrid {
    /// Every pose variant at 60 and 15 views plus both shift sweeps.
    pub fn standard(width: usize) -> Self {
        Self {
            variants: vec![
                Variant::I2i,
                Variant::Sparse,
                Variant::Vector,
                Variant::NoE2cnn,
                Variant::NoGroupconv,
                Variant::CnnGs,
                Variant::CnnProc,
            ],
            views: vec![60, 15],
            seeds: vec![0],
            shift_px: SWEEP_SHIFT_PX.iter().map(|&p| scaled_shift(p, width)).collect(),
            shift_depth: SWEEP_SHIFT_DEPTH.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    /// Variant name, with the swept setting in brackets for sweep rows.
    pub label: String,
    pub cfg: RunConfig,
    pub views: usize,
    pub metrics: Metrics,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        csv_row(&self.label, self.cfg.task, self.views, self.cfg.seed, &self.metrics)
    }
}

/// One configuration per grid cell, in output order: variants x views x
/// seeds, then the in-plane and depth sweeps (on `base.variant`) per seed.
pub fn grid_cells(base: &RunConfig, grid: &AblationGrid) -> Vec<(String, RunConfig)> {
    let mut cells = Vec::new();
    for &variant in &grid.variants {
        for &views in &grid.views {
            for &seed in &grid.seeds {
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.views = views;
                cfg.seed = seed;
                cells.push((variant.to_string(), cfg));
            }
        }
    }
    for &seed in &grid.seeds {
        for &px in &grid.shift_px {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.shift_px = px;
            cfg.eval_shift_px = px;
            cells.push((format!("{}[shift_px={px}]", base.variant), cfg));
        }
        for &d in &grid.shift_depth {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.shift_depth = d;
            cfg.eval_shift_depth = d;
            cells.push((format!("{}[shift_depth={d}]", base.variant), cfg));
        }
    }
    cells
}

/// Runs every cell; a failing cell yields a NaN row and the grid continues.
/// `on_row` sees each row as soon as it is finished.
pub fn ablate(
    base: &RunConfig,
    grid: &AblationGrid,
    data: &Dataset,
    group: Arc<IcoGroup>,
    mut on_row: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let all_views = views_per_instance(data);
    grid_cells(base, grid)
        .into_iter()
        .map(|(label, cfg)| {
            let views = if cfg.views == 0 { all_views } else { cfg.views };
            let (metrics, error) = match run_experiment(&cfg, data, group.clone(), None) {
                Ok(r) => (r.metrics, None),
                Err(e) => (Metrics::failed(), Some(e.to_string())),
            };
            let row = AblationRow {
                label,
                cfg,
                views,
                metrics,
                error,
            };
            on_row(&row);
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_scaling() {
        let scaled: Vec<usize> = SWEEP_SHIFT_PX.iter().map(|&p| scaled_shift(p, 32)).collect();
        assert_eq!(scaled, vec![1, 3, 4, 5, 6, 8]);
        assert_eq!(scaled_shift(30, 128), 30);
    }

    #[test]
    fn grid_layout() {
        let grid = AblationGrid {
            variants: vec![Variant::I2i, Variant::NoGroupconv],
            views: vec![60, 15],
            seeds: vec![0],
            shift_px: vec![],
            shift_depth: vec![],
        };
        let cells = grid_cells(&RunConfig::default(), &grid);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].0, "i2i");
        assert_eq!(cells[1].1.views, 15);
        assert_eq!(cells[2].1.variant, Variant::NoGroupconv);
        let std = AblationGrid::standard(32);
        assert_eq!(grid_cells(&RunConfig::default(), &std).len(), 7 * 2 + 12);
    }
}

//! Metrics and model evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::{Precision, Task};
use crate::harness::model::{Model, Prediction};
use crate::rotations::{symmetry_aware_error, Rotation, SymmetrySpec};

pub const CSV_HEADER: &str = "variant,task,views,seed,median_err_deg,mean_err_deg,acc,map";

/// Median error of a predictor whose output is independent of the label:
/// the root of `(t - sin t) / pi = 1/2`, in degrees.
pub fn random_predictor_median_deg() -> f64 {
    let (mut lo, mut hi) = (0.0f64, std::f64::consts::PI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (mid - mid.sin()) / std::f64::consts::PI < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).to_degrees()
}

/// Evaluation results. Pose runs fill the error columns; classification
/// runs fill `acc` (percent) and `map`. Inapplicable fields are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub median_err_deg: f64,
    pub mean_err_deg: f64,
    pub acc: f64,
    pub map: f64,
    pub samples: usize,
}

impl Metrics {
    pub fn failed() -> Self {
        Self {
            median_err_deg: f64::NAN,
            mean_err_deg: f64::NAN,
            acc: f64::NAN,
            map: f64::NAN,
            samples: 0,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and mean symmetry-aware geodesic error in degrees.
pub fn pose_metrics(preds: &[Rotation], truths: &[Rotation], sym: SymmetrySpec) -> Metrics {
    let errs: Vec<f64> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| symmetry_aware_error(p, t, sym).to_degrees())
        .collect();
    Metrics {
        median_err_deg: median(&errs),
        mean_err_deg: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
        acc: f64::NAN,
        map: f64::NAN,
        samples: errs.len(),
    }
}

/// Average precision of one score ranking; ties keep input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Accuracy in percent (argmax, ties to the lowest class) and macro
/// one-vs-rest average precision over classes that occur in `labels`.
pub fn classification_metrics(probs: &[Vec<f64>], labels: &[u32]) -> Metrics {
    let n = probs.len();
    let classes = probs.first().map_or(0, Vec::len);
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let best = (0..p.len()).fold(0, |b, c| if p[c] > p[b] { c } else { b });
            best == l as usize
        })
        .count();
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            average_precision(&scores, &pos)
        })
        .collect();
    Metrics {
        median_err_deg: f64::NAN,
        mean_err_deg: f64::NAN,
        acc: 100.0 * correct as f64 / n.max(1) as f64,
        map: if aps.is_empty() {
            f64::NAN
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        },
        samples: n,
    }
}

/// Test-time perturbation applied before prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalShift {
    pub px: usize,
    pub depth: f64,
    pub seed: u64,
}

/// Predicts every sample (in parallel, order preserved) and scores the
/// predictions. Shifted evaluation draws one perturbation per sample from a
/// stream keyed by the sample index.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    sym: SymmetrySpec,
    shift: EvalShift,
    precision: Precision,
) -> Result<Metrics> {
    if data.samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if data.height != model.spec.input_size || data.width != model.spec.input_size || data.channels != model.spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "dataset images are {}x{}x{}, model expects {s}x{s}x{}",
            data.height,
            data.width,
            data.channels,
            model.spec.in_channels,
            s = model.spec.input_size
        )));
    }
    let preds: Vec<Prediction> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let image = if shift.px > 0 || shift.depth > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shift.seed, 0xE7A1, i as u64));
                augment(s, data.height, data.width, shift.px, shift.depth, &mut rng).image
            } else {
                s.image.clone()
            };
            match precision {
                Precision::F32 => model.predict::<f32>(&image),
                Precision::F64 => model.predict::<f64>(&image),
            }
        })
        .collect::<Result<_>>()?;
    Ok(match model.spec.task {
        Task::Pose => {
            let rots: Vec<Rotation> = preds
                .into_iter()
                .map(|p| match p {
                    Prediction::Pose(r) => r,
                    Prediction::Class(_) => unreachable!("pose model"),
                })
                .collect();
            let truths: Vec<Rotation> = data.samples.iter().map(|s| s.label()).collect();
            pose_metrics(&rots, &truths, sym)
        }
        Task::Cls => {
            let probs: Vec<Vec<f64>> = preds
                .into_iter()
                .map(|p| match p {
                    Prediction::Class(c) => c,
                    Prediction::Pose(_) => unreachable!("classification model"),
                })
                .collect();
            let labels: Vec<u32> = data.samples.iter().map(|s| s.class_id).collect();
            classification_metrics(&probs, &labels)
        }
    })
}

/// One results row in [`CSV_HEADER`] order.
pub fn csv_row(variant: &str, task: Task, views: usize, seed: u64, m: &Metrics) -> String {
    format!(
        "{variant},{task},{views},{seed},{},{},{},{}",
        m.median_err_deg, m.mean_err_deg, m.acc, m.map
    )
}

//! Run configuration and its plain-text `key = value` format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::DEFAULT_LAMBDA;
use crate::projection::{Scheme, DEFAULT_COVERAGE, DEFAULT_SIGMA};
use crate::rotations::SymmetrySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    #[default]
    Pose,
    Cls,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pose => "pose",
            Task::Cls => "cls",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose" => Ok(Task::Pose),
            "cls" => Ok(Task::Cls),
            _ => Err(Error::Config(format!("unknown task '{s}' (expected pose or cls)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Equivariant encoder, 42-point projection, icosahedral convolution.
    #[default]
    I2i,
    /// Projection onto the 12 vertices only.
    Sparse,
    /// Vector projection; the feature sphere holds the matrices.
    Vector,
    /// Plain encoder in place of the C4 encoder.
    NoE2cnn,
    /// Projected features flattened into a dense layer instead of the group convolution.
    NoGroupconv,
    /// Plain encoder, dense 6D output, Gram-Schmidt.
    CnnGs,
    /// Plain encoder, dense 9D output, Procrustes.
    CnnProc,
    /// C4 encoder, spatially pooled invariant features, dense class logits.
    E2cnnInv,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::I2i,
        Variant::Sparse,
        Variant::Vector,
        Variant::NoE2cnn,
        Variant::NoGroupconv,
        Variant::CnnGs,
        Variant::CnnProc,
        Variant::E2cnnInv,
    ];

    pub fn equivariant_encoder(self) -> bool {
        !matches!(self, Variant::NoE2cnn | Variant::CnnGs | Variant::CnnProc)
    }

    /// Projection scheme for variants that project onto the sphere.
    pub fn scheme(self) -> Option<Scheme> {
        match self {
            Variant::I2i | Variant::NoE2cnn | Variant::NoGroupconv => Some(Scheme::Submesh42),
            Variant::Sparse => Some(Scheme::Sparse12),
            Variant::Vector => Some(Scheme::Vector),
            Variant::CnnGs | Variant::CnnProc | Variant::E2cnnInv => None,
        }
    }

    pub fn supports(self, task: Task) -> bool {
        match task {
            Task::Pose => self != Variant::E2cnnInv,
            Task::Cls => !matches!(self, Variant::CnnGs | Variant::CnnProc),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::I2i => "i2i",
            Variant::Sparse => "sparse",
            Variant::Vector => "vector",
            Variant::NoE2cnn => "no-e2cnn",
            Variant::NoGroupconv => "no-groupconv",
            Variant::CnnGs => "cnn-gs",
            Variant::CnnProc => "cnn-proc",
            Variant::E2cnnInv => "e2cnn-inv",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.to_string() == s).ok_or_else(|| {
            let names: Vec<String> = Self::ALL.iter().map(ToString::to_string).collect();
            Error::Config(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision '{s}' (expected f32 or f64)"))),
        }
    }
}

/// Everything needed to train and evaluate one model.
///
/// Keys accepted by [`RunConfig::set`] and the config file:
///
/// | key | meaning | default |
/// |---|---|---|
/// | `task` | `pose` or `cls` | `pose` |
/// | `variant` | model variant | `i2i` |
/// | `dataset` | dataset file | (required for training) |
/// | `out` | output directory | `out` |
/// | `epochs` | training epochs | 40 for pose, 20 for cls |
/// | `batch_size` | samples per step | 64 |
/// | `lr` | initial learning rate | 1e-3 |
/// | `lr_min` | learning-rate floor | 1e-5 |
/// | `lr_steps` | comma-separated epoch fractions of the x0.1 steps | `0.5,0.75` |
/// | `momentum` | Nesterov momentum | 0.9 |
/// | `grad_clip` | global gradient-norm limit, 0 = off | 0 |
/// | `warmup` | epochs of linear learning-rate ramp | 0 |
/// | `lambda` | regression weight of the pose loss | 100 |
/// | `sigma` | projection kernel width | 0.2 |
/// | `coverage` | projection coverage of the feature map | 0.9 |
/// | `seed` | initialization, shuffling, augmentation | 0 |
/// | `split_seed` | train/test split by instance | 0 |
/// | `views` | views per training instance (subsampled), 0 = all | 0 |
/// | `precision` | `f32` or `f64` arithmetic | `f32` |
/// | `shift_px` | training shift augmentation in pixels | 3 |
/// | `shift_depth` | training depth shift fraction | 0 |
/// | `eval_shift_px` | test-time shift in pixels | 0 |
/// | `eval_shift_depth` | test-time depth shift fraction | 0 |
/// | `threads` | worker threads, 0 = all cores | 0 |
/// | `base_channels` | encoder width per rotation | 8 |
/// | `blocks` | encoder conv blocks after the lifting layer | 3 |
/// | `feature_n` | feature-sphere channels `n` | 16 |
/// | `symmetry` | `none`, `cyclic-z:N` or `continuous-z` | `none` |
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_steps: Vec<f64>,
    pub momentum: f64,
    pub grad_clip: f64,
    pub warmup: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub coverage: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub views: usize,
    pub precision: Precision,
    pub shift_px: usize,
    pub shift_depth: f64,
    pub eval_shift_px: usize,
    pub eval_shift_depth: f64,
    pub threads: usize,
    pub base_channels: usize,
    pub blocks: usize,
    pub feature_n: usize,
    pub symmetry: SymmetrySpec,
    epochs_set: bool,
}

pub const POSE_EPOCHS: usize = 40;
pub const CLS_EPOCHS: usize = 20;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Pose,
            variant: Variant::I2i,
            dataset: None,
            out: PathBuf::from("out"),
            epochs: POSE_EPOCHS,
            batch_size: 64,
            lr: 1e-3,
            lr_min: 1e-5,
            lr_steps: vec![0.5, 0.75],
            momentum: 0.9,
            grad_clip: 0.0,
            warmup: 0,
            lambda: DEFAULT_LAMBDA,
            sigma: DEFAULT_SIGMA,
            coverage: DEFAULT_COVERAGE,
            seed: 0,
            split_seed: 0,
            views: 0,
            precision: Precision::F32,
            shift_px: 3,
            shift_depth: 0.0,
            eval_shift_px: 0,
            eval_shift_depth: 0.0,
            threads: 0,
            base_channels: 8,
            blocks: 3,
            feature_n: 16,
            symmetry: SymmetrySpec::None,
            epochs_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

/// Step size, gradient clipping and warmup used for the 32x32 experiments.
pub const DESK_LR: f64 = 0.1;
pub const DESK_GRAD_CLIP: f64 = 1.0;
pub const DESK_WARMUP: usize = 2;

impl RunConfig {
    /// Defaults with [`DESK_LR`], [`DESK_GRAD_CLIP`] and [`DESK_WARMUP`]. The
    /// plain defaults (lr 1e-3, no clipping) barely move the small encoder in
    /// 40 epochs, and without the warmup the first full-rate steps can leave
    /// the encoder stalled for several epochs.
    pub fn desk() -> Self {
        Self {
            lr: DESK_LR,
            grad_clip: DESK_GRAD_CLIP,
            warmup: DESK_WARMUP,
            ..Self::default()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "task" => {
                self.task = value.parse()?;
                if !self.epochs_set {
                    self.epochs = match self.task {
                        Task::Pose => POSE_EPOCHS,
                        Task::Cls => CLS_EPOCHS,
                    };
                }
            }
            "variant" => self.variant = value.parse()?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "epochs" => {
                self.epochs = parse(key, value)?;
                self.epochs_set = true;
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "lr_steps" => {
                self.lr_steps = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "coverage" => self.coverage = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "views" => self.views = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "shift_px" => self.shift_px = parse(key, value)?,
            "shift_depth" => self.shift_depth = parse(key, value)?,
            "eval_shift_px" => self.eval_shift_px = parse(key, value)?,
            "eval_shift_depth" => self.eval_shift_depth = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "feature_n" => self.feature_n = parse(key, value)?,
            "symmetry" => self.symmetry = value.parse()?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every non-empty, non-comment line of a `key = value` file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Serializes the model-defining and training keys.
    pub fn to_text(&self) -> String {
        let steps: Vec<String> = self.lr_steps.iter().map(|s| s.to_string()).collect();
        let mut lines = vec![
            format!("task = {}", self.task),
            format!("variant = {}", self.variant),
        ];
        if let Some(d) = &self.dataset {
            lines.push(format!("dataset = {}", d.display()));
        }
        lines.extend([
            format!("out = {}", self.out.display()),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {}", self.lr),
            format!("lr_min = {}", self.lr_min),
            format!("lr_steps = {}", steps.join(",")),
            format!("momentum = {}", self.momentum),
            format!("grad_clip = {}", self.grad_clip),
            format!("warmup = {}", self.warmup),
            format!("lambda = {}", self.lambda),
            format!("sigma = {}", self.sigma),
            format!("coverage = {}", self.coverage),
            format!("seed = {}", self.seed),
            format!("split_seed = {}", self.split_seed),
            format!("views = {}", self.views),
            format!("precision = {}", self.precision),
            format!("shift_px = {}", self.shift_px),
            format!("shift_depth = {}", self.shift_depth),
            format!("eval_shift_px = {}", self.eval_shift_px),
            format!("eval_shift_depth = {}", self.eval_shift_depth),
            format!("threads = {}", self.threads),
            format!("base_channels = {}", self.base_channels),
            format!("blocks = {}", self.blocks),
            format!("feature_n = {}", self.feature_n),
            format!("symmetry = {}", self.symmetry),
        ]);
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.variant.supports(self.task) {
            return fail(format!("variant {} does not support task {}", self.variant, self.task));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return fail(format!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if self.lr_steps.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return fail(format!("lr_steps must be fractions in [0, 1], got {:?}", self.lr_steps));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return fail(format!("coverage must lie in (0, 1], got {}", self.coverage));
        }
        for (name, v) in [("shift_depth", self.shift_depth), ("eval_shift_depth", self.eval_shift_depth)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.base_channels == 0 || self.feature_n == 0 {
            return fail("base_channels and feature_n must be at least 1".into());
        }
        self.symmetry.validate()?;
        Ok(())
    }

    /// Learning rate for `epoch` (0-based): a linear ramp over the first
    /// `warmup` epochs, then one x0.1 step per elapsed milestone, never below
    /// `lr_min`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup {
            return self.lr * (epoch + 1) as f64 / (self.warmup + 1) as f64;
        }
        let steps = self
            .lr_steps
            .iter()
            .filter(|&&s| epoch as f64 >= (s * self.epochs as f64).round())
            .count();
        (self.lr * 0.1f64.powi(steps as i32)).max(self.lr_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("task = cls # comment\nvariant=e2cnn-inv\n\nlr_steps = 0.3\nsymmetry = cyclic-z:4\n")
            .unwrap();
        assert_eq!(cfg.task, Task::Cls);
        assert_eq!(cfg.epochs, CLS_EPOCHS);
        assert_eq!(cfg.variant, Variant::E2cnnInv);
        assert_eq!(cfg.symmetry, SymmetrySpec::CyclicZ(4));
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn explicit_epochs_survive_task_change() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("epochs = 3\ntask = cls").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn validation_messages() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.variant = Variant::E2cnnInv;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("e2cnn-inv"), "{msg}");
        let mut cfg = RunConfig::default();
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().apply_text("bogus = 1").is_err());
        assert!(RunConfig::default().apply_text("epochs = many").is_err());
        assert!(RunConfig::default().apply_text("no equals sign").is_err());
    }

    #[test]
    fn schedule_steps_at_half_and_three_quarters() {
        let cfg = RunConfig::default();
        let lrs: Vec<f64> = (0..40).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[0], 1e-3);
        assert_eq!(lrs[19], 1e-3);
        assert!((lrs[20] - 1e-4).abs() < 1e-18);
        assert!((lrs[30] - 1e-5).abs() < 1e-18);
        let mut low = cfg.clone();
        low.lr_steps = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(low.lr_at(39), 1e-5);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = RunConfig::desk();
        assert_eq!(cfg.warmup, DESK_WARMUP);
        let lrs: Vec<f64> = (0..4).map(|e| cfg.lr_at(e)).collect();
        assert!((lrs[0] - DESK_LR / 3.0).abs() < 1e-15);
        assert!((lrs[1] - 2.0 * DESK_LR / 3.0).abs() < 1e-15);
        assert_eq!(lrs[2], DESK_LR);
        assert_eq!(cfg.lr_at(20), DESK_LR * 0.1);
    }
}

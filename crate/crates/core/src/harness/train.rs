//! Minibatch SGD with Nesterov momentum.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use i2i_tensor::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::{Precision, RunConfig, Task};
use crate::harness::model::{LossParts, Model, ModelSpec};
use crate::icogroup::IcoGroup;

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} loss={:.6} cls={:.6} reg={:.6} lr={:.1e} time={:.2}s",
            self.epoch, self.loss, self.cls, self.reg, self.lr, self.seconds
        )
    }
}

pub struct TrainReport {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }
}

/// Nesterov momentum state, one buffer per parameter tensor.
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, params: &[&Tensor<f64>]) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// `v = mu v + g; p -= lr (g + mu v)`.
    pub fn step(&mut self, params: Vec<&mut Tensor<f64>>, grads: &[Tensor<f64>], lr: f64) {
        let mu = self.momentum;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * (gv + mu * *vv);
            }
        }
    }
}

/// Mean loss over `batch` and its gradient for every parameter, in f64.
pub fn batch_gradients<T: Scalar>(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    images: &[Vec<f32>],
    lambda: f64,
) -> Result<(LossParts, Vec<Tensor<f64>>)> {
    let tape = Tape::<T>::new();
    let bound = model.bind(&tape)?;
    let mut total: Option<Var<'_, T>> = None;
    let mut parts = LossParts::default();
    for (&i, image) in batch.iter().zip(images) {
        let s = &data.samples[i];
        let x = tape.constant(model.image_tensor(image)?);
        let out = model.forward(&bound, x)?;
        let (l, p) = model.loss(out, &s.label(), s.class_id, lambda)?;
        parts.total += p.total;
        parts.cls += p.cls;
        parts.reg += p.reg;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let Some(total) = total else {
        return Err(Error::Config("empty batch".into()));
    };
    let inv = 1.0 / batch.len() as f64;
    let mean = total.scale(inv);
    let grads = tape.backward(mean)?;
    let out = bound
        .leaves
        .iter()
        .map(|&v| grads.get_or_zeros(v).cast::<f64>())
        .collect();
    Ok((
        LossParts {
            total: parts.total * inv,
            cls: parts.cls * inv,
            reg: parts.reg * inv,
        },
        out,
    ))
}

/// Rescales `grads` so that their joint L2 norm is at most `limit`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f64>], limit: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = limit / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Number of classes implied by the largest class id.
pub fn class_count(data: &Dataset) -> usize {
    data.samples.iter().map(|s| s.class_id as usize + 1).max().unwrap_or(0)
}

/// Trains a fresh model on `data`. When `log` is given, one line per epoch
/// is appended to it.
pub fn train(cfg: &RunConfig, data: &Dataset, group: Arc<IcoGroup>, log: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.height != data.width {
        return Err(Error::Config(format!(
            "images must be square, got {}x{}",
            data.height, data.width
        )));
    }
    let classes = class_count(data);
    let spec = ModelSpec::from_config(cfg, data.height, data.channels, classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7EA1, 0));
    let mut model = Model::new(spec, group, &mut rng)?;
    let mut opt = Sgd::new(cfg.momentum, &model.params().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut log_file = match log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let mut write_log = |line: &str| -> Result<()> {
        if let (Some(f), Some(p)) = (log_file.as_mut(), log) {
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Vec<f32>> = batch
                .iter()
                .map(|&i| {
                    augment(
                        &data.samples[i],
                        data.height,
                        data.width,
                        cfg.shift_px,
                        cfg.shift_depth,
                        &mut rng,
                    )
                    .image
                })
                .collect();
            let (parts, mut grads) = match cfg.precision {
                Precision::F32 => batch_gradients::<f32>(&model, data, batch, &images, cfg.lambda)?,
                Precision::F64 => batch_gradients::<f64>(&model, data, batch, &images, cfg.lambda)?,
            };
            if !parts.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                let ids: Vec<String> = batch.iter().map(|i| i.to_string()).collect();
                write_log(&format!(
                    "non-finite loss: epoch={epoch} batch={b} loss={} samples={}",
                    parts.total,
                    ids.join(",")
                ))?;
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            let w = batch.len() as f64;
            sum.total += parts.total * w;
            sum.cls += parts.cls * w;
            sum.reg += parts.reg * w;
            opt.step(model.params_mut(), &grads, lr);
        }
        let n = data.samples.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: sum.total / n,
            cls: sum.cls / n,
            reg: sum.reg / n,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        write_log(&entry.line())?;
        epochs.push(entry);
    }
    if cfg.task == Task::Cls && classes < 2 {
        return Err(Error::Config("classification needs at least 2 classes".into()));
    }
    Ok(TrainReport { model, epochs })
}

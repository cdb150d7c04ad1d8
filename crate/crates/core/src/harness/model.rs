//! Trainable models for every variant, sharing one encoder and differing in
//! how the feature map becomes a pose or class prediction.

use std::rc::Rc;
use std::sync::Arc;

use i2i_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{uniform_fan_in, BoundEncoder, Encoder, EncoderConfig, OUTPUT_SIZE};
use crate::error::{Error, Result};
use crate::groupconv::{ico_conv, ico_conv_vector};
use crate::harness::config::{RunConfig, Task, Variant};
use crate::heads::{
    class_logits, pose_loss, predict_rotation, rotation_from_tensor, softmax, BaselineHead, BaselineKind,
    PoseTarget, POSE_CHANNELS,
};
use crate::icogroup::{IcoGroup, SUBMESH_SIZE};
use crate::projection::{build_plan, ProjectionPlan, Scheme};
use crate::rotations::Rotation;

/// Output-channel bias for pose outputs: zero logit and the identity offset.
pub const POSE_BIAS: [f64; POSE_CHANNELS] = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Shape-defining hyperparameters; enough to rebuild an untrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub task: Task,
    pub variant: Variant,
    /// Output channels per group element: 7 for pose, the class count for
    /// classification.
    pub outputs: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub blocks: usize,
    pub feature_n: usize,
    pub sigma: f64,
    pub coverage: f64,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig, input_size: usize, in_channels: usize, classes: usize) -> Self {
        Self {
            task: cfg.task,
            variant: cfg.variant,
            outputs: match cfg.task {
                Task::Pose => POSE_CHANNELS,
                Task::Cls => classes,
            },
            input_size,
            in_channels,
            base_channels: cfg.base_channels,
            blocks: cfg.blocks,
            feature_n: cfg.feature_n,
            sigma: cfg.sigma,
            coverage: cfg.coverage,
        }
    }

    /// Encoder output channels `k`.
    pub fn feature_channels(&self) -> usize {
        match self.variant.scheme() {
            Some(Scheme::Vector) => self.feature_n,
            _ => self.outputs * self.feature_n,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.input_size,
            in_channels: self.in_channels,
            base_channels: self.base_channels,
            blocks: self.blocks,
            equivariant: self.variant.equivariant_encoder(),
            out_channels: self.feature_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.variant.supports(self.task) {
            return Err(Error::Config(format!(
                "variant {} does not support task {}",
                self.variant, self.task
            )));
        }
        if self.task == Task::Cls && self.outputs < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {}",
                self.outputs
            )));
        }
        self.encoder_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// Feature sphere convolved with the projected filter, plus a per-channel bias.
    Sphere { sphere: Tensor<f64>, bias: Tensor<f64> },
    /// Dense layer on a flat feature vector.
    Dense { weight: Tensor<f64>, bias: Tensor<f64> },
    /// Direct rotation regression.
    Baseline(BaselineHead),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub head: Head,
    plan: Option<ProjectionPlan>,
    group: Arc<IcoGroup>,
}

/// Model weights recorded on a tape.
pub struct BoundModel<'t, T: Scalar> {
    /// Trainable leaves in [`Model::params`] order.
    pub leaves: Vec<Var<'t, T>>,
    encoder: BoundEncoder<'t, T>,
    head: Vec<Var<'t, T>>,
}

/// Loss value and its parts for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Pose(Rotation),
    Class(Vec<f64>),
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, group: Arc<IcoGroup>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::new(spec.encoder_config(), rng)?;
        let plan = Self::plan_for(&spec, &group)?;
        let k = spec.feature_channels();
        let m = spec.outputs;
        let out_bias = |rows: usize| -> Tensor<f64> {
            Tensor::from_fn(&[rows * m], |i| match spec.task {
                Task::Pose => POSE_BIAS[i % m],
                Task::Cls => 0.0,
            })
        };
        let head = match spec.variant {
            Variant::I2i | Variant::Sparse | Variant::Vector | Variant::NoE2cnn => {
                let nvis = plan.as_ref().map_or(0, ProjectionPlan::num_visible);
                let (cols, fan_in) = match spec.variant.scheme() {
                    Some(Scheme::Vector) => (m * spec.feature_n, nvis * spec.feature_n),
                    _ => (spec.feature_n, nvis * spec.feature_n),
                };
                Head::Sphere {
                    sphere: uniform_fan_in(rng, &[SUBMESH_SIZE, cols], fan_in, 1.0),
                    bias: out_bias(1),
                }
            }
            Variant::NoGroupconv => {
                let d = plan.as_ref().map_or(0, ProjectionPlan::num_visible) * k;
                Head::Dense {
                    weight: uniform_fan_in(rng, &[group.len() * m, d], d, 1.0),
                    bias: out_bias(group.len()),
                }
            }
            Variant::E2cnnInv => Head::Dense {
                weight: uniform_fan_in(rng, &[m, k], k, 1.0),
                bias: out_bias(1),
            },
            Variant::CnnGs | Variant::CnnProc => {
                let kind = if spec.variant == Variant::CnnGs {
                    BaselineKind::GramSchmidt
                } else {
                    BaselineKind::Procrustes
                };
                Head::Baseline(BaselineHead::new(kind, k * OUTPUT_SIZE * OUTPUT_SIZE, rng))
            }
        };
        Ok(Self {
            spec,
            encoder,
            head,
            plan,
            group,
        })
    }

    fn plan_for(spec: &ModelSpec, group: &IcoGroup) -> Result<Option<ProjectionPlan>> {
        spec.variant
            .scheme()
            .map(|s| build_plan(group.quotient(), OUTPUT_SIZE, OUTPUT_SIZE, spec.sigma, spec.coverage, s))
            .transpose()
    }

    pub fn group(&self) -> &Arc<IcoGroup> {
        &self.group
    }

    pub fn plan(&self) -> Option<&ProjectionPlan> {
        self.plan.as_ref()
    }

    pub fn params(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = self.encoder.params();
        match &self.head {
            Head::Sphere { sphere, bias } => {
                out.push(("head.sphere".into(), sphere));
                out.push(("head.bias".into(), bias));
            }
            Head::Dense { weight, bias } => {
                out.push(("head.weight".into(), weight));
                out.push(("head.bias".into(), bias));
            }
            Head::Baseline(b) => {
                out.push(("head.weight".into(), &b.weight));
                out.push(("head.bias".into(), &b.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = self.encoder.params_mut();
        match &mut self.head {
            Head::Sphere { sphere, bias } => out.extend([sphere, bias]),
            Head::Dense { weight, bias } => out.extend([weight, bias]),
            Head::Baseline(b) => out.extend([&mut b.weight, &mut b.bias]),
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>) -> Result<BoundModel<'t, T>> {
        let leaves: Vec<Var<'t, T>> = self.params().into_iter().map(|(_, t)| tape.param(t.cast())).collect();
        let n_enc = self.encoder.params().len();
        let encoder = self.encoder.bind_leaves(leaves[..n_enc].to_vec())?;
        Ok(BoundModel {
            head: leaves[n_enc..].to_vec(),
            encoder,
            leaves,
        })
    }

    /// Converts a row-major `H x W x C` image into a `[C, H, W]` tensor.
    pub fn image_tensor<T: Scalar>(&self, image: &[f32]) -> Result<Tensor<T>> {
        let (s, c) = (self.spec.input_size, self.spec.in_channels);
        if image.len() != s * s * c {
            return Err(Error::ShapeMismatch(format!(
                "model expects {s}x{s}x{c} images, got {} values",
                image.len()
            )));
        }
        Ok(Tensor::from_fn(&[c, s, s], |i| {
            let (ch, p) = (i / (s * s), i % (s * s));
            T::of(image[p * c + ch] as f64)
        }))
    }

    /// Raw output for one `[C, H, W]` image: `[60, 7]` pose signal, `[3, 3]`
    /// rotation for the direct baselines, or `[1, classes]` logits.
    pub fn forward<'t, T: Scalar>(&self, bound: &BoundModel<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.encoder.encode(&bound.encoder, image)?;
        let spec = &self.spec;
        let (m, n) = (spec.outputs, spec.feature_n);
        let out = match (&self.head, spec.variant) {
            (Head::Sphere { .. }, v) => {
                let plan = self.plan.as_ref().expect("sphere head has a plan");
                let (f, b) = (bound.head[0], bound.head[1]);
                let sig = if v.scheme() == Some(Scheme::Vector) {
                    let psi = plan.project_var(y, m, None)?;
                    ico_conv_vector(f, psi, &self.group, &plan.visible, m)?
                } else {
                    let psi = plan.project_var(y, m, Some(n))?;
                    ico_conv(f, psi, &self.group, &plan.visible)?
                };
                // The image enters as the filter, so a turn of the image
                // translates the raw signal on the right. Reading row g from
                // element g^-1 makes it a left translation, matching how the
                // labels move under the same turn.
                let g = &self.group;
                let idx: Vec<usize> = (0..g.len()).flat_map(|e| (0..m).map(move |r| g.inv(e) * m + r)).collect();
                sig.take(Rc::new(idx), &[g.len(), m])?.add_row_bias(b)?
            }
            (Head::Dense { .. }, Variant::NoGroupconv) => {
                let plan = self.plan.as_ref().expect("no-groupconv has a plan");
                let psi = plan.project_var(y, m, None)?;
                let d = psi.value().len();
                psi.reshape(&[1, d])?
                    .linear(bound.head[0], Some(bound.head[1]))?
                    .reshape(&[self.group.len(), m])?
            }
            (Head::Dense { .. }, _) => {
                let k = y.shape()[0];
                y.reshape(&[k, OUTPUT_SIZE * OUTPUT_SIZE])?
                    .mean_axis(1)?
                    .reshape(&[1, k])?
                    .linear(bound.head[0], Some(bound.head[1]))?
            }
            (Head::Baseline(b), _) => {
                let d = y.value().len();
                return b.forward(bound.head[0], bound.head[1], y.reshape(&[d])?);
            }
        };
        Ok(match spec.task {
            Task::Cls if out.shape()[0] == self.group.len() => class_logits(out)?,
            _ => out,
        })
    }

    /// Training loss of one output against its label or class.
    pub fn loss<'t, T: Scalar>(
        &self,
        out: Var<'t, T>,
        label: &Rotation,
        class: u32,
        lambda: f64,
    ) -> Result<(Var<'t, T>, LossParts)> {
        match (self.spec.task, &self.head) {
            (Task::Cls, _) => {
                let c = class as usize;
                if c >= self.spec.outputs {
                    return Err(Error::ShapeMismatch(format!(
                        "class id {c} outside the model's {} classes",
                        self.spec.outputs
                    )));
                }
                let l = out.softmax_cross_entropy(&[c])?;
                let v = l.value().item().as_f64();
                Ok((l, LossParts { total: v, cls: v, reg: 0.0 }))
            }
            (Task::Pose, Head::Baseline(_)) => {
                let l = BaselineHead::loss(out, label)?;
                let v = l.value().item().as_f64();
                Ok((l, LossParts { total: v, cls: 0.0, reg: v }))
            }
            (Task::Pose, _) => {
                let target = PoseTarget::new(&self.group, label);
                let (l, b) = pose_loss(out, &target, lambda)?;
                Ok((
                    l,
                    LossParts {
                        total: b.total,
                        cls: b.cls,
                        reg: b.reg,
                    },
                ))
            }
        }
    }

    /// Tape-free output in precision `T`.
    pub fn output<T: Scalar>(&self, image: &[f32]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape)?;
        let x = tape.constant(self.image_tensor(image)?);
        Ok((*self.forward(&bound, x)?.value()).clone())
    }

    pub fn interpret<T: Scalar>(&self, out: &Tensor<T>) -> Result<Prediction> {
        Ok(match (self.spec.task, &self.head) {
            (Task::Cls, _) => Prediction::Class(softmax(&out.to_f64())),
            (Task::Pose, Head::Baseline(_)) => Prediction::Pose(rotation_from_tensor(out)),
            (Task::Pose, _) => Prediction::Pose(predict_rotation(out, &self.group)?),
        })
    }

    pub fn predict<T: Scalar>(&self, image: &[f32]) -> Result<Prediction> {
        self.interpret(&self.output::<T>(image)?)
    }

    /// Rebuilds a model from a spec and parameter tensors in [`Model::params`] order.
    pub fn from_params(spec: ModelSpec, group: Arc<IcoGroup>, params: Vec<Tensor<f64>>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(spec, group, &mut rng)?;
        let slots = model.params_mut();
        if slots.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }
}

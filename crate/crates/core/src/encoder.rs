//! C4-steerable convolutional encoder from a `[c, 32, 32]` image to an
//! `[k, 8, 8]` feature map.
//!
//! Equivariant layers carry a C4 axis: channel `c * 4 + r` is the response to
//! the kernel turned `r` quarter turns. Kernels are tied by exact 90° index
//! rotation, so rotating the input by a quarter turn rotates every feature
//! map and cyclically shifts the C4 axis. Downsampling uses 2x2 average
//! pooling, which commutes with quarter turns on even grids.

use std::rc::Rc;

use i2i_tensor::{concat, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub const OUTPUT_SIZE: usize = 8;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Channels per C4 orientation; the plain encoder uses twice this width.
    pub base_channels: usize,
    pub blocks: usize,
    pub equivariant: bool,
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            in_channels: 1,
            base_channels: 8,
            blocks: 3,
            equivariant: true,
            out_channels: 112,
        }
    }
}

impl EncoderConfig {
    /// Number of leading blocks that halve the resolution.
    pub fn downsamples(&self) -> usize {
        (self.input_size / OUTPUT_SIZE).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.downsamples();
        if self.input_size != OUTPUT_SIZE << d {
            return Err(Error::Config(format!(
                "encoder input size {} is not 8 times a power of two",
                self.input_size
            )));
        }
        if d > self.blocks {
            return Err(Error::Config(format!(
                "{} blocks cannot reduce {} to 8 (need {d})",
                self.blocks, self.input_size
            )));
        }
        if self.base_channels == 0 || self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Hidden width of the plain encoder.
    pub fn plain_width(&self) -> usize {
        2 * self.base_channels
    }
}

/// Expands lift weights `[c, cin, k, k]` into `[c * 4, cin, k, k]` with
/// channel `c * 4 + r` holding the kernel rotated by `r` quarter turns.
pub fn expand_lift<'t, T: Scalar>(w: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = w.shape();
    let [c, cin, kh, kw] = shape[..] else {
        return Err(Error::ShapeMismatch(format!("lift weights {shape:?}")));
    };
    let turns = (0..4).map(|r| w.rotate90(r)).collect::<std::result::Result<Vec<_>, _>>()?;
    interleave_orientations(concat(&turns)?, c, &[cin, kh, kw])
}

/// Expands group-conv weights `[co, ci, 4, k, k]` into `[co * 4, ci * 4, k, k]`:
/// block `(r, s)` is `rotate90(w[:, :, (s - r) mod 4], r)`.
pub fn expand_group<'t, T: Scalar>(w: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = w.shape();
    let [co, ci, 4, kh, kw] = shape[..] else {
        return Err(Error::ShapeMismatch(format!("group conv weights {shape:?}")));
    };
    let plane = kh * kw;
    let mut turns = Vec::with_capacity(4);
    for r in 0..4 {
        let idx: Vec<usize> = (0..co * ci * 4 * plane)
            .map(|i| {
                let (pair, s, e) = (i / (4 * plane), (i / plane) % 4, i % plane);
                (pair * 4 + (s + 4 - r) % 4) * plane + e
            })
            .collect();
        let shifted = w.take(Rc::new(idx), &[co, ci * 4, kh, kw])?;
        turns.push(shifted.rotate90(r)?);
    }
    interleave_orientations(concat(&turns)?, co, &[ci * 4, kh, kw])
}

/// `[4 * c, rest..]` ordered (r, c) -> `[c * 4, rest..]` ordered (c, r).
fn interleave_orientations<'t, T: Scalar>(
    stacked: Var<'t, T>,
    c: usize,
    rest: &[usize],
) -> Result<Var<'t, T>> {
    let inner: usize = rest.iter().product();
    let mut shape = vec![c * 4];
    shape.extend_from_slice(rest);
    Ok(stacked
        .reshape(&[4, c, inner])?
        .permute(&[1, 0, 2])?
        .reshape(&shape)?)
}

/// Lifting convolution of `[cin, h, w]` to `[c * 4, h, w]`.
pub fn c4_lift_conv<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let k = w.shape().get(2).copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("lift kernel must be odd, got {:?}", w.shape())));
    }
    Ok(x.conv2d(expand_lift(w)?, 1, k / 2)?)
}

/// Group convolution of `[ci * 4, h, w]` to `[co * 4, h, w]`.
pub fn c4_group_conv<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let k = w.shape().get(3).copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("group kernel must be odd, got {:?}", w.shape())));
    }
    Ok(x.conv2d(expand_group(w)?, 1, k / 2)?)
}

/// Encoder weights, kept in f64 and cast at the tape boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub lift: Tensor<f64>,
    pub convs: Vec<Tensor<f64>>,
    pub proj: Tensor<f64>,
}

/// Encoder weights recorded on a tape, with tied kernels already expanded.
pub struct BoundEncoder<'t, T: Scalar> {
    /// Trainable leaves in [`Encoder::params`] order.
    pub params: Vec<Var<'t, T>>,
    lift: Var<'t, T>,
    convs: Vec<Var<'t, T>>,
    proj: Var<'t, T>,
}

/// Uniform fan-in initialization with bound `gain * sqrt(3 / fan_in)`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f64> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k2 = KERNEL * KERNEL;
        let cin = config.in_channels;
        let (lift, convs, proj_in) = if config.equivariant {
            let c = config.base_channels;
            let lift = uniform_fan_in(rng, &[c, cin, KERNEL, KERNEL], cin * k2, RELU_GAIN);
            let convs = (0..config.blocks)
                .map(|_| uniform_fan_in(rng, &[c, c, 4, KERNEL, KERNEL], c * 4 * k2, RELU_GAIN))
                .collect();
            (lift, convs, c)
        } else {
            let c = config.plain_width();
            let lift = uniform_fan_in(rng, &[c, cin, KERNEL, KERNEL], cin * k2, RELU_GAIN);
            let convs = (0..config.blocks)
                .map(|_| uniform_fan_in(rng, &[c, c, KERNEL, KERNEL], c * k2, RELU_GAIN))
                .collect();
            (lift, convs, c)
        };
        let proj = uniform_fan_in(rng, &[config.out_channels, proj_in, 1, 1], proj_in, 1.0);
        Ok(Self {
            config,
            lift,
            convs,
            proj,
        })
    }

    pub fn params(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = vec![("encoder.lift".to_string(), &self.lift)];
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("encoder.block{i}"), c));
        }
        out.push(("encoder.proj".to_string(), &self.proj));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = vec![&mut self.lift];
        out.extend(self.convs.iter_mut());
        out.push(&mut self.proj);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>) -> Result<BoundEncoder<'t, T>> {
        let leaves = self.params().into_iter().map(|(_, t)| tape.param(t.cast())).collect();
        self.bind_leaves(leaves)
    }

    /// Builds the tied kernels from leaves given in [`Encoder::params`] order.
    pub fn bind_leaves<'t, T: Scalar>(&self, params: Vec<Var<'t, T>>) -> Result<BoundEncoder<'t, T>> {
        let n = self.convs.len();
        if params.len() != n + 2 {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} parameter leaves, got {}",
                n + 2,
                params.len()
            )));
        }
        let (lift, convs) = if self.config.equivariant {
            (
                expand_lift(params[0])?,
                params[1..=n].iter().map(|&c| expand_group(c)).collect::<Result<Vec<_>>>()?,
            )
        } else {
            (params[0], params[1..=n].to_vec())
        };
        Ok(BoundEncoder {
            proj: params[n + 1],
            params,
            lift,
            convs,
        })
    }

    /// Maps a `[cin, H, W]` image to the `[k, 8, 8]` feature map.
    pub fn encode<'t, T: Scalar>(&self, bound: &BoundEncoder<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = &self.config;
        let expect = [c.in_channels, c.input_size, c.input_size];
        if image.shape() != expect {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects image {expect:?}, got {:?}",
                image.shape()
            )));
        }
        let pad = KERNEL / 2;
        let mut x = image.conv2d(bound.lift, 1, pad)?.relu();
        let down = c.downsamples();
        for (i, &w) in bound.convs.iter().enumerate() {
            if i < down {
                x = x.avg_pool2()?;
            }
            x = x.conv2d(w, 1, pad)?.relu();
        }
        if c.equivariant {
            let s = x.shape();
            x = x
                .reshape(&[c.base_channels, 4, s[1], s[2]])?
                .mean_axis(1)?;
        }
        Ok(x.conv2d(bound.proj, 1, 0)?)
    }

    /// Tape-free convenience forward.
    pub fn encode_tensor<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape)?;
        let out = self.encode(&bound, tape.constant(image.clone()))?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot<T: Scalar>(t: &Tensor<T>, k: usize) -> Tensor<T> {
        let tape = Tape::new();
        let v = tape.constant(t.clone()).rotate90(k).unwrap();
        (*v.value()).clone()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Rotates every plane by a quarter turn and shifts the C4 axis by one.
    fn c4_shift(t: &Tensor<f64>) -> Tensor<f64> {
        let (c4, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let r = rot(t, 1);
        Tensor::from_fn(&[c4, h, w], |i| {
            let ch = i / (h * w);
            let (c, o) = (ch / 4, ch % 4);
            r.data()[((c * 4 + (o + 3) % 4) * h * w) + i % (h * w)]
        })
    }

    fn run<F>(f: F, x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64>
    where
        F: for<'t> Fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
    {
        let tape = Tape::new();
        let out = f(tape.constant(x.clone()), tape.constant(w.clone())).unwrap();
        (*out.value()).clone()
    }

    #[test]
    fn lift_is_c4_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[2, 12, 12]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3]);
        let y = run(c4_lift_conv, &x, &w);
        let yr = run(c4_lift_conv, &rot(&x, 1), &w);
        assert_eq!(yr.shape(), &[12, 12, 12]);
        assert!(yr.max_abs_diff(&c4_shift(&y)) < 1e-12);
        let zero = run(c4_lift_conv, &x, &Tensor::zeros(&[3, 2, 3, 3]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_conv_is_c4_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[8, 10, 10]);
        let w = rand_t(&mut rng, &[3, 2, 4, 3, 3]);
        let y = run(c4_group_conv, &x, &w);
        let yr = run(c4_group_conv, &c4_shift(&x), &w);
        assert_eq!(yr.shape(), &[12, 10, 10]);
        assert!(yr.max_abs_diff(&c4_shift(&y)) < 1e-12);
        let zero = run(c4_group_conv, &x, &Tensor::zeros(&[3, 2, 4, 3, 3]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_kernel_layout() {
        // block (r, s) of the expanded kernel is rotate90(w[(s - r) mod 4], r)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_t(&mut rng, &[1, 1, 4, 3, 3]);
        let tape = Tape::new();
        let full = expand_group(tape.constant(w.clone())).unwrap().value();
        assert_eq!(full.shape(), &[4, 4, 3, 3]);
        for r in 0..4 {
            for s in 0..4 {
                let src = Tensor::from_vec(vec![3, 3], w.data()[((s + 4 - r) % 4) * 9..][..9].to_vec()).unwrap();
                let expect = rot(&src, r);
                assert_eq!(&full.data()[(r * 4 + s) * 9..][..9], expect.data());
            }
        }
    }

    #[test]
    fn encoder_output_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(EncoderConfig::default(), &mut rng).unwrap();
        let x = rand_t(&mut rng, &[1, 32, 32]);
        let y = enc.encode_tensor(&x).unwrap();
        assert_eq!(y.shape(), &[112, 8, 8]);
        for k in 1..4 {
            let yr = enc.encode_tensor(&rot(&x, k)).unwrap();
            assert!(yr.max_abs_diff(&rot(&y, k)) < 1e-10);
        }
        let x32 = x.cast::<f32>();
        let y32 = enc.encode_tensor(&x32).unwrap();
        let yr32 = enc.encode_tensor(&rot(&x32, 1)).unwrap();
        assert!(yr32.max_abs_diff(&rot(&y32, 1)) < 1e-6);
    }

    #[test]
    fn plain_encoder_is_not_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            equivariant: false,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, &mut rng).unwrap();
        let x = rand_t(&mut rng, &[1, 32, 32]);
        let y = enc.encode_tensor(&x).unwrap();
        assert_eq!(y.shape(), &[112, 8, 8]);
        let yr = enc.encode_tensor(&rot(&x, 1)).unwrap();
        assert!(yr.max_abs_diff(&rot(&y, 1)) > 1e-3);
    }

    #[test]
    fn parameter_counts_are_matched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eq = Encoder::new(EncoderConfig::default(), &mut rng).unwrap();
        let plain = Encoder::new(
            EncoderConfig {
                equivariant: false,
                ..EncoderConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let (a, b) = (eq.num_params() as f64, plain.num_params() as f64);
        assert!((a - b).abs() / a.max(b) < 0.15, "{a} vs {b}");
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            input_size: 24,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let shallow = EncoderConfig {
            input_size: 64,
            blocks: 2,
            ..EncoderConfig::default()
        };
        assert!(shallow.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::new(EncoderConfig::default(), &mut rng).unwrap();
        assert!(enc.encode_tensor(&Tensor::<f64>::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            input_size: 16,
            base_channels: 2,
            blocks: 2,
            out_channels: 3,
            ..EncoderConfig::default()
        };
        for equivariant in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let enc = Encoder::new(EncoderConfig { equivariant, ..cfg }, &mut rng).unwrap();
            let x = rand_t(&mut rng, &[1, 16, 16]);
            let probe = rand_t(&mut rng, &[3, 8, 8]);
            let params: Vec<Tensor<f64>> = enc.params().into_iter().map(|(_, t)| t.clone()).collect();
            let report = i2i_tensor::grad_check(
                |t, v| {
                    let bound = enc.bind_leaves(v.to_vec()).map_err(unwrap_tensor)?;
                    let y = enc.encode(&bound, t.constant(x.clone())).map_err(unwrap_tensor)?;
                    Ok(y.mul(t.constant(probe.clone()))?.sum())
                },
                &params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "equivariant={equivariant}: {report:?}");
        }
    }

    fn unwrap_tensor(e: Error) -> i2i_tensor::TensorError {
        match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }
}

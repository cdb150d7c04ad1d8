//! Pose and classification heads.
//!
//! The pose head reads a `[60, 7]` group signal: column 0 holds one logit per
//! group element, columns 1..7 a 6D rotation offset `(a, b)` per element. The
//! prediction is `M(g) * gram_schmidt(offset[g])` at the most likely `g`.

use std::rc::Rc;

use i2i_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::encoder::uniform_fan_in;
use crate::error::{Error, Result};
use crate::groupconv::{group_pool, PoolMode};
use crate::icogroup::IcoGroup;
use crate::rotations::{
    add, cross, dot, gram_schmidt_6d, mat_mul, norm, procrustes_9d, scale, sub, svd3, transpose,
    Mat3, Rotation, Vec3, PROCRUSTES_EPS,
};

/// Channels of the pose group signal: one logit plus a 6D offset.
pub const POSE_CHANNELS: usize = 7;
pub const DEFAULT_LAMBDA: f64 = 100.0;

/// 6D encoding of a rotation: its first two columns.
pub fn to_6d(r: &Rotation) -> [f64; 6] {
    let m = r.matrix();
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

fn mat_from_tensor<T: Scalar>(t: &Tensor<T>) -> Mat3 {
    let d = t.data();
    std::array::from_fn(|i| std::array::from_fn(|j| d[i * 3 + j].as_f64()))
}

fn mat_to_tensor<T: Scalar>(m: &Mat3) -> Tensor<T> {
    Tensor::from_fn(&[3, 3], |i| T::of(m[i / 3][i % 3]))
}

fn col(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

/// Gram-Schmidt map from a 6-element `[a, b]` to a `[3, 3]` rotation matrix.
pub fn gram_schmidt_var<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let v = x.value();
    if v.len() != 6 {
        return Err(Error::ShapeMismatch(format!("6D input has shape {:?}", v.shape())));
    }
    let d: Vec<f64> = v.to_f64();
    let (a, b) = ([d[0], d[1], d[2]], [d[3], d[4], d[5]]);
    let r = gram_schmidt_6d(a, b)?;
    let out = mat_to_tensor(r.matrix());
    Ok(x.tape().custom(
        &[x],
        out,
        Box::new(move |g, ins, out, _| {
            let gm = mat_from_tensor(g);
            let m = mat_from_tensor(out);
            let (c1, c2) = (col(&m, 0), col(&m, 1));
            let (g1, g2, g3) = (col(&gm, 0), col(&gm, 1), col(&gm, 2));
            let na = norm(a);
            let bp = sub(b, scale(c1, dot(c1, b)));
            let nb = norm(bp);
            // c3 = c1 x c2
            let mut gc1 = add(g1, cross(c2, g3));
            let gc2 = add(g2, cross(g3, c1));
            // c2 = b' / |b'|
            let gbp = scale(sub(gc2, scale(c2, dot(c2, gc2))), 1.0 / nb);
            // b' = b - (c1 . b) c1
            let gb = sub(gbp, scale(c1, dot(c1, gbp)));
            gc1 = sub(gc1, add(scale(gbp, dot(c1, b)), scale(b, dot(c1, gbp))));
            // c1 = a / |a|
            let ga = scale(sub(gc1, scale(c1, dot(c1, gc1))), 1.0 / na);
            let flat = [ga[0], ga[1], ga[2], gb[0], gb[1], gb[2]];
            vec![Some(Tensor::from_fn(ins[0].shape(), |i| T::of(flat[i])))]
        }),
    ))
}

/// Special-orthogonal polar factor of a 9-element input read as a row-major
/// `3 x 3` matrix, returned as `[3, 3]`.
pub fn procrustes_var<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let v = x.value();
    if v.len() != 9 {
        return Err(Error::ShapeMismatch(format!("9D input has shape {:?}", v.shape())));
    }
    let m = mat_from_tensor(&v);
    let r = procrustes_9d(&m)?;
    let rm = *r.matrix();
    let svd = svd3(&m);
    let sign = crate::rotations::det(&mat_mul(&svd.u, &transpose(&svd.v))).signum();
    let lam = [svd.s[0], svd.s[1], sign * svd.s[2]];
    let vmat = svd.v;
    Ok(x.tape().custom(
        &[x],
        mat_to_tensor(&rm),
        Box::new(move |g, ins, _, _| {
            let gr = mat_from_tensor(g);
            let a = mat_mul(&transpose(&vmat), &mat_mul(&transpose(&rm), &mat_mul(&gr, &vmat)));
            let mut k = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let den = lam[i] + lam[j];
                    k[i][j] = if den.abs() > PROCRUSTES_EPS { a[i][j] / den } else { 0.0 };
                }
            }
            let skew: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| k[i][j] - k[j][i]));
            let gm = mat_mul(&rm, &mat_mul(&vmat, &mat_mul(&skew, &transpose(&vmat))));
            vec![Some(Tensor::from_fn(ins[0].shape(), |i| T::of(gm[i / 3][i % 3])))]
        }),
    ))
}

/// Classification target and regression offset for one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub element: usize,
    pub offset: Rotation,
}

impl PoseTarget {
    pub fn new(group: &IcoGroup, truth: &Rotation) -> Self {
        let (element, offset) = group.nearest_element(truth);
        Self { element, offset }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub lambda: f64,
}

/// Classification-then-regression loss on a `[60, 7]` output. Regression is
/// applied only at the target element, so the other offset rows get no
/// gradient from it.
pub fn pose_loss<'t, T: Scalar>(
    out: Var<'t, T>,
    target: &PoseTarget,
    lambda: f64,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let shape = out.shape();
    let rows = match *shape.as_slice() {
        [r, POSE_CHANNELS] => r,
        _ => return Err(Error::ShapeMismatch(format!("pose output {shape:?}, expected [60, 7]"))),
    };
    let logit_idx: Vec<usize> = (0..rows).map(|g| g * POSE_CHANNELS).collect();
    let logits = out.take(Rc::new(logit_idx), &[1, rows])?;
    let cls = logits.softmax_cross_entropy(&[target.element])?;
    let base = target.element * POSE_CHANNELS + 1;
    let offset = out.take(Rc::new((base..base + 6).collect()), &[6])?;
    let pred = gram_schmidt_var(offset)?;
    let truth = out.tape().constant(mat_to_tensor(target.offset.matrix()));
    let reg = pred.frobenius_l2(truth)?;
    let total = cls.add(reg.scale(lambda))?;
    let breakdown = LossBreakdown {
        total: total.value().item().as_f64(),
        cls: cls.value().item().as_f64(),
        reg: reg.value().item().as_f64(),
        lambda,
    };
    Ok((total, breakdown))
}

/// Same loss evaluated in plain f64 arithmetic, without the tape.
pub fn pose_loss_reference(out: &Tensor<f64>, target: &PoseTarget, lambda: f64) -> Result<LossBreakdown> {
    let d = out.data();
    let rows = d.len() / POSE_CHANNELS;
    let logits: Vec<f64> = (0..rows).map(|g| d[g * POSE_CHANNELS]).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    let cls = lse - logits[target.element];
    let o = &d[target.element * POSE_CHANNELS + 1..][..6];
    let r = gram_schmidt_6d([o[0], o[1], o[2]], [o[3], o[4], o[5]])?;
    let reg = crate::rotations::frobenius_dist2(r.matrix(), target.offset.matrix());
    Ok(LossBreakdown {
        total: cls + lambda * reg,
        cls,
        reg,
        lambda,
    })
}

/// `M(g) * gram_schmidt(offset[g])` at the first maximal logit.
pub fn predict_rotation<T: Scalar>(out: &Tensor<T>, group: &IcoGroup) -> Result<Rotation> {
    if out.shape() != [group.len(), POSE_CHANNELS] {
        return Err(Error::ShapeMismatch(format!("pose output {:?}", out.shape())));
    }
    let d = out.data();
    let mut best = 0;
    for g in 1..group.len() {
        if d[g * POSE_CHANNELS] > d[best * POSE_CHANNELS] {
            best = g;
        }
    }
    let o: Vec<f64> = d[best * POSE_CHANNELS + 1..][..6].iter().map(|v| v.as_f64()).collect();
    let offset = gram_schmidt_6d([o[0], o[1], o[2]], [o[3], o[4], o[5]])?;
    Ok(group.element(best).compose(&offset))
}

/// Output that a perfect model would emit for `truth`: logit `peak` at the
/// nearest element, zero elsewhere, and the exact offset in every row.
pub fn ideal_output(group: &IcoGroup, truth: &Rotation, peak: f64) -> Tensor<f64> {
    let t = PoseTarget::new(group, truth);
    let six = to_6d(&t.offset);
    Tensor::from_fn(&[group.len(), POSE_CHANNELS], |i| {
        let (g, c) = (i / POSE_CHANNELS, i % POSE_CHANNELS);
        match c {
            0 if g == t.element => peak,
            0 => 0.0,
            _ => six[c - 1],
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    GramSchmidt,
    Procrustes,
}

impl BaselineKind {
    pub fn outputs(self) -> usize {
        match self {
            BaselineKind::GramSchmidt => 6,
            BaselineKind::Procrustes => 9,
        }
    }
}

/// Direct rotation regression from a flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHead {
    pub kind: BaselineKind,
    /// `[outputs, d]`.
    pub weight: Tensor<f64>,
    /// `[outputs]`, initialized to the identity rotation.
    pub bias: Tensor<f64>,
}

impl BaselineHead {
    pub fn new<R: Rng + ?Sized>(kind: BaselineKind, features: usize, rng: &mut R) -> Self {
        let out = kind.outputs();
        let weight = uniform_fan_in(rng, &[out, features], features, 0.1);
        let bias = match kind {
            BaselineKind::GramSchmidt => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            BaselineKind::Procrustes => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        Self {
            kind,
            weight,
            bias: Tensor::from_vec(vec![out], bias).expect("sized"),
        }
    }

    /// Rotation matrix `[3, 3]` from features `[d]`, given bound weight and bias.
    pub fn forward<'t, T: Scalar>(
        &self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        features: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let d = features.value().len();
        let raw = features.reshape(&[1, d])?.linear(weight, Some(bias))?;
        match self.kind {
            BaselineKind::GramSchmidt => gram_schmidt_var(raw),
            BaselineKind::Procrustes => procrustes_var(raw),
        }
    }

    /// Squared Frobenius distance between the predicted and true matrices.
    pub fn loss<'t, T: Scalar>(pred: Var<'t, T>, truth: &Rotation) -> Result<Var<'t, T>> {
        let t = pred.tape().constant(mat_to_tensor(truth.matrix()));
        Ok(pred.frobenius_l2(t)?)
    }
}

/// Reads a `[3, 3]` tensor as a rotation.
pub fn rotation_from_tensor<T: Scalar>(t: &Tensor<T>) -> Rotation {
    Rotation::from_matrix(mat_from_tensor(t))
}

/// Average-pools a `[60, classes]` group signal into `[1, classes]` logits.
pub fn class_logits<'t, T: Scalar>(sig: Var<'t, T>) -> Result<Var<'t, T>> {
    let pooled = group_pool(sig, PoolMode::Avg)?;
    let c = pooled.value().len();
    Ok(pooled.reshape(&[1, c])?)
}

/// Softmax of the average-pooled group signal.
pub fn classify<T: Scalar>(sig: &Tensor<T>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let logits = class_logits(tape.constant(sig.clone()))?;
    Ok(softmax(&logits.value().to_f64()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icogroup::build_group;
    use crate::rotations::{geodesic_angle, random_rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn unwrap_tensor(e: Error) -> i2i_tensor::TensorError {
        match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn perfect_output_has_zero_loss() {
        let g = build_group().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_rotation(&mut rng);
        let target = PoseTarget::new(&g, &truth);
        let out = ideal_output(&g, &truth, 50.0);
        let tape = Tape::new();
        let (_, b) = pose_loss(tape.constant(out), &target, DEFAULT_LAMBDA).unwrap();
        assert!(b.cls < 1e-6 && b.reg < 1e-12, "{b:?}");
    }

    #[test]
    fn uniform_logits_give_log_sixty() {
        let g = build_group().unwrap();
        let target = PoseTarget::new(&g, &Rotation::identity());
        let mut out = Tensor::zeros(&[60, 7]);
        for r in 0..60 {
            out.data_mut()[r * 7 + 1] = 1.0;
            out.data_mut()[r * 7 + 5] = 1.0;
        }
        let tape = Tape::new();
        let (_, b) = pose_loss(tape.constant(out), &target, DEFAULT_LAMBDA).unwrap();
        assert!((b.cls - 60f64.ln()).abs() < 1e-12);
        assert!((b.cls - 4.0943).abs() < 1e-4);
        assert!(b.reg < 1e-20);
    }

    #[test]
    fn loss_matches_reference() {
        let g = build_group().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let truth = random_rotation(&mut rng);
            let target = PoseTarget::new(&g, &truth);
            let out = rand_t(&mut rng, &[60, 7]);
            let tape = Tape::new();
            let (total, b) = pose_loss(tape.constant(out.clone()), &target, 100.0).unwrap();
            let r = pose_loss_reference(&out, &target, 100.0).unwrap();
            assert!((b.total - r.total).abs() < 1e-9 && (b.cls - r.cls).abs() < 1e-9);
            assert!((b.reg - r.reg).abs() < 1e-9);
            assert!((b.total - (b.cls + b.lambda * b.reg)).abs() < 1e-9);
            assert_eq!(total.value().item(), b.total);
        }
    }

    #[test]
    fn regression_touches_only_target_row() {
        let g = build_group().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_rotation(&mut rng);
        let target = PoseTarget::new(&g, &truth);
        let tape = Tape::new();
        let out = tape.param(rand_t(&mut rng, &[60, 7]));
        let (loss, _) = pose_loss(out, &target, 100.0).unwrap();
        let grad = tape.backward(loss).unwrap().get_or_zeros(out);
        for r in 0..60 {
            for c in 1..7 {
                if r != target.element {
                    assert_eq!(grad.data()[r * 7 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn prediction_examples() {
        let g = build_group().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_rotation(&mut rng);
        let t = PoseTarget::new(&g, &truth);
        let mut out = ideal_output(&g, &truth, 10.0);
        for r in 0..60 {
            out.data_mut()[r * 7 + 1..r * 7 + 7].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
        let pred = predict_rotation(&out, &g).unwrap();
        assert!(geodesic_angle(&pred, g.element(t.element)) < 1e-12);
        let err = geodesic_angle(&pred, &truth);
        assert!((err - geodesic_angle(&t.offset, &Rotation::identity())).abs() < 1e-9);
        for _ in 0..10_000 {
            let truth = random_rotation(&mut rng);
            let pred = predict_rotation(&ideal_output(&g, &truth, 1.0), &g).unwrap();
            assert!(geodesic_angle(&pred, &truth) < 1e-9);
        }
    }

    #[test]
    fn gram_schmidt_and_procrustes_forward() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let r = gram_schmidt_var(x).unwrap();
        assert_eq!(rotation_from_tensor(&r.value()), Rotation::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = random_rotation(&mut rng);
        let flat: Vec<f64> = rot.matrix().iter().flatten().copied().collect();
        let p = procrustes_var(tape.constant(Tensor::from_vec(vec![9], flat).unwrap())).unwrap();
        assert!(geodesic_angle(&rotation_from_tensor(&p.value()), &rot) < 1e-10);
        let zero = tape.constant(Tensor::zeros(&[6]));
        assert!(matches!(gram_schmidt_var(zero), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn baseline_heads_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [BaselineKind::GramSchmidt, BaselineKind::Procrustes] {
            let mut head = BaselineHead::new(kind, 5, &mut rng);
            head.weight = Tensor::zeros(head.weight.shape());
            let tape = Tape::<f64>::new();
            let pred = head
                .forward(
                    tape.constant(head.weight.clone()),
                    tape.constant(head.bias.clone()),
                    tape.constant(rand_t(&mut rng, &[5])),
                )
                .unwrap();
            assert!(geodesic_angle(&rotation_from_tensor(&pred.value()), &Rotation::identity()) < 1e-12);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = build_group().unwrap();
        // Gram-Schmidt and Procrustes primitives
        let probe = rand_t(&mut rng, &[3, 3]);
        let x6 = rand_t(&mut rng, &[6]);
        let rep = i2i_tensor::grad_check(
            |t, v| Ok(gram_schmidt_var(v[0]).map_err(unwrap_tensor)?.mul(t.constant(probe.clone()))?.sum()),
            &[x6],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "gram-schmidt {rep:?}");
        for _ in 0..5 {
            let x9 = rand_t(&mut rng, &[9]);
            let rep = i2i_tensor::grad_check(
                |t, v| Ok(procrustes_var(v[0]).map_err(unwrap_tensor)?.mul(t.constant(probe.clone()))?.sum()),
                &[x9],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed, "procrustes {rep:?}");
        }
        // full pose loss
        let truth = random_rotation(&mut rng);
        let target = PoseTarget::new(&g, &truth);
        let out = rand_t(&mut rng, &[60, 7]);
        let rep = i2i_tensor::grad_check(
            |_, v| Ok(pose_loss(v[0], &target, 100.0).map_err(unwrap_tensor)?.0),
            &[out],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "pose loss {rep:?}");
        // baseline heads with their losses
        for kind in [BaselineKind::GramSchmidt, BaselineKind::Procrustes] {
            let head = BaselineHead::new(kind, 4, &mut rng);
            let feats = rand_t(&mut rng, &[4]);
            let rep = i2i_tensor::grad_check(
                |_, v| {
                    let pred = head.forward(v[0], v[1], v[2]).map_err(unwrap_tensor)?;
                    BaselineHead::loss(pred, &truth).map_err(unwrap_tensor)
                },
                &[head.weight.clone(), head.bias.clone(), feats],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed, "{kind:?} {rep:?}");
        }
    }

    #[test]
    fn classification_examples() {
        let g = build_group().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sig = Tensor::from_fn(&[60, 3], |i| if i % 3 == 1 { 5.0 } else { 0.0 });
        let p = classify(&sig).unwrap();
        assert!(p[1] > p[0] && p[1] > p[2]);
        let sig = rand_t(&mut rng, &[60, 4]);
        let p = classify(&sig).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for h in 0..60 {
            let perm = Tensor::from_fn(&[60, 4], |i| sig.data()[g.mul(h, i / 4) * 4 + i % 4]);
            let q = classify(&perm).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

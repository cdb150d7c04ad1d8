//! Self-check of the numerical invariants: group axioms, convolution oracle,
//! equivariance, gradients, rotation contracts, quantization constants, and
//! file round trips.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use i2i_tensor::{grad_check, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_dataset, Dataset, RenderSettings, ShapeClass, ShapeSpec};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Error;
use crate::groupconv::{brute_force_conv, group_pool, ico_conv, ico_conv_vector, pad_filter, PoolMode};
use crate::harness::checkpoint;
use crate::harness::config::{Task, Variant};
use crate::harness::model::{Model, ModelSpec};
use crate::heads::{gram_schmidt_var, ideal_output, pose_loss, predict_rotation, procrustes_var, BaselineHead, BaselineKind, PoseTarget};
use crate::icogroup::{
    build_group, quantization_stats, IcoGroup, COVERING_RADIUS_DEG, GROUP_ORDER, MEDIAN_QUANTIZATION_DEG,
    QUANTIZATION_TOL_DEG, SUBMESH_SIZE,
};
use crate::projection::{build_plan, Scheme, DEFAULT_COVERAGE, DEFAULT_SIGMA, VISIBLE_SUBMESH, VISIBLE_VERTICES};
use crate::rotations::{det, geodesic_angle, gram_schmidt_6d, procrustes_9d, random_rotation, SymmetrySpec};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::ShapeMismatch {
            op: "verify",
            detail: other.to_string(),
        },
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Multiplication table closure, associativity, inverses, and orders.
pub fn check_group(group: &IcoGroup) -> Check {
    check("group axioms", || {
        let n = group.len();
        if n != GROUP_ORDER {
            return Err(format!("{n} elements"));
        }
        let mut closure = 0.0f64;
        for g in 0..n {
            for h in 0..n {
                let prod = group.element(g).compose(group.element(h));
                let k = group.mul(g, h);
                if k >= n {
                    return Err(format!("product {g}*{h} = {k} outside the group"));
                }
                closure = closure.max(geodesic_angle(&prod, group.element(k)));
            }
        }
        if closure > 1e-9 {
            return Err(format!("closure error {closure:e}"));
        }
        for a in 0..n {
            for b in 0..n {
                let ab = group.mul(a, b);
                for c in 0..n {
                    if group.mul(ab, c) != group.mul(a, group.mul(b, c)) {
                        return Err(format!("associativity fails at ({a}, {b}, {c})"));
                    }
                }
            }
        }
        for g in 0..n {
            if group.mul(g, group.inv(g)) != 0 || group.mul(group.inv(g), g) != 0 {
                return Err(format!("inverse of {g}"));
            }
        }
        let mut spectrum = [0usize; 6];
        for g in 0..n {
            let o = group.order(g);
            if o > 5 {
                return Err(format!("element {g} has order {o}"));
            }
            spectrum[o] += 1;
        }
        if spectrum[1..] != [1, 15, 20, 0, 24] {
            return Err(format!("order spectrum {spectrum:?}"));
        }
        Ok(format!("60 elements, closure error {closure:.1e}, orders 1:1 2:15 3:20 5:24"))
    })
}

/// Visible-set convolution against the zero-padded direct sum.
pub fn check_conv_oracle(group: &IcoGroup, trials: usize, seed: u64) -> Check {
    check("group convolution oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = build_plan(group.quotient(), 8, 8, DEFAULT_SIGMA, DEFAULT_COVERAGE, Scheme::Submesh42)
            .map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
            let f = rand_t(&mut rng, &[SUBMESH_SIZE, n]);
            let psi = rand_t(&mut rng, &[plan.num_visible(), m, n]);
            let tape = Tape::new();
            let fast = ico_conv(tape.constant(f.clone()), tape.constant(psi.clone()), group, &plan.visible)
                .map_err(|e| e.to_string())?;
            let full = pad_filter(&psi, &plan.visible).map_err(|e| e.to_string())?;
            let slow = brute_force_conv(&f, &full, group).map_err(|e| e.to_string())?;
            worst = worst.max(max_diff(fast.value().data(), slow.data()));
        }
        if worst < 1e-10 {
            Ok(format!("{trials} pairs, max diff {worst:.1e}"))
        } else {
            Err(format!("max diff {worst:e}"))
        }
    })
}

/// Rotating the feature sphere by each element permutes the output.
pub fn check_layer_equivariance(group: &IcoGroup, seed: u64) -> Check {
    check("group convolution equivariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = build_plan(group.quotient(), 8, 8, DEFAULT_SIGMA, DEFAULT_COVERAGE, Scheme::Submesh42)
            .map_err(|e| e.to_string())?;
        let (m, n) = (3, 4);
        let f = rand_t(&mut rng, &[SUBMESH_SIZE, n]);
        let psi = rand_t(&mut rng, &[plan.num_visible(), m, n]);
        let conv = |f: &Tensor<f64>| -> Result<Vec<f64>, String> {
            let tape = Tape::new();
            let out = ico_conv(tape.constant(f.clone()), tape.constant(psi.clone()), group, &plan.visible)
                .map_err(|e| e.to_string())?;
            Ok(out.value().data().to_vec())
        };
        let base = conv(&f)?;
        let mut worst = 0.0f64;
        for h in 0..group.len() {
            let hi = group.inv(h);
            let shifted = Tensor::from_fn(&[SUBMESH_SIZE, n], |i| f.data()[group.act(hi, i / n) * n + i % n]);
            let out = conv(&shifted)?;
            let expect: Vec<f64> = (0..group.len() * m)
                .map(|i| base[group.mul(hi, i / m) * m + i % m])
                .collect();
            worst = worst.max(max_diff(&out, &expect));
        }
        if worst < 1e-10 {
            Ok(format!("all 60 elements, max diff {worst:.1e}"))
        } else {
            Err(format!("max diff {worst:e}"))
        }
    })
}

/// Largest deviation between the output for a half-turned image and the
/// output permuted by the half turn about the viewing axis, in f64.
pub fn half_turn_deviation(model: &Model, images: &[Vec<f32>]) -> crate::error::Result<f64> {
    let group = model.group();
    let c = group.half_turn_z();
    let s = model.spec.input_size;
    let m = model.spec.outputs;
    let mut worst = 0.0f64;
    for img in images {
        let turned: Vec<f32> = (0..s * s).map(|i| img[(s - 1 - i / s) * s + (s - 1 - i % s)]).collect();
        let a = model.output::<f64>(img)?;
        let b = model.output::<f64>(&turned)?;
        if a.shape() != [group.len(), m] {
            return Err(Error::ShapeMismatch(format!("output {:?} is not a group signal", a.shape())));
        }
        let expect: Vec<f64> = (0..group.len() * m)
            .map(|i| a.data()[group.mul(c, i / m) * m + i % m])
            .collect();
        worst = worst.max(max_diff(b.data(), &expect));
    }
    Ok(worst)
}

/// Untrained full model: half-turned image permutes the group signal.
pub fn check_end_to_end(group: Arc<IcoGroup>, images: usize, seed: u64) -> Check {
    check("end-to-end half-turn equivariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec {
            task: Task::Pose,
            variant: Variant::I2i,
            outputs: 7,
            input_size: 32,
            in_channels: 1,
            base_channels: 4,
            blocks: 3,
            feature_n: 4,
            sigma: DEFAULT_SIGMA,
            coverage: DEFAULT_COVERAGE,
        };
        let model = Model::new(spec, group, &mut rng).map_err(|e| e.to_string())?;
        let imgs: Vec<Vec<f32>> = (0..images)
            .map(|_| (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let dev = half_turn_deviation(&model, &imgs).map_err(|e| e.to_string())?;
        if dev < 1e-8 {
            Ok(format!("{images} images, max deviation {dev:.1e}"))
        } else {
            Err(format!("max deviation {dev:e}"))
        }
    })
}

/// Quarter-turn deviation of the encoder and of its plain counterpart.
pub fn encoder_quarter_turn_deviation(equivariant: bool, seed: u64) -> crate::error::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        base_channels: 4,
        out_channels: 6,
        equivariant,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, &mut rng)?;
    let x = rand_t(&mut rng, &[1, 32, 32]);
    let tape = Tape::new();
    let y = enc.encode_tensor(&x)?;
    let mut worst = 0.0f64;
    for k in 1..4 {
        let xr = (*tape.constant(x.clone()).rotate90(k)?.value()).clone();
        let yr = enc.encode_tensor(&xr)?;
        let expect = tape.constant(y.clone()).rotate90(k)?;
        worst = worst.max(max_diff(yr.data(), expect.value().data()));
    }
    Ok(worst)
}

pub fn check_encoder(seed: u64) -> Check {
    check("encoder quarter-turn equivariance", || {
        let eq = encoder_quarter_turn_deviation(true, seed).map_err(|e| e.to_string())?;
        let plain = encoder_quarter_turn_deviation(false, seed).map_err(|e| e.to_string())?;
        if eq < 1e-10 && plain > 1e-3 {
            Ok(format!("equivariant {eq:.1e}, plain control {plain:.2e}"))
        } else {
            Err(format!("equivariant {eq:e}, plain control {plain:e}"))
        }
    })
}

/// Central-difference checks of every differentiable building block.
pub fn check_gradients(group: &IcoGroup, seed: u64) -> Check {
    check("gradient checks", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut count = 0;
        let mut run = |name: &str,
                       f: &dyn for<'t> Fn(
            &'t Tape<f64>,
            &[i2i_tensor::Var<'t, f64>],
        ) -> i2i_tensor::Result<i2i_tensor::Var<'t, f64>>,
                       params: &[Tensor<f64>]|
         -> Result<(), String> {
            let rep = grad_check(f, params, GRAD_EPS, GRAD_TOL).map_err(|e| format!("{name}: {e}"))?;
            worst = worst.max(rep.max_rel_err);
            count += 1;
            if rep.passed {
                Ok(())
            } else {
                Err(format!("{name}: relative error {:e} at {:?}", rep.max_rel_err, rep.worst))
            }
        };
        let probe = |rng: &mut ChaCha8Rng, shape: &[usize]| rand_t(rng, shape);

        let p = probe(&mut rng, &[3, 5]);
        run("add/sub/mul/scale", &|t, v| {
            Ok(v[0].add(v[1])?.mul(v[0])?.sub(v[1].scale(0.5))?.add_scalar(0.3).mul(t.constant(p.clone()))?.sum().mean())
        }, &[probe(&mut rng, &[3, 5]), probe(&mut rng, &[3, 5])])?;
        let p = probe(&mut rng, &[3, 4]);
        run("matmul", &|t, v| Ok(v[0].matmul(v[1])?.mul(t.constant(p.clone()))?.sum()), &[
            probe(&mut rng, &[3, 5]),
            probe(&mut rng, &[5, 4]),
        ])?;
        run("linear", &|t, v| Ok(v[0].linear(v[1], Some(v[2]))?.mul(t.constant(p.clone()))?.sum()), &[
            probe(&mut rng, &[3, 5]),
            probe(&mut rng, &[4, 5]),
            probe(&mut rng, &[4]),
        ])?;
        let pc = probe(&mut rng, &[2, 2, 3, 3]);
        run("conv2d/relu/pool", &|t, v| {
            Ok(v[0].conv2d(v[1], 1, 1)?.relu().avg_pool2()?.mul(t.constant(pc.clone()))?.sum())
        }, &[probe(&mut rng, &[2, 2, 6, 6]), probe(&mut rng, &[2, 2, 3, 3])])?;
        let pr = probe(&mut rng, &[2, 4]);
        run("rotate/permute/mean/take", &|t, v| {
            Ok(v[0].rotate90(1)?
                .permute(&[0, 2, 1])?
                .mean_axis(2)?
                .gather_rows(&[1, 0])?
                .mul(t.constant(pr.clone()))?
                .sum()
                )
        }, &[probe(&mut rng, &[2, 4, 4])])?;
        run("cross-entropy/frobenius", &|t, v| {
            let ce = v[0].softmax_cross_entropy(&[2, 0])?;
            let fr = v[1].frobenius_l2(t.constant(pr.clone()))?;
            ce.add(fr)
        }, &[probe(&mut rng, &[2, 4]), probe(&mut rng, &[2, 4])])?;

        let plan = build_plan(group.quotient(), 8, 8, DEFAULT_SIGMA, DEFAULT_COVERAGE, Scheme::Submesh42)
            .map_err(|e| e.to_string())?;
        let pp = probe(&mut rng, &[plan.num_visible(), 2, 3]);
        run("projection", &|t, v| {
            Ok(plan.project_var(v[0], 2, Some(3)).map_err(to_tensor_err)?.mul(t.constant(pp.clone()))?.sum())
        }, &[probe(&mut rng, &[6, 8, 8])])?;
        let pg = probe(&mut rng, &[60, 2]);
        run("ico_conv", &|t, v| {
            Ok(ico_conv(v[0], v[1], group, &plan.visible).map_err(to_tensor_err)?.mul(t.constant(pg.clone()))?.sum())
        }, &[probe(&mut rng, &[SUBMESH_SIZE, 3]), probe(&mut rng, &[plan.num_visible(), 2, 3])])?;
        run("ico_conv_vector", &|t, v| {
            Ok(ico_conv_vector(v[0], v[1], group, &plan.visible, 2)
                .map_err(to_tensor_err)?
                .mul(t.constant(pg.clone()))?
                .sum()
                )
        }, &[probe(&mut rng, &[SUBMESH_SIZE, 6]), probe(&mut rng, &[plan.num_visible(), 3])])?;
        run("group pooling", &|_, v| {
            let a = group_pool(v[0], PoolMode::Avg).map_err(to_tensor_err)?;
            let m = group_pool(v[0], PoolMode::Max).map_err(to_tensor_err)?;
            Ok(a.add(m)?.mul(a)?.sum())
        }, &[probe(&mut rng, &[60, 3])])?;

        let truth = random_rotation(&mut rng);
        let target = PoseTarget::new(group, &truth);
        run("pose loss", &|_, v| Ok(pose_loss(v[0], &target, 100.0).map_err(to_tensor_err)?.0), &[probe(
            &mut rng,
            &[60, 7],
        )])?;
        let p3 = probe(&mut rng, &[3, 3]);
        run("gram-schmidt", &|t, v| Ok(gram_schmidt_var(v[0]).map_err(to_tensor_err)?.mul(t.constant(p3.clone()))?.sum()), &[
            probe(&mut rng, &[6]),
        ])?;
        run("procrustes", &|t, v| Ok(procrustes_var(v[0]).map_err(to_tensor_err)?.mul(t.constant(p3.clone()))?.sum()), &[
            probe(&mut rng, &[9]),
        ])?;
        for kind in [BaselineKind::GramSchmidt, BaselineKind::Procrustes] {
            let head = BaselineHead::new(kind, 5, &mut rng);
            run("baseline head", &|_, v| {
                let pred = head.forward(v[0], v[1], v[2]).map_err(to_tensor_err)?;
                BaselineHead::loss(pred, &truth).map_err(to_tensor_err)
            }, &[head.weight.clone(), head.bias.clone(), probe(&mut rng, &[5])])?;
        }
        Ok(format!("{count} functions, max relative error {worst:.1e}"))
    })
}

/// Orthonormality of 6D and 9D outputs and the quantize-offset-compose round trip.
pub fn check_rotation_contracts(group: &IcoGroup, samples: usize, round_trips: usize, seed: u64) -> Check {
    check("rotation representations", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let r = gram_schmidt_6d([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| e.to_string())?;
            worst = worst.max(r.orthonormality_error()).max((det(r.matrix()) - 1.0).abs());
            let m: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let r = procrustes_9d(&m).map_err(|e| e.to_string())?;
            worst = worst.max(r.orthonormality_error()).max((det(r.matrix()) - 1.0).abs());
        }
        if worst > 1e-10 {
            return Err(format!("orthonormality error {worst:e}"));
        }
        let mut trip = 0.0f64;
        for _ in 0..round_trips {
            let truth = random_rotation(&mut rng);
            let back = predict_rotation(&ideal_output(group, &truth, 1.0), group).map_err(|e| e.to_string())?;
            trip = trip.max(geodesic_angle(&back, &truth));
        }
        if trip > 1e-9 {
            return Err(format!("round trip error {trip:e} rad"));
        }
        Ok(format!("{samples} 6D and 9D inputs within {worst:.1e}; round trip {trip:.1e} rad"))
    })
}

/// Monte-Carlo covering radius and median quantization angle for two seeds
/// against the stored constants.
pub fn check_quantization(group: &IcoGroup, samples: usize) -> (Check, f64, f64) {
    let mut measured = (f64::NAN, f64::NAN);
    let c = check("quantization statistics", || {
        let mut detail = String::new();
        for seed in [1u64, 2] {
            let q = quantization_stats(group, samples, seed);
            let (rho, med) = (q.covering_radius.to_degrees(), q.median_angle.to_degrees());
            if seed == 1 {
                measured = (rho, med);
            }
            let _ = write!(detail, "seed {seed}: rho {rho:.3} median {med:.3} deg; ");
            if (rho - COVERING_RADIUS_DEG).abs() > QUANTIZATION_TOL_DEG || (med - MEDIAN_QUANTIZATION_DEG).abs() > QUANTIZATION_TOL_DEG
            {
                return Err(detail);
            }
        }
        Ok(detail.trim_end_matches("; ").to_string())
    });
    (c, measured.0, measured.1)
}

/// Dataset and checkpoint bytes survive a decode/encode cycle unchanged.
pub fn check_serialization(group: Arc<IcoGroup>) -> Check {
    check("serialization round trip", || {
        let specs = vec![ShapeSpec::generate(ShapeClass::LBracket, 1)];
        let settings = RenderSettings {
            height: 8,
            width: 8,
            samples: 2_000,
            ..RenderSettings::default()
        };
        let ds = make_dataset(&specs, 3, 1, SymmetrySpec::None, settings).map_err(|e| e.to_string())?;
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes, std::path::Path::new("<memory>")).map_err(|e| e.to_string())?;
        if back.to_bytes() != bytes {
            return Err("dataset bytes changed".into());
        }
        let spec = ModelSpec {
            task: Task::Pose,
            variant: Variant::I2i,
            outputs: 7,
            input_size: 32,
            in_channels: 1,
            base_channels: 2,
            blocks: 3,
            feature_n: 2,
            sigma: DEFAULT_SIGMA,
            coverage: DEFAULT_COVERAGE,
        };
        let model = Model::new(spec, group.clone(), &mut ChaCha8Rng::seed_from_u64(3)).map_err(|e| e.to_string())?;
        let (text, blob) = (checkpoint::manifest(&model), checkpoint::weights(&model));
        let again = checkpoint::decode(&text, &blob, group, std::path::Path::new("<memory>")).map_err(|e| e.to_string())?;
        if checkpoint::manifest(&again) != text || checkpoint::weights(&again) != blob {
            return Err("checkpoint bytes changed".into());
        }
        Ok(format!("dataset {} bytes, checkpoint {} bytes", bytes.len(), blob.len()))
    })
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub covering_radius_deg: f64,
    pub median_quantization_deg: f64,
    pub visible_submesh: usize,
    pub visible_vertices: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "[{}] {} ({:.2}s): {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.seconds,
                c.detail
            );
        }
        let _ = writeln!(
            s,
            "covering radius {:.4} deg (stored {COVERING_RADIUS_DEG}), median quantization {:.4} deg (stored {MEDIAN_QUANTIZATION_DEG})",
            self.covering_radius_deg, self.median_quantization_deg
        );
        let _ = writeln!(
            s,
            "visible points: {} of 42 submesh, {} of 12 vertices",
            self.visible_submesh, self.visible_vertices
        );
        let _ = writeln!(s, "{}", if self.passed() { "all checks passed" } else { "verification FAILED" });
        s
    }
}

/// Runs every check against `group`.
pub fn verify_group(group: Arc<IcoGroup>) -> VerifyReport {
    let mut checks = vec![
        check_group(&group),
        check_conv_oracle(&group, 100, 11),
        check_layer_equivariance(&group, 12),
        check_end_to_end(group.clone(), 20, 13),
        check_encoder(14),
        check_gradients(&group, 15),
        check_rotation_contracts(&group, 100_000, 10_000, 16),
    ];
    let (q, rho, med) = check_quantization(&group, 200_000);
    checks.push(q);
    checks.push(check_serialization(group.clone()));
    let count = |s| {
        build_plan(group.quotient(), 8, 8, DEFAULT_SIGMA, DEFAULT_COVERAGE, s).map_or(0, |p| p.num_visible())
    };
    let (visible_submesh, visible_vertices) = (count(Scheme::Submesh42), count(Scheme::Sparse12));
    checks.push(check("visible-set sizes", || {
        if visible_submesh == VISIBLE_SUBMESH && visible_vertices == VISIBLE_VERTICES {
            Ok(format!("{visible_submesh} submesh, {visible_vertices} vertices"))
        } else {
            Err(format!("{visible_submesh} submesh, {visible_vertices} vertices"))
        }
    }));
    VerifyReport {
        checks,
        covering_radius_deg: rho,
        median_quantization_deg: med,
        visible_submesh,
        visible_vertices,
    }
}

/// Builds the group and runs every check.
pub fn verify() -> VerifyReport {
    match build_group() {
        Ok(g) => verify_group(Arc::new(g)),
        Err(e) => VerifyReport {
            checks: vec![Check {
                name: "group construction",
                passed: false,
                detail: e.to_string(),
                seconds: 0.0,
            }],
            covering_radius_deg: f64::NAN,
            median_quantization_deg: f64::NAN,
            visible_submesh: 0,
            visible_vertices: 0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn individual_checks_pass() {
        let g = Arc::new(build_group().unwrap());
        for c in [
            check_group(&g),
            check_conv_oracle(&g, 5, 1),
            check_layer_equivariance(&g, 2),
            check_end_to_end(g.clone(), 2, 3),
            check_encoder(4),
            check_gradients(&g, 5),
            check_rotation_contracts(&g, 1000, 100, 6),
            check_serialization(g.clone()),
            check_quantization(&g, 200_000).0,
        ] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn full_report_passes_and_reports_degrees() {
        let r = verify();
        assert!(r.passed(), "{}", r.render());
        assert!((r.covering_radius_deg - COVERING_RADIUS_DEG).abs() < QUANTIZATION_TOL_DEG);
    }

    #[test]
    fn corrupted_cayley_entry_fails_closure() {
        let mut g = build_group().unwrap();
        let wrong = (g.mul(7, 9) + 1) % 60;
        g.corrupt_cayley_entry(7, 9, wrong);
        let c = check_group(&g);
        assert!(!c.passed);
        assert!(c.detail.contains("closure"), "{}", c.detail);
    }
}

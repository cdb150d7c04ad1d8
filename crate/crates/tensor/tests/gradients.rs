//! Every primitive's backward rule against central differences (f64, eps 1e-5).

use std::rc::Rc;

use i2i_tensor::{concat, grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu kinks are never straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random linear functional, turns any output into a scalar with nontrivial
/// upstream gradient.
fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_t(rng, shape)
}

macro_rules! check {
    ($name:expr, $params:expr, $f:expr) => {{
        let report = grad_check($f, &$params, EPS, TOL).unwrap();
        assert!(
            report.passed,
            "{}: max rel err {:.3e} at {:?}",
            $name, report.max_rel_err, report.worst
        );
        report
    }};
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[3, 4]);
    let p = probe(&mut rng, &[3, 4]);
    let pc = p.clone();
    check!("add", [a.clone(), b.clone()], move |t, v| {
        v[0].add(v[1])?.mul(t.constant(pc.clone()))?.sum().pipe_ok()
    });
    let pc = p.clone();
    check!("sub", [a.clone(), b.clone()], move |t, v| {
        v[0].sub(v[1])?.mul(t.constant(pc.clone()))?.sum().pipe_ok()
    });
    check!("mul", [a.clone(), b.clone()], |_, v| v[0].mul(v[1]).map(|x| x.sum()));
    let pc = p.clone();
    check!("scale/add_scalar", [a.clone()], move |t, v| {
        v[0].scale(-2.5)
            .add_scalar(0.7)
            .mul(t.constant(pc.clone()))?
            .mean()
            .pipe_ok()
    });
    let r = rand_away_from_zero(&mut rng, &[3, 4]);
    let pc = p.clone();
    check!("relu", [r], move |t, v| {
        v[0].relu().mul(t.constant(pc.clone()))?.sum().pipe_ok()
    });
    check!("frobenius_l2", [a.clone(), b.clone()], |_, v| v[0].frobenius_l2(v[1]));
}

#[test]
fn shape_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&mut rng, &[2, 3, 4]);
    let p = probe(&mut rng, &[4, 2, 3]);
    check!("permute", [x.clone()], move |t, v| {
        v[0].permute(&[2, 0, 1])?.mul(t.constant(p.clone()))?.sum().pipe_ok()
    });
    let p = probe(&mut rng, &[6, 4]);
    check!("reshape", [x.clone()], move |t, v| {
        v[0].reshape(&[6, 4])?.mul(t.constant(p.clone()))?.sum().pipe_ok()
    });
    let p = probe(&mut rng, &[5]);
    check!("take (with repeats)", [x.clone()], move |t, v| {
        v[0].take(Rc::new(vec![0, 5, 5, 23, 11]), &[5])?
            .mul(t.constant(p.clone()))?
            .sum()
            .pipe_ok()
    });
    let m = rand_t(&mut rng, &[5, 3]);
    let p = probe(&mut rng, &[4, 3]);
    check!("gather_rows", [m], move |t, v| {
        v[0].gather_rows(&[4, 0, 4, 2])?
            .mul(t.constant(p.clone()))?
            .sum()
            .pipe_ok()
    });
    let sq = rand_t(&mut rng, &[2, 3, 3]);
    for k in 1..4 {
        let p = probe(&mut rng, &[2, 3, 3]);
        check!("rotate90", [sq.clone()], move |t, v| {
            v[0].rotate90(k)?.mul(t.constant(p.clone()))?.sum().pipe_ok()
        });
    }
    for axis in 0..3 {
        let mut shape = vec![2, 3, 4];
        shape.remove(axis);
        let p = probe(&mut rng, &shape);
        check!("mean_axis", [x.clone()], move |t, v| {
            v[0].mean_axis(axis)?.mul(t.constant(p.clone()))?.sum().pipe_ok()
        });
    }
    let y = rand_t(&mut rng, &[1, 3, 4]);
    let p = probe(&mut rng, &[3, 3, 4]);
    check!("concat", [x, y], move |t, v| {
        concat(&[v[0], v[1]])?.mul(t.constant(p.clone()))?.sum().pipe_ok()
    });
}

#[test]
fn dense_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[3, 5]);
    let b = rand_t(&mut rng, &[5, 2]);
    let bt = rand_t(&mut rng, &[2, 5]);
    let p = probe(&mut rng, &[3, 2]);
    let pc = p.clone();
    check!("matmul", [a.clone(), b], move |t, v| {
        v[0].matmul(v[1])?.mul(t.constant(pc.clone()))?.sum().pipe_ok()
    });
    let pc = p.clone();
    check!("matmul_nt", [a.clone(), bt.clone()], move |t, v| {
        v[0].matmul_nt(v[1])?.mul(t.constant(pc.clone()))?.sum().pipe_ok()
    });
    let bias = rand_t(&mut rng, &[2]);
    let pc = p.clone();
    // Linear layer is the tightest case.
    let report = grad_check(
        move |t, v| v[0].linear(v[1], Some(v[2]))?.mul(t.constant(pc.clone())).map(|x| x.sum()),
        &[a, bt, bias],
        EPS,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "linear: {report:?}");
    let logits = rand_t(&mut rng, &[4, 6]);
    check!("softmax_cross_entropy", [logits], |_, v| {
        v[0].softmax_cross_entropy(&[0, 5, 2, 2])
    });
}

#[test]
fn conv_and_pool_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[2, 6, 6]);
    let w = rand_t(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad, out) in [(1, 1, 6), (2, 1, 3), (1, 0, 4), (2, 0, 2)] {
        let p = probe(&mut rng, &[3, out, out]);
        check!("conv2d", [x.clone(), w.clone()], move |t, v| {
            v[0].conv2d(v[1], stride, pad)?
                .mul(t.constant(p.clone()))?
                .sum()
                .pipe_ok()
        });
    }
    let w1 = rand_t(&mut rng, &[4, 2, 1, 1]);
    let p = probe(&mut rng, &[4, 6, 6]);
    check!("conv2d 1x1", [x.clone(), w1], move |t, v| {
        v[0].conv2d(v[1], 1, 0)?.mul(t.constant(p.clone()))?.sum().pipe_ok()
    });
    let p = probe(&mut rng, &[2, 3, 3]);
    check!("avg_pool2", [x], move |t, v| {
        v[0].avg_pool2()?.mul(t.constant(p.clone()))?.sum().pipe_ok()
    });
}

#[test]
fn tape_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[2, 8, 8]);
    let w = rand_t(&mut rng, &[4, 2, 3, 3]);
    let run = || {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(w.clone());
        let y = xv.conv2d(wv, 1, 1).unwrap().relu().avg_pool2().unwrap().sum();
        tape.backward(y).unwrap().get(wv).unwrap().clone()
    };
    let (g1, g2) = (run(), run());
    assert!(g1
        .data()
        .iter()
        .zip(g2.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> i2i_tensor::Result<Self> {
        Ok(self)
    }
}
impl<T> PipeOk for T {}

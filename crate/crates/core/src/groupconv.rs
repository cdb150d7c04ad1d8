//! Dynamic-filter convolution over I60 and group pooling.
//!
//! A sphere signal is a `[42, c]` table over the submesh, a group signal a
//! `[60, m]` table in canonical element order. The fast path sums only over
//! the visible support of the filter:
//!
//! ```text
//! out[g] = sum over visible v of psi[v] * f[act(g, v)]
//! ```

use std::rc::Rc;

use i2i_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::icogroup::{IcoGroup, SUBMESH_SIZE};

/// Which operand of the per-point product is the matrix.
#[derive(Debug, Clone, Copy)]
enum MatrixSide {
    /// `psi[v]` is `m x n`, `f[p]` an `n`-vector.
    Filter,
    /// `f[p]` holds a row-major `m x n` matrix, `psi[v]` an `n`-vector.
    Sphere,
}

/// `act(g, visible[i])` for every element and visible point, row-major.
fn gather_table(group: &IcoGroup, visible: &[usize]) -> Rc<Vec<usize>> {
    Rc::new(
        (0..group.len())
            .flat_map(|g| visible.iter().map(move |&v| group.act(g, v)))
            .collect(),
    )
}

fn conv_impl<'t, T: Scalar>(
    f: Var<'t, T>,
    psi: Var<'t, T>,
    group: &IcoGroup,
    visible: &[usize],
    m: usize,
    n: usize,
    side: MatrixSide,
) -> Result<Var<'t, T>> {
    let nvis = visible.len();
    let ng = group.len();
    let table = gather_table(group, visible);
    let (fv, pv) = (f.value(), psi.value());
    let (fd, pd) = (fv.data(), pv.data());
    let mn = m * n;
    // (matrix row, vector row) for element g and visible slot i
    let rows = move |g: usize, i: usize, table: &[usize]| -> (usize, usize) {
        let p = table[g * nvis + i];
        match side {
            MatrixSide::Filter => (i, p),
            MatrixSide::Sphere => (p, i),
        }
    };
    let (mat, vec): (&[T], &[T]) = match side {
        MatrixSide::Filter => (pd, fd),
        MatrixSide::Sphere => (fd, pd),
    };
    let mut out = vec![T::zero(); ng * m];
    for g in 0..ng {
        let o = &mut out[g * m..(g + 1) * m];
        for i in 0..nvis {
            let (a, x) = rows(g, i, &table);
            let a = &mat[a * mn..(a + 1) * mn];
            let x = &vec[x * n..(x + 1) * n];
            for (r, or) in o.iter_mut().enumerate() {
                let ar = &a[r * n..(r + 1) * n];
                let mut s = T::zero();
                for j in 0..n {
                    s += ar[j] * x[j];
                }
                *or += s;
            }
        }
    }
    let out = Tensor::from_vec(vec![ng, m], out)?;
    let tape = f.tape();
    Ok(tape.custom(
        &[f, psi],
        out,
        Box::new(move |grad, ins, _, mask| {
            let gd = grad.data();
            let (fd, pd) = (ins[0].data(), ins[1].data());
            let (mat, vec): (&[T], &[T]) = match side {
                MatrixSide::Filter => (pd, fd),
                MatrixSide::Sphere => (fd, pd),
            };
            let (mat_mask, vec_mask) = match side {
                MatrixSide::Filter => (mask[1], mask[0]),
                MatrixSide::Sphere => (mask[0], mask[1]),
            };
            let mut gmat = vec![T::zero(); mat.len()];
            let mut gvec = vec![T::zero(); vec.len()];
            for g in 0..ng {
                let go = &gd[g * m..(g + 1) * m];
                for i in 0..nvis {
                    let (a, x) = rows(g, i, &table);
                    for r in 0..m {
                        let gr = go[r];
                        let base = a * mn + r * n;
                        if mat_mask {
                            for j in 0..n {
                                gmat[base + j] += gr * vec[x * n + j];
                            }
                        }
                        if vec_mask {
                            for j in 0..n {
                                gvec[x * n + j] += gr * mat[base + j];
                            }
                        }
                    }
                }
            }
            let gmat = mat_mask.then_some(gmat);
            let gvec = vec_mask.then_some(gvec);
            let (gf, gp) = match side {
                MatrixSide::Filter => (gvec, gmat),
                MatrixSide::Sphere => (gmat, gvec),
            };
            vec![
                gf.map(|d| Tensor::from_vec(ins[0].shape().to_vec(), d).expect("shape")),
                gp.map(|d| Tensor::from_vec(ins[1].shape().to_vec(), d).expect("shape")),
            ]
        }),
    ))
}

/// Icosahedral convolution of a `[42, n]` feature sphere with a
/// `[visible, m, n]` dynamic filter, giving a `[60, m]` group signal.
pub fn ico_conv<'t, T: Scalar>(
    f: Var<'t, T>,
    psi: Var<'t, T>,
    group: &IcoGroup,
    visible: &[usize],
) -> Result<Var<'t, T>> {
    let (fs, ps) = (f.shape(), psi.shape());
    let (m, n) = match (fs.as_slice(), ps.as_slice()) {
        (&[SUBMESH_SIZE, nf], &[nv, m, n]) if nf == n && nv == visible.len() => (m, n),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "ico_conv: sphere {fs:?} with filter {ps:?} over {} visible points",
                visible.len()
            )))
        }
    };
    conv_impl(f, psi, group, visible, m, n, MatrixSide::Filter)
}

/// Vector-scheme convolution: the `[42, m * n]` feature sphere holds the
/// matrices and the `[visible, n]` filter the vectors.
pub fn ico_conv_vector<'t, T: Scalar>(
    f: Var<'t, T>,
    psi: Var<'t, T>,
    group: &IcoGroup,
    visible: &[usize],
    m: usize,
) -> Result<Var<'t, T>> {
    let (fs, ps) = (f.shape(), psi.shape());
    let n = match (fs.as_slice(), ps.as_slice()) {
        (&[SUBMESH_SIZE, mn], &[nv, n]) if mn == m * n && nv == visible.len() => n,
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "ico_conv_vector: sphere {fs:?} with filter {ps:?}, m = {m}, {} visible points",
                visible.len()
            )))
        }
    };
    conv_impl(f, psi, group, visible, m, n, MatrixSide::Sphere)
}

/// Direct group convolution over all 42 points with a zero-padded filter:
/// `out[g] = sum over x of psi_full[act(g^-1, x)] * f[x]`.
///
/// `f` is `[42, n]`, `psi_full` is `[42, m, n]`; returns `[60, m]`.
pub fn brute_force_conv(f: &Tensor<f64>, psi_full: &Tensor<f64>, group: &IcoGroup) -> Result<Tensor<f64>> {
    let (n, m) = match (f.shape(), psi_full.shape()) {
        (&[SUBMESH_SIZE, n], &[SUBMESH_SIZE, m, n2]) if n == n2 => (n, m),
        (a, b) => {
            return Err(Error::ShapeMismatch(format!(
                "brute_force_conv: sphere {a:?} with filter {b:?}"
            )))
        }
    };
    let mut out = Tensor::zeros(&[group.len(), m]);
    for g in 0..group.len() {
        let gi = group.inv(g);
        for x in 0..SUBMESH_SIZE {
            let src = group.act(gi, x);
            for r in 0..m {
                let mut s = 0.0;
                for j in 0..n {
                    s += psi_full.data()[(src * m + r) * n + j] * f.data()[x * n + j];
                }
                out.data_mut()[g * m + r] += s;
            }
        }
    }
    Ok(out)
}

/// Zero-pads `[visible, ...]` filter values to all 42 points.
pub fn pad_filter(values: &Tensor<f64>, visible: &[usize]) -> Result<Tensor<f64>> {
    let shape = values.shape();
    if shape.first() != Some(&visible.len()) {
        return Err(Error::ShapeMismatch(format!(
            "filter {shape:?} for {} visible points",
            visible.len()
        )));
    }
    let row: usize = shape[1..].iter().product();
    let mut full_shape = shape.to_vec();
    full_shape[0] = SUBMESH_SIZE;
    let mut full = Tensor::zeros(&full_shape);
    for (i, &p) in visible.iter().enumerate() {
        full.data_mut()[p * row..(p + 1) * row].copy_from_slice(&values.data()[i * row..(i + 1) * row]);
    }
    Ok(full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Reduces a `[60, m]` group signal over the group axis to `[m]`.
/// Max pooling routes the gradient to the first maximal element.
pub fn group_pool<'t, T: Scalar>(sig: Var<'t, T>, mode: PoolMode) -> Result<Var<'t, T>> {
    let shape = sig.shape();
    let (rows, m) = match *shape.as_slice() {
        [r, m] if r > 0 => (r, m),
        _ => return Err(Error::ShapeMismatch(format!("group_pool: signal {shape:?}"))),
    };
    match mode {
        PoolMode::Avg => Ok(sig.mean_axis(0)?),
        PoolMode::Max => {
            let v = sig.value();
            let d = v.data();
            let argmax: Vec<usize> = (0..m)
                .map(|c| {
                    let mut best = 0;
                    for r in 1..rows {
                        if d[r * m + c] > d[best * m + c] {
                            best = r;
                        }
                    }
                    best * m + c
                })
                .collect();
            Ok(sig.take(Rc::new(argmax), &[m])?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icogroup::build_group;
    use i2i_tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn visible() -> Vec<usize> {
        let q = crate::icogroup::build_quotient();
        (0..42).filter(|&p| q.submesh[p][2] >= -1e-9).collect()
    }

    fn conv(f: &Tensor<f64>, psi: &Tensor<f64>, g: &IcoGroup, vis: &[usize]) -> Tensor<f64> {
        let tape = Tape::new();
        let out = ico_conv(tape.constant(f.clone()), tape.constant(psi.clone()), g, vis).unwrap();
        (*out.value()).clone()
    }

    #[test]
    fn zero_filter_and_constant_sphere() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_t(&mut rng, &[42, 4]);
        let out = conv(&f, &Tensor::zeros(&[vis.len(), 3, 4]), &g, &vis);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let row = [0.3, -1.0, 2.0, 0.5];
        let fc = Tensor::from_fn(&[42, 4], |i| row[i % 4]);
        let psi = rand_t(&mut rng, &[vis.len(), 3, 4]);
        let out = conv(&fc, &psi, &g, &vis);
        for e in 1..60 {
            for r in 0..3 {
                assert!((out.data()[e * 3 + r] - out.data()[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_filter() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_t(&mut rng, &[42, 4]);
        let a = rand_t(&mut rng, &[3, 4]);
        let slot = 5;
        let psi = Tensor::from_fn(&[vis.len(), 3, 4], |i| {
            if i / 12 == slot {
                a.data()[i % 12]
            } else {
                0.0
            }
        });
        let out = conv(&f, &psi, &g, &vis);
        let full = brute_force_conv(&f, &pad_filter(&psi, &vis).unwrap(), &g).unwrap();
        for e in 0..60 {
            let p = g.act(e, vis[slot]);
            for r in 0..3 {
                let expect: f64 = (0..4).map(|j| a.data()[r * 4 + j] * f.data()[p * 4 + j]).sum();
                assert!((out.data()[e * 3 + r] - expect).abs() < 1e-12);
                assert!((full.data()[e * 3 + r] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = rand_t(&mut rng, &[42, 5]);
            let psi = rand_t(&mut rng, &[vis.len(), 7, 5]);
            let fast = conv(&f, &psi, &g, &vis);
            let slow = brute_force_conv(&f, &pad_filter(&psi, &vis).unwrap(), &g).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-10);
        }
    }

    #[test]
    fn vector_scheme_matches_matrix_formula() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n) = (3, 4);
        let f = rand_t(&mut rng, &[42, m * n]);
        let psi = rand_t(&mut rng, &[vis.len(), n]);
        let tape = Tape::new();
        let out = ico_conv_vector(tape.constant(f.clone()), tape.constant(psi.clone()), &g, &vis, m).unwrap();
        let out = out.value();
        for e in 0..60 {
            for r in 0..m {
                let mut s = 0.0;
                for (i, &v) in vis.iter().enumerate() {
                    let p = g.act(e, v);
                    for j in 0..n {
                        s += f.data()[p * m * n + r * n + j] * psi.data()[i * n + j];
                    }
                }
                assert!((out.data()[e * m + r] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifting_sphere_translates_output() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_t(&mut rng, &[42, 4]);
        let psi = rand_t(&mut rng, &[vis.len(), 3, 4]);
        let out = conv(&f, &psi, &g, &vis);
        for h in 0..60 {
            let hi = g.inv(h);
            let shifted = Tensor::from_fn(&[42, 4], |i| f.data()[g.act(hi, i / 4) * 4 + i % 4]);
            let out_h = conv(&shifted, &psi, &g, &vis);
            for e in 0..60 {
                let src = g.mul(hi, e);
                for r in 0..3 {
                    assert!((out_h.data()[e * 3 + r] - out.data()[src * 3 + r]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn bilinear() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f1, f2) = (rand_t(&mut rng, &[42, 4]), rand_t(&mut rng, &[42, 4]));
        let (p1, p2) = (rand_t(&mut rng, &[vis.len(), 3, 4]), rand_t(&mut rng, &[vis.len(), 3, 4]));
        let mixf = Tensor::from_fn(&[42, 4], |i| 2.0 * f1.data()[i] - 0.5 * f2.data()[i]);
        let mixp = Tensor::from_fn(p1.shape(), |i| -1.5 * p1.data()[i] + 0.25 * p2.data()[i]);
        let a = conv(&mixf, &p1, &g, &vis);
        let (a1, a2) = (conv(&f1, &p1, &g, &vis), conv(&f2, &p1, &g, &vis));
        let b = conv(&f1, &mixp, &g, &vis);
        let b2 = conv(&f1, &p2, &g, &vis);
        for i in 0..a.len() {
            assert!((a.data()[i] - (2.0 * a1.data()[i] - 0.5 * a2.data()[i])).abs() < 1e-9);
            assert!((b.data()[i] - (-1.5 * a1.data()[i] + 0.25 * b2.data()[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors() {
        let g = build_group().unwrap();
        let vis = visible();
        let tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros(&[42, 4]));
        let psi = tape.constant(Tensor::zeros(&[vis.len(), 3, 5]));
        assert!(matches!(ico_conv(f, psi, &g, &vis), Err(Error::ShapeMismatch(_))));
        let psi = tape.constant(Tensor::zeros(&[vis.len(), 5]));
        assert!(ico_conv_vector(f, psi, &g, &vis, 3).is_err());
    }

    #[test]
    fn pooling() {
        let g = build_group().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_fn(&[60, 3], |i| [1.0, -2.0, 0.5][i % 3]));
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let p = group_pool(c, mode).unwrap();
            for (a, b) in p.value().data().iter().zip([1.0, -2.0, 0.5]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let sig = rand_t(&mut rng, &[60, 3]);
        let base_max = group_pool(tape.constant(sig.clone()), PoolMode::Max).unwrap().value();
        let base_avg = group_pool(tape.constant(sig.clone()), PoolMode::Avg).unwrap().value();
        for (mx, av) in base_max.data().iter().zip(base_avg.data()) {
            assert!(mx >= av);
        }
        for h in 0..60 {
            let perm = Tensor::from_fn(&[60, 3], |i| sig.data()[g.mul(h, i / 3) * 3 + i % 3]);
            let pm = group_pool(tape.constant(perm.clone()), PoolMode::Max).unwrap().value();
            let pa = group_pool(tape.constant(perm), PoolMode::Avg).unwrap().value();
            assert_eq!(pm.data(), base_max.data());
            assert!(pa.max_abs_diff(&base_avg) < 1e-12);
        }
    }

    #[test]
    fn pooling_gradients() {
        let tape = Tape::<f64>::new();
        let mut d = vec![0.0; 120];
        d[7 * 2] = 3.0;
        d[9 * 2] = 3.0;
        d[2 * 2 + 1] = 1.0;
        let x = tape.param(Tensor::from_vec(vec![60, 2], d).unwrap());
        let y = group_pool(x, PoolMode::Max).unwrap().sum();
        let gx = tape.backward(y).unwrap().get_or_zeros(x);
        let hot: Vec<usize> = (0..120).filter(|&i| gx.data()[i] != 0.0).collect();
        assert_eq!(hot, vec![5, 14]);
        let x2 = tape.param(Tensor::zeros(&[60, 2]));
        let y2 = group_pool(x2, PoolMode::Avg).unwrap().sum();
        let g2 = tape.backward(y2).unwrap().get_or_zeros(x2);
        assert!(g2.data().iter().all(|&v| (v - 1.0 / 60.0).abs() < 1e-15));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = build_group().unwrap();
        let vis = visible();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_t(&mut rng, &[42, 3]);
        let psi = rand_t(&mut rng, &[vis.len(), 2, 3]);
        let probe = rand_t(&mut rng, &[60, 2]);
        let report = i2i_tensor::grad_check(
            |t, v| {
                let out = ico_conv(v[0], v[1], &g, &vis).map_err(unwrap_tensor)?;
                Ok(out.mul(t.constant(probe.clone()))?.sum())
            },
            &[f, psi],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let fv = rand_t(&mut rng, &[42, 6]);
        let pv = rand_t(&mut rng, &[vis.len(), 3]);
        let report = i2i_tensor::grad_check(
            |t, v| {
                let out = ico_conv_vector(v[0], v[1], &g, &vis, 2).map_err(unwrap_tensor)?;
                Ok(out.mul(t.constant(probe.clone()))?.sum())
            },
            &[fv, pv],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn unwrap_tensor(e: Error) -> i2i_tensor::TensorError {
        match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }
}

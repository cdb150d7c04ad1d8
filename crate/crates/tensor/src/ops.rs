//! Differentiable primitives on [`Var`].

use std::rc::Rc;

use crate::tensor::strides;
use crate::{Result, Scalar, Tensor, TensorError, Var};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("shape preserved")
}

/// Dense product with optional transposes.
///
/// `a` is `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]` when
/// `tb`). Returns the `[m, n]` result.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_into(a, b, &mut c, m, k, n, ta, tb, false);
    c
}

/// Like [`gemm`] but writes into `c`, adding to it when `accumulate`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // prefixes of the buffers, whose lengths were checked.
    unsafe {
        T::gemm_strided(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(TensorError::shape(op, format!("expected 2-D, got {s:?}"))),
    }
}

/// Output extent of a strided window sweep.
fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

/// Range of output positions `o` for which `o * stride + kk - pad` lands in `[0, len)`.
fn valid_range(len: usize, out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad {
        0
    } else {
        (pad - kk).div_ceil(stride)
    };
    let hi_excl = if len + pad > kk {
        ((len + pad - kk - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane_in(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[cin, h, w]` input into `[cin * kh * kw, ho * wo]` columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.plane_out();
    for ci in 0..g.cin {
        let iplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.ho, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.wo, kx, g.stride, g.pad);
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * hw..][..hw];
                row.fill(T::zero());
                for oy in oy0..oy1 {
                    let irow = &iplane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        orow[ox] = irow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `gx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let hw = g.plane_out();
    for ci in 0..g.cin {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.ho, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.wo, kx, g.stride, g.pad);
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * hw..][..hw];
                for oy in oy0..oy1 {
                    let prow = &mut plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let crow = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        prow[ox * g.stride + kx - g.pad] += crow[ox];
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    let (kdim, hw) = (g.patch(), g.plane_out());
    let mut out = vec![T::zero(); batch * g.cout * hw];
    let mut cols = vec![T::zero(); kdim * hw];
    for b in 0..batch {
        im2col(&x[b * g.plane_in()..][..g.plane_in()], g, &mut cols);
        let ob = &mut out[b * g.cout * hw..][..g.cout * hw];
        gemm_into(wt, &cols, ob, g.cout, kdim, hw, false, false, false);
    }
    out
}

fn conv_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &ConvGeom,
    batch: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (kdim, hw) = (g.patch(), g.plane_out());
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); wt.len()]);
    let mut cols = vec![T::zero(); kdim * hw];
    for b in 0..batch {
        let gb = &gout[b * g.cout * hw..][..g.cout * hw];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * g.plane_in()..][..g.plane_in()], g, &mut cols);
            // dW += dY cols^T
            gemm_into(gb, &cols, gw, g.cout, hw, kdim, false, true, true);
        }
        if let Some(gx) = gx.as_mut() {
            // dcols = W^T dY
            gemm_into(wt, gb, &mut cols, kdim, g.cout, hw, true, false, false);
            col2im(&cols, g, &mut gx[b * g.plane_in()..][..g.plane_in()]);
        }
    }
    (gx, gw)
}

/// Index table for rotating the last two (square) axes by `k` quarter turns
/// counter-clockwise, as displayed with row 0 at the top.
fn rotate90_indices(shape: &[usize], k: usize) -> Vec<usize> {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let lead: usize = shape[..nd - 2].iter().product();
    let k = k % 4;
    let mut idx = Vec::with_capacity(lead * h * w);
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..h {
            for j in 0..w {
                // new[i][j] = old[src]
                let (si, sj) = match k {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                idx.push(base + si * w + sj);
            }
        }
    }
    idx
}

impl<'t, T: Scalar> Var<'t, T> {
    fn check_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x + y);
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x - y);
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_with(&a, &b, |x, y| x * y);
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(|g, ins, _, mask| {
                vec![
                    mask[0].then(|| zip_with(g, &ins[1], |x, y| x * y)),
                    mask[1].then(|| zip_with(g, &ins[0], |x, y| x * y)),
                ]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().map(|v| v * c);
        self.tape.custom(
            &[self],
            out,
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().map(|v| v + c);
        self.tape
            .custom(&[self], out, Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn sum(self) -> Var<'t, T> {
        let total: T = self.value().data().iter().copied().sum();
        self.tape.custom(
            &[self],
            Tensor::scalar(total),
            Box::new(|g, ins, _, _| vec![Some(Tensor::full(ins[0].shape(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.custom(
            &[self],
            out,
            Box::new(|g, ins, _, _| {
                vec![Some(zip_with(g, &ins[0], |gv, x| {
                    if x > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(|g, ins, _, _| {
                vec![Some(
                    g.clone()
                        .reshape(ins[0].shape())
                        .expect("reshape is size preserving"),
                )]
            }),
        ))
    }

    /// Gathers flat elements: `out.data[i] = self.data[indices[i]]`.
    pub fn take(self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(TensorError::shape(
                "take",
                format!("{} indices for shape {shape:?}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(TensorError::IndexOutOfBounds {
                op: "take",
                index: bad,
                limit: x.len(),
            });
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_vec(shape.to_vec(), data)?;
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |g, ins, _, _| {
                let mut gx = Tensor::zeros(ins[0].shape());
                let d = gx.data_mut();
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || seen[a]) {
            return Err(TensorError::shape(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        for &a in axes {
            seen[a] = true;
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n: usize = out_shape.iter().product();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..n {
            idx.push(
                counter
                    .iter()
                    .zip(axes)
                    .map(|(&c, &a)| c * in_strides[a])
                    .sum(),
            );
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.take(Rc::new(idx), &out_shape)
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (nrows, d) = dims2("gather_rows", &x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                limit: nrows,
            });
        }
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * d)..(r * d + d))
            .collect();
        self.take(Rc::new(idx), &[rows.len(), d])
    }

    /// Rotates the last two axes by `k` quarter turns (counter-clockwise with
    /// row 0 displayed at the top).
    pub fn rotate90(self, k: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let nd = shape.len();
        if nd < 2 || (k % 2 == 1 && shape[nd - 1] != shape[nd - 2]) {
            return Err(TensorError::shape(
                "rotate90",
                format!("need square trailing axes, got {shape:?}"),
            ));
        }
        self.take(Rc::new(rotate90_indices(&shape, k)), &shape)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::shape(
                "mean_axis",
                format!("axis {axis} for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let inv = T::of(1.0 / len as f64);
        let x = self.value();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |g, ins, _, _| {
                let mut gx = Tensor::zeros(ins[0].shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    let gs = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        for (dv, &gv) in d[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .iter_mut()
                            .zip(gs)
                        {
                            *dv = gv * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(other, true)
    }

    fn matmul_ex(self, other: Var<'t, T>, tb: bool) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul", &a)?;
        let (b0, b1) = dims2("matmul", &b)?;
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?} (transposed rhs: {tb})", a.shape(), b.shape()),
            ));
        }
        let out = Tensor::from_vec(vec![m, n], gemm(a.data(), b.data(), m, k, n, false, tb))?;
        Ok(self.tape.custom(
            &[self, other],
            out,
            Box::new(move |g, ins, _, mask| {
                let (a, b, g) = (ins[0].data(), ins[1].data(), g.data());
                let ga = mask[0].then(|| {
                    // dA = dC B^T  or  dC B
                    let d = gemm(g, b, m, n, k, false, !tb);
                    Tensor::from_vec(vec![m, k], d).expect("shape")
                });
                let gb = mask[1].then(|| {
                    if tb {
                        // dB = dC^T A  -> [n, k]
                        Tensor::from_vec(vec![n, k], gemm(g, a, n, m, k, true, false))
                            .expect("shape")
                    } else {
                        // dB = A^T dC  -> [k, n]
                        Tensor::from_vec(vec![k, n], gemm(a, g, k, m, n, true, false))
                            .expect("shape")
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds `bias` (`[d]`) to every row of a `[n, d]` tensor.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let (_, d) = dims2("add_row_bias", &x)?;
        if b.len() != d {
            return Err(TensorError::shape(
                "add_row_bias",
                format!("{:?} + {:?}", x.shape(), b.shape()),
            ));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.tape.custom(
            &[self, bias],
            out,
            Box::new(move |g, ins, _, mask| {
                let gb = mask[1].then(|| {
                    let mut gb = Tensor::zeros(ins[1].shape());
                    for row in g.data().chunks(d) {
                        for (s, &v) in gb.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    gb
                });
                vec![Some(g.clone()), gb]
            }),
        ))
    }

    /// Affine map `x w^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul_nt(weight)?;
        match bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }

    /// 2-D cross-correlation of a `[cin, h, w]` or `[batch, cin, h, w]` input
    /// with `[cout, cin, kh, kw]` kernels and symmetric zero padding.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.check_tape(&weight);
        let (x, wt) = (self.value(), weight.value());
        let (batch, cin, h, w) = match *x.shape() {
            [c, h, w] => (None, c, h, w),
            [b, c, h, w] => (Some(b), c, h, w),
            ref s => return Err(TensorError::shape("conv2d", format!("input {s:?}"))),
        };
        let (cout, wcin, kh, kw) = match *wt.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(TensorError::shape("conv2d", format!("weight {s:?}"))),
        };
        if wcin != cin || stride == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {:?} weight {:?} stride {stride}", x.shape(), wt.shape()),
            ));
        }
        let (Some(ho), Some(wo)) = (
            conv_out(h, kh, stride, padding),
            conv_out(w, kw, stride, padding),
        ) else {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad: padding,
        };
        let nb = batch.unwrap_or(1);
        let mut out_shape = vec![cout, ho, wo];
        if let Some(b) = batch {
            out_shape.insert(0, b);
        }
        let out = Tensor::from_vec(out_shape, conv_forward(x.data(), wt.data(), &geom, nb))?;
        Ok(self.tape.custom(
            &[self, weight],
            out,
            Box::new(move |g, ins, _, mask| {
                let (gx, gw) =
                    conv_backward(ins[0].data(), ins[1].data(), g.data(), &geom, nb, mask[0], mask[1]);
                vec![
                    gx.map(|d| Tensor::from_vec(ins[0].shape().to_vec(), d).expect("shape")),
                    gw.map(|d| Tensor::from_vec(ins[1].shape().to_vec(), d).expect("shape")),
                ]
            }),
        ))
    }

    /// 2x2 average pooling with stride 2 over the last two axes (even `h`, `w`).
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let nd = shape.len();
        if nd < 2 || !shape[nd - 2].is_multiple_of(2) || !shape[nd - 1].is_multiple_of(2) {
            return Err(TensorError::shape("avg_pool2", format!("{shape:?}")));
        }
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let c: usize = shape[..nd - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let q = T::of(0.25);
        let mut out = vec![T::zero(); c * ho * wo];
        let xd = x.data();
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let b = ch * h * w + 2 * oy * w + 2 * ox;
                    out[(ch * ho + oy) * wo + ox] = (xd[b] + xd[b + 1] + xd[b + w] + xd[b + w + 1]) * q;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.tape.custom(
            &[self],
            out,
            Box::new(move |g, ins, _, _| {
                let mut gx = Tensor::zeros(ins[0].shape());
                let d = gx.data_mut();
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = g.data()[(ch * ho + oy) * wo + ox] * q;
                            let b = ch * h * w + 2 * oy * w + 2 * ox;
                            d[b] = v;
                            d[b + 1] = v;
                            d[b + w] = v;
                            d[b + w + 1] = v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean softmax cross entropy of `[n, c]` logits against class indices.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c) = dims2("softmax_cross_entropy", &x)?;
        if targets.len() != n {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("{n} rows, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfBounds {
                op: "softmax_cross_entropy",
                index: bad,
                limit: c,
            });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &x.data()[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss += z.ln() + mx - row[targets[r]];
        }
        let inv_n = T::of(1.0 / n as f64);
        let targets = targets.to_vec();
        Ok(self.tape.custom(
            &[self],
            Tensor::scalar(loss * inv_n),
            Box::new(move |g, _, _, _| {
                let s = g.item() * inv_n;
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= T::one();
                }
                for v in &mut gx {
                    *v *= s;
                }
                vec![Some(Tensor::from_vec(vec![n, c], gx).expect("shape"))]
            }),
        ))
    }

    /// Sum of squared elementwise differences.
    pub fn frobenius_l2(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("frobenius_l2", &a, &b)?;
        let diff = zip_with(&a, &b, |x, y| x - y);
        let total: T = diff.data().iter().map(|&d| d * d).sum();
        Ok(self.tape.custom(
            &[self, other],
            Tensor::scalar(total),
            Box::new(move |g, _, _, mask| {
                let s = g.item() + g.item();
                vec![
                    mask[0].then(|| diff.map(|d| d * s)),
                    mask[1].then(|| diff.map(|d| -d * s)),
                ]
            }),
        ))
    }
}

/// Concatenates along the leading axis.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let tail = &values[0].shape()[1..];
    let mut lead = 0;
    for v in &values {
        if v.shape().is_empty() || &v.shape()[1..] != tail {
            return Err(TensorError::shape(
                "concat",
                format!("{:?} vs {:?}", values[0].shape(), v.shape()),
            ));
        }
        lead += v.shape()[0];
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    let data: Vec<T> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
    let out = Tensor::from_vec(shape, data)?;
    let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
    Ok(tape.custom(
        parts,
        out,
        Box::new(move |g, ins, _, _| {
            let mut off = 0;
            sizes
                .iter()
                .zip(ins)
                .map(|(&n, x)| {
                    let t = Tensor::from_vec(x.shape().to_vec(), g.data()[off..off + n].to_vec())
                        .expect("shape");
                    off += n;
                    Some(t)
                })
                .collect()
        }),
    ))
}

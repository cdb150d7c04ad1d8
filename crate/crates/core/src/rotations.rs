//! SO(3) arithmetic, rotation parameterizations, and rotation metrics.
//!
//! Matrices are row-major `[[f64; 3]; 3]`. Quaternions are `(w, x, y, z)`,
//! unit norm, sign-canonicalized so that `w >= 0` (and, when `w == 0`, the
//! first nonzero of `x, y, z` is positive).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Inputs below this norm cannot define a direction for Gram-Schmidt.
pub const GS_EPS: f64 = 1e-8;
/// Smallest singular value accepted by the Procrustes projection.
pub const PROCRUSTES_EPS: f64 = 1e-8;

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 60;
/// Components this close to zero are treated as zero when fixing the sign.
const SIGN_TOL: f64 = 1e-12;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn det(a: &Mat3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

pub fn trace(a: &Mat3) -> f64 {
    a[0][0] + a[1][1] + a[2][2]
}

/// `trace(a^T b)` without forming the product.
pub fn frobenius_inner(a: &Mat3, b: &Mat3) -> f64 {
    (0..3)
        .map(|i| dot(a[i], b[i]))
        .sum()
}

pub fn frobenius_dist2(a: &Mat3, b: &Mat3) -> f64 {
    (0..3).map(|i| dot(sub(a[i], b[i]), sub(a[i], b[i]))).sum()
}

fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
    [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]]
}

/// Canonical sign of a unit quaternion.
fn canonical_quat(mut q: [f64; 4]) -> [f64; 4] {
    for c in q.iter_mut() {
        if c.abs() <= SIGN_TOL {
            *c = 0.0;
        }
    }
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    for c in q.iter_mut() {
        *c /= n;
    }
    let lead = q.iter().copied().find(|&c| c != 0.0).unwrap_or(1.0);
    if lead < 0.0 {
        for c in q.iter_mut() {
            *c = -*c;
        }
    }
    // -0.0 would break bitwise reproducibility of serialized labels.
    for c in q.iter_mut() {
        if *c == 0.0 {
            *c = 0.0;
        }
    }
    q
}

fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn matrix_to_quat(m: &Mat3) -> [f64; 4] {
    let t = trace(m);
    let q = if t > m[0][0] && t > m[1][1] && t > m[2][2] {
        let s = (t + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] >= m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    canonical_quat(q)
}

/// An element of SO(3), kept as both a matrix and a canonical quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Mat3,
    quat: [f64; 4],
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            matrix: IDENTITY,
            quat: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// From an (assumed orthonormal, det +1) matrix.
    pub fn from_matrix(matrix: Mat3) -> Self {
        Self {
            matrix,
            quat: matrix_to_quat(&matrix),
        }
    }

    /// From any nonzero quaternion `(w, x, y, z)`; it is normalized.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let quat = canonical_quat(q);
        Self {
            matrix: quat_to_matrix(quat),
            quat,
        }
    }

    pub fn about_axis(axis: Vec3, angle: f64) -> Self {
        let a = normalize(axis);
        let (s, c) = (0.5 * angle).sin_cos();
        Self::from_quaternion([c, a[0] * s, a[1] * s, a[2] * s])
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::from_matrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.quat
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation::from_matrix(mat_mul(&self.matrix, &other.matrix))
    }

    pub fn inverse(&self) -> Rotation {
        Rotation::from_matrix(transpose(&self.matrix))
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.matrix, v)
    }

    /// Largest deviation from `R^T R = I` and `det R = 1`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.matrix), &self.matrix);
        let mut e = (det(&self.matrix) - 1.0).abs();
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                e = e.max((v - id).abs());
            }
        }
        e
    }
}

/// Rotation angle of `a^T b`, in `[0, pi]`.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation, which equals
/// `arccos((trace(a^T b) - 1) / 2)` but keeps full precision near 0 and pi.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let m = mat_mul(&transpose(&a.matrix), &b.matrix);
    let cos = ((trace(&m) - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    let sin = (0.5 * norm(axis)).min(1.0);
    sin.atan2(cos)
}

/// 6D representation to rotation: columns are `a/|a|`, the part of `b`
/// orthogonal to `a` (normalized), and their cross product.
pub fn gram_schmidt_6d(a: Vec3, b: Vec3) -> Result<Rotation> {
    let na = norm(a);
    if !(na > GS_EPS) {
        return Err(Error::DegenerateInput(format!(
            "first 6D column has norm {na:e}"
        )));
    }
    let c0 = scale(a, 1.0 / na);
    let bp = sub(b, scale(c0, dot(c0, b)));
    let nb = norm(bp);
    if !(nb > GS_EPS) {
        return Err(Error::DegenerateInput(format!(
            "second 6D column has orthogonal norm {nb:e}"
        )));
    }
    let c1 = scale(bp, 1.0 / nb);
    let c2 = cross(c0, c1);
    Ok(Rotation::from_matrix(from_columns(c0, c1, c2)))
}

/// Thin SVD of a 3x3 matrix, `m = u * diag(s) * v^T` with `s` descending.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: Vec3,
    pub v: Mat3,
}

/// One-sided Jacobi SVD: orthogonalizes the columns of `m` by plane
/// rotations accumulated into `v`.
pub fn svd3(m: &Mat3) -> Svd3 {
    let mut a = *m;
    let mut v = IDENTITY;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let cp = column(&a, p);
            let cq = column(&a, q);
            let alpha = dot(cp, cp);
            let beta = dot(cq, cq);
            let gamma = dot(cp, cq);
            if gamma == 0.0 {
                continue;
            }
            off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for row in a.iter_mut().chain(v.iter_mut()) {
                let (xp, xq) = (row[p], row[q]);
                row[p] = c * xp - s * xq;
                row[q] = s * xp + c * xq;
            }
        }
        if off < JACOBI_TOL {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    let sig: Vec3 = [0, 1, 2].map(|j| norm(column(&a, j)));
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]));
    let s = order.map(|j| sig[j]);
    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    for (k, &j) in order.iter().enumerate() {
        let col = column(&a, j);
        let inv = if sig[j] > 0.0 { 1.0 / sig[j] } else { 0.0 };
        for r in 0..3 {
            u[r][k] = col[r] * inv;
            vs[r][k] = v[r][j];
        }
    }
    // Complete u when the smallest singular value vanished.
    if s[2] == 0.0 {
        let c = cross(column(&u, 0), column(&u, 1));
        for (r, row) in u.iter_mut().enumerate() {
            row[2] = c[r];
        }
    }
    Svd3 { u, s, v: vs }
}

/// Nearest rotation in Frobenius norm: `U diag(1, 1, det(U V^T)) V^T`.
pub fn procrustes_9d(m: &Mat3) -> Result<Rotation> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite 9D input".into()));
    }
    let svd = svd3(m);
    if !(svd.s[2] > PROCRUSTES_EPS) {
        return Err(Error::DegenerateInput(format!(
            "9D input is rank deficient (smallest singular value {:e})",
            svd.s[2]
        )));
    }
    Ok(Rotation::from_matrix(special_polar(&svd)))
}

pub(crate) fn special_polar(svd: &Svd3) -> Mat3 {
    let vt = transpose(&svd.v);
    let d = det(&mat_mul(&svd.u, &vt)).signum();
    let mut ud = svd.u;
    for row in ud.iter_mut() {
        row[2] *= d;
    }
    mat_mul(&ud, &vt)
}

/// Haar-uniform rotation from a normalized 4D Gaussian.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if q.iter().map(|c| c * c).sum::<f64>() > 1e-12 {
            return Rotation::from_quaternion(q);
        }
    }
}

/// Known rotational symmetry of an object about its own z-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SymmetrySpec {
    #[default]
    None,
    /// Invariant under `rot_z(2 pi k / n)`; `n >= 2`.
    CyclicZ(u32),
    ContinuousZ,
}

impl SymmetrySpec {
    pub fn validate(self) -> Result<Self> {
        match self {
            SymmetrySpec::CyclicZ(n) if n < 2 => Err(Error::Config(format!(
                "cyclic-z symmetry needs order >= 2, got {n}"
            ))),
            s => Ok(s),
        }
    }
}

impl std::str::FromStr for SymmetrySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SymmetrySpec::None),
            "continuous-z" => Ok(SymmetrySpec::ContinuousZ),
            _ => s
                .strip_prefix("cyclic-z:")
                .and_then(|n| n.parse().ok())
                .map(SymmetrySpec::CyclicZ)
                .ok_or_else(|| Error::Config(format!("unknown symmetry '{s}'")))?
                .validate(),
        }
    }
}

impl std::fmt::Display for SymmetrySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SymmetrySpec::None => write!(f, "none"),
            SymmetrySpec::CyclicZ(n) => write!(f, "cyclic-z:{n}"),
            SymmetrySpec::ContinuousZ => write!(f, "continuous-z"),
        }
    }
}

/// z-angle `phi` maximizing `trace(m * rot_z(phi))`.
fn best_z_angle(m: &Mat3) -> f64 {
    let a = m[0][0] + m[1][1];
    let b = m[0][1] - m[1][0];
    b.atan2(a)
}

/// Minimum geodesic angle between `pred` and `truth * s` over the symmetry set.
pub fn symmetry_aware_error(pred: &Rotation, truth: &Rotation, sym: SymmetrySpec) -> f64 {
    match sym {
        SymmetrySpec::None => geodesic_angle(pred, truth),
        SymmetrySpec::CyclicZ(n) => (0..n)
            .map(|k| {
                let s = Rotation::rot_z(2.0 * PI * k as f64 / n as f64);
                geodesic_angle(pred, &truth.compose(&s))
            })
            .fold(f64::INFINITY, f64::min),
        SymmetrySpec::ContinuousZ => {
            let m = mat_mul(&transpose(pred.matrix()), truth.matrix());
            let phi = best_z_angle(&m);
            geodesic_angle(pred, &truth.compose(&Rotation::rot_z(phi)))
        }
    }
}

/// Representative of `r`'s symmetry class closest to the identity.
pub fn canonicalize_label(r: &Rotation, sym: SymmetrySpec) -> Rotation {
    let id = Rotation::identity();
    match sym {
        SymmetrySpec::None => *r,
        SymmetrySpec::CyclicZ(n) => {
            let mut best = *r;
            let mut best_angle = geodesic_angle(&id, r);
            for k in 1..n {
                let cand = r.compose(&Rotation::rot_z(2.0 * PI * k as f64 / n as f64));
                let a = geodesic_angle(&id, &cand);
                if a < best_angle - 1e-12 {
                    best = cand;
                    best_angle = a;
                }
            }
            best
        }
        SymmetrySpec::ContinuousZ => {
            let phi = best_z_angle(r.matrix());
            if phi.abs() < 1e-12 {
                *r
            } else {
                r.compose(&Rotation::rot_z(phi))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize) -> Vec3 {
        let mut v = [0.0; 3];
        v[i] = 1.0;
        v
    }

    fn max_abs(a: &Mat3, b: &Mat3) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn geodesic_examples() {
        let id = Rotation::identity();
        assert_eq!(geodesic_angle(&id, &id), 0.0);
        assert!((geodesic_angle(&id, &Rotation::rot_z(PI)) - PI).abs() < 1e-12);
        let d = geodesic_angle(&Rotation::rot_z(0.3), &Rotation::rot_z(0.7));
        assert!((d - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_examples() {
        let r = gram_schmidt_6d(e(0), e(1)).unwrap();
        assert!(max_abs(r.matrix(), &IDENTITY) < 1e-15);
        let r = gram_schmidt_6d([2.0, 0.0, 0.0], [1.0, 1.0, 0.0]).unwrap();
        assert!(max_abs(r.matrix(), &IDENTITY) < 1e-15);
    }

    #[test]
    fn gram_schmidt_rejects_degenerate_columns() {
        assert!(matches!(
            gram_schmidt_6d([0.0; 3], e(1)),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            gram_schmidt_6d(e(0), [3.0, 0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(gram_schmidt_6d([f64::NAN, 0.0, 0.0], e(1)).is_err());
    }

    #[test]
    fn procrustes_examples() {
        let r = procrustes_9d(&IDENTITY).unwrap();
        assert!(max_abs(r.matrix(), &IDENTITY) < 1e-15);
        let two = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        assert!(max_abs(procrustes_9d(&two).unwrap().matrix(), &IDENTITY) < 1e-15);
        let rank2 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(matches!(
            procrustes_9d(&rank2),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn procrustes_matches_nalgebra_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m: Mat3 = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let ours = procrustes_9d(&m).unwrap();
            let na = nalgebra::Matrix3::from_fn(|i, j| m[i][j]);
            let svd = na.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            // nalgebra sorts singular values descending as well
            let d = (u * vt).determinant().signum();
            let mut ud = u;
            let (mut imin, mut smin) = (0, f64::INFINITY);
            for i in 0..3 {
                if svd.singular_values[i] < smin {
                    smin = svd.singular_values[i];
                    imin = i;
                }
            }
            for r in 0..3 {
                ud[(r, imin)] *= d;
            }
            let oracle = ud * vt;
            for i in 0..3 {
                for j in 0..3 {
                    assert!((ours.matrix()[i][j] - oracle[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn svd_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let m: Mat3 = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            let s = svd3(&m);
            assert!(s.s[0] >= s.s[1] && s.s[1] >= s.s[2]);
            let us = from_columns(
                scale(column(&s.u, 0), s.s[0]),
                scale(column(&s.u, 1), s.s[1]),
                scale(column(&s.u, 2), s.s[2]),
            );
            assert!(max_abs(&mat_mul(&us, &transpose(&s.v)), &m) < 1e-12);
        }
    }

    #[test]
    fn random_rotation_is_deterministic_and_valid() {
        let a = random_rotation(&mut ChaCha8Rng::seed_from_u64(7));
        let b = random_rotation(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(a.orthonormality_error() < 1e-12);
        assert!(a.quaternion()[0] >= 0.0);
    }

    #[test]
    fn quaternion_sign_convention() {
        let r = Rotation::from_quaternion([-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(r.quaternion(), [0.5, -0.5, 0.5, -0.5]);
        let half_turn = Rotation::from_quaternion([0.0, 0.0, -1.0, 0.0]);
        assert_eq!(half_turn.quaternion(), [0.0, 0.0, 1.0, 0.0]);
        let rz = Rotation::rot_z(PI);
        assert_eq!(rz.quaternion(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn symmetry_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_rotation(&mut rng);
        let pred = random_rotation(&mut rng);
        assert_eq!(
            symmetry_aware_error(&pred, &truth, SymmetrySpec::None),
            geodesic_angle(&pred, &truth)
        );
        for n in 2..7 {
            let p = truth.compose(&Rotation::rot_z(2.0 * PI / n as f64));
            assert!(symmetry_aware_error(&p, &truth, SymmetrySpec::CyclicZ(n)) < 1e-7);
        }
    }

    #[test]
    fn continuous_z_matches_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let truth = random_rotation(&mut rng);
            let pred = random_rotation(&mut rng);
            let closed = symmetry_aware_error(&pred, &truth, SymmetrySpec::ContinuousZ);
            let brute = (0..10_000)
                .map(|k| {
                    let phi = 2.0 * PI * k as f64 / 10_000.0;
                    geodesic_angle(&pred, &truth.compose(&Rotation::rot_z(phi)))
                })
                .fold(f64::INFINITY, f64::min);
            assert!(closed <= brute + 1e-12);
            assert!(brute - closed < 1e-4, "closed {closed} brute {brute}");
        }
    }

    #[test]
    fn canonicalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sym in [
            SymmetrySpec::None,
            SymmetrySpec::CyclicZ(2),
            SymmetrySpec::CyclicZ(5),
            SymmetrySpec::ContinuousZ,
        ] {
            for _ in 0..200 {
                let r = random_rotation(&mut rng);
                let c = canonicalize_label(&r, sym);
                assert!(symmetry_aware_error(&c, &r, sym) < 1e-7);
                let cc = canonicalize_label(&c, sym);
                assert!(geodesic_angle(&c, &cc) < 1e-9, "{sym}");
            }
        }
    }

    #[test]
    fn symmetry_spec_parsing() {
        assert_eq!("cyclic-z:4".parse::<SymmetrySpec>().unwrap(), SymmetrySpec::CyclicZ(4));
        assert!("cyclic-z:1".parse::<SymmetrySpec>().is_err());
        assert_eq!(
            SymmetrySpec::ContinuousZ.to_string().parse::<SymmetrySpec>().unwrap(),
            SymmetrySpec::ContinuousZ
        );
    }
}

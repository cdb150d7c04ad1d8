//! The icosahedral rotation group I60, its vertex quotient V12 = I60/C5, and
//! the 42-point submesh (12 vertices plus 30 normalized edge midpoints).
//!
//! The icosahedron sits in the `(0, ±1, ±φ)` orientation, so the camera axis
//! `+z` passes through an edge midpoint and the half-turn about `z` belongs to
//! the group.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rotations::{
    self, frobenius_inner, geodesic_angle, mat_mul, procrustes_9d, random_rotation, transpose,
    Mat3, Rotation, Vec3,
};

pub const GROUP_ORDER: usize = 60;
pub const NUM_VERTICES: usize = 12;
pub const NUM_EDGES: usize = 30;
pub const SUBMESH_SIZE: usize = 42;

pub const PHI: f64 = 1.618_033_988_749_895;

/// Covering radius of I60 in degrees, measured by [`quantization_stats`]
/// (10^6 Haar samples plus local ascent).
pub const COVERING_RADIUS_DEG: f64 = 44.4775;
/// Median angle from a Haar rotation to its nearest I60 element, degrees.
pub const MEDIAN_QUANTIZATION_DEG: f64 = 31.06;
/// Agreement required between a fresh measurement and the frozen constants.
pub const QUANTIZATION_TOL_DEG: f64 = 0.2;

const DEDUP_TOL: f64 = 1e-6;
const POINT_TOL: f64 = 1e-9;
const ORDER_TOL: f64 = 1e-9;

/// Points of the icosahedral quotient and its submesh.
#[derive(Debug, Clone)]
pub struct Quotient {
    pub vertices: Vec<Vec3>,
    /// `vertices` followed by the normalized edge midpoints in `edges` order.
    pub submesh: Vec<Vec3>,
    pub edges: Vec<(usize, usize)>,
}

/// Builds the 12 icosahedron vertices, 30 edges, and 42-point submesh.
pub fn build_quotient() -> Quotient {
    let mut raw = Vec::with_capacity(NUM_VERTICES);
    for perm in 0..3 {
        for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let t = [0.0, s1, s2 * PHI];
            // cyclic shift: (0, a, b), (a, b, 0), (b, 0, a)
            raw.push([t[perm % 3], t[(perm + 1) % 3], t[(perm + 2) % 3]]);
        }
    }
    let vertices: Vec<Vec3> = raw.iter().map(|&v| rotations::normalize(v)).collect();
    let mut min_d = f64::INFINITY;
    for i in 0..NUM_VERTICES {
        for j in i + 1..NUM_VERTICES {
            min_d = min_d.min(rotations::norm(rotations::sub(raw[i], raw[j])));
        }
    }
    let mut edges = Vec::with_capacity(NUM_EDGES);
    for i in 0..NUM_VERTICES {
        for j in i + 1..NUM_VERTICES {
            if rotations::norm(rotations::sub(raw[i], raw[j])) < min_d + 1e-9 {
                edges.push((i, j));
            }
        }
    }
    let mut submesh = vertices.clone();
    submesh.extend(
        edges
            .iter()
            .map(|&(i, j)| rotations::normalize(rotations::add(vertices[i], vertices[j]))),
    );
    Quotient {
        vertices,
        submesh,
        edges,
    }
}

/// I60 with multiplication, inverse, and permutation-action tables.
#[derive(Debug, Clone)]
pub struct IcoGroup {
    elements: Vec<Rotation>,
    cayley: Vec<usize>,
    inverse: Vec<usize>,
    vertex_perm: Vec<usize>,
    submesh_perm: Vec<usize>,
    quotient: Quotient,
}

fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Descending lexicographic order on canonical quaternions, so that the
/// identity `(1, 0, 0, 0)` comes first.
fn quat_order(a: &Rotation, b: &Rotation) -> std::cmp::Ordering {
    let (qa, qb) = (a.quaternion(), b.quaternion());
    for k in 0..4 {
        if (qa[k] - qb[k]).abs() > ORDER_TOL {
            return qb[k].total_cmp(&qa[k]);
        }
    }
    std::cmp::Ordering::Equal
}

fn lookup_point(points: &[Vec3], p: Vec3) -> Option<usize> {
    points
        .iter()
        .position(|&q| rotations::norm(rotations::sub(p, q)) < POINT_TOL)
}

/// Generates I60 by closure from a 72° turn about the vertex axis `(0, 1, φ)`
/// and the half-turn about `z`.
pub fn build_group() -> Result<IcoGroup> {
    let generators = [
        Rotation::about_axis([0.0, 1.0, PHI], 2.0 * PI / 5.0),
        Rotation::rot_z(PI),
    ];
    let mut found: Vec<Mat3> = vec![rotations::IDENTITY];
    let mut frontier = 0;
    while frontier < found.len() {
        let current = found[frontier];
        frontier += 1;
        for g in &generators {
            let p = mat_mul(g.matrix(), &current);
            if !found.iter().any(|q| max_abs_diff(q, &p) < DEDUP_TOL) {
                found.push(p);
                if found.len() > GROUP_ORDER {
                    return Err(Error::ConstructionFailure(format!(
                        "closure exceeded {GROUP_ORDER} elements"
                    )));
                }
            }
        }
    }
    if found.len() != GROUP_ORDER {
        return Err(Error::ConstructionFailure(format!(
            "closure stabilized at {} elements",
            found.len()
        )));
    }
    let mut elements = found
        .iter()
        .map(procrustes_9d)
        .collect::<Result<Vec<_>>>()?;
    elements.sort_by(quat_order);
    from_elements(elements, build_quotient())
}

fn from_elements(elements: Vec<Rotation>, quotient: Quotient) -> Result<IcoGroup> {
    let n = elements.len();
    let find = |m: &Mat3| -> Result<usize> {
        elements
            .iter()
            .position(|e| max_abs_diff(e.matrix(), m) < DEDUP_TOL)
            .ok_or_else(|| Error::ConstructionFailure("product left the element set".into()))
    };
    let mut cayley = vec![0; n * n];
    for g in 0..n {
        for h in 0..n {
            cayley[g * n + h] = find(&mat_mul(elements[g].matrix(), elements[h].matrix()))?;
        }
    }
    let inverse = elements
        .iter()
        .map(|e| find(&transpose(e.matrix())))
        .collect::<Result<Vec<_>>>()?;
    let perm = |points: &[Vec3]| -> Result<Vec<usize>> {
        let mut table = Vec::with_capacity(n * points.len());
        for e in &elements {
            for &p in points {
                table.push(lookup_point(points, e.apply(p)).ok_or_else(|| {
                    Error::ConstructionFailure("group element does not preserve the mesh".into())
                })?);
            }
        }
        Ok(table)
    };
    let vertex_perm = perm(&quotient.vertices)?;
    let submesh_perm = perm(&quotient.submesh)?;
    Ok(IcoGroup {
        elements,
        cayley,
        inverse,
        vertex_perm,
        submesh_perm,
        quotient,
    })
}

impl IcoGroup {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[Rotation] {
        &self.elements
    }

    pub fn element(&self, g: usize) -> &Rotation {
        &self.elements[g]
    }

    pub fn matrix(&self, g: usize) -> &Mat3 {
        self.elements[g].matrix()
    }

    pub fn quotient(&self) -> &Quotient {
        &self.quotient
    }

    /// Index of `g * h`.
    pub fn mul(&self, g: usize, h: usize) -> usize {
        self.cayley[g * self.len() + h]
    }

    pub fn inv(&self, g: usize) -> usize {
        self.inverse[g]
    }

    /// Submesh index `q` with `submesh[q] = M(g) submesh[p]`.
    pub fn act(&self, g: usize, p: usize) -> usize {
        self.submesh_perm[g * SUBMESH_SIZE + p]
    }

    /// Vertex index `q` with `vertices[q] = M(g) vertices[v]`.
    pub fn act_vertex(&self, g: usize, v: usize) -> usize {
        self.vertex_perm[g * NUM_VERTICES + v]
    }

    /// Row of the submesh permutation induced by `g`.
    pub fn submesh_perm(&self, g: usize) -> &[usize] {
        &self.submesh_perm[g * SUBMESH_SIZE..(g + 1) * SUBMESH_SIZE]
    }

    pub fn vertex_perm(&self, g: usize) -> &[usize] {
        &self.vertex_perm[g * NUM_VERTICES..(g + 1) * NUM_VERTICES]
    }

    /// Index of the element equal to `r` (within 1e-6), if any.
    pub fn find(&self, r: &Rotation) -> Option<usize> {
        self.elements
            .iter()
            .position(|e| max_abs_diff(e.matrix(), r.matrix()) < DEDUP_TOL)
    }

    /// The half-turn about the camera axis.
    pub fn half_turn_z(&self) -> usize {
        self.find(&Rotation::rot_z(PI))
            .expect("half-turn about z is a group element in this orientation")
    }

    /// Order of `g`, by repeated Cayley multiplication.
    pub fn order(&self, g: usize) -> usize {
        let mut x = g;
        let mut k = 1;
        while x != 0 {
            x = self.mul(x, g);
            k += 1;
            if k > self.len() {
                break;
            }
        }
        k
    }

    /// Nearest element `g` (maximal `trace(M(g)^T r)`, ties to the lowest
    /// index) and the offset `M(g)^T r`, so that `r = M(g) * offset`.
    pub fn nearest_element(&self, r: &Rotation) -> (usize, Rotation) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (g, e) in self.elements.iter().enumerate() {
            let s = frobenius_inner(e.matrix(), r.matrix());
            if s > best_score {
                best_score = s;
                best = g;
            }
        }
        let offset = Rotation::from_matrix(mat_mul(&transpose(self.matrix(best)), r.matrix()));
        (best, offset)
    }

    /// Overwrites one Cayley entry; only for exercising the verification
    /// checks against a corrupted table.
    #[doc(hidden)]
    pub fn corrupt_cayley_entry(&mut self, g: usize, h: usize, value: usize) {
        let n = self.len();
        self.cayley[g * n + h] = value;
    }
}

/// Monte-Carlo statistics of the quantization `r -> nearest_element(r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationStats {
    /// Covering radius estimate, radians.
    pub covering_radius: f64,
    pub median_angle: f64,
    pub mean_angle: f64,
    pub samples: usize,
}

/// Samples Haar rotations, measures the offset angle to the nearest element,
/// and refines the largest offsets by local ascent so the covering radius
/// estimate does not depend on hitting the exact cell corner.
pub fn quantization_stats(group: &IcoGroup, samples: usize, seed: u64) -> QuantizationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset_angle = |r: &Rotation| geodesic_angle(&group.nearest_element(r).1, &Rotation::identity());
    let mut angles = Vec::with_capacity(samples);
    let mut top: Vec<(f64, Rotation)> = Vec::new();
    const KEEP: usize = 16;
    for _ in 0..samples {
        let r = random_rotation(&mut rng);
        let a = offset_angle(&r);
        angles.push(a);
        if top.len() < KEEP || a > top[top.len() - 1].0 {
            top.push((a, r));
            top.sort_by(|x, y| y.0.total_cmp(&x.0));
            top.truncate(KEEP);
        }
    }
    let mut covering = angles.iter().copied().fold(0.0, f64::max);
    for (mut best, mut r) in top {
        let mut step = 0.02;
        while step > 1e-7 {
            let mut improved = false;
            for axis in [
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ] {
                let cand = Rotation::about_axis(axis, step).compose(&r);
                let a = offset_angle(&cand);
                if a > best {
                    best = a;
                    r = cand;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        covering = covering.max(best);
    }
    let mean = angles.iter().sum::<f64>() / angles.len().max(1) as f64;
    let mid = angles.len() / 2;
    let median = if angles.is_empty() {
        0.0
    } else {
        *angles.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    QuantizationStats {
        covering_radius: covering,
        median_angle: median,
        mean_angle: mean,
        samples,
    }
}

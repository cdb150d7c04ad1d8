//! Procedural shapes, orthographic rendering, datasets, and augmentation.
//!
//! Shapes are unions of boxes, ellipsoids, and cylinders scaled into the unit
//! ball. Rendering splats dense surface samples into a z-buffer with the
//! camera on `+z` looking down `-z`; the unit ball spans the image.
//!
//! Depth images store `(1 + z) / 2` for foreground pixels and 0 for the
//! background. Grayscale images shade depth-derived normals with a light
//! along the viewing axis, so both modes commute with image-plane rotations.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icogroup::IcoGroup;
use crate::rotations::{
    canonicalize_label, normalize, random_rotation, Rotation, SymmetrySpec, Vec3,
};

pub const DEFAULT_SAMPLES: usize = 200_000;
pub const GUARD_THRESHOLD: f64 = 0.01;
pub const GUARD_ATTEMPTS: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.8;
/// Smallest foreground depth value, keeping foreground distinct from 0.
pub const MIN_FOREGROUND: f32 = 1.0 / 255.0;

const MAGIC: &[u8; 4] = b"I2ID";
const VERSION: u32 = 1;
/// Fraction of the unit ball used by a normalized shape.
const FIT_RADIUS: f64 = 0.95;

/// Mixes a base seed with a tag and an index into an independent stream seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Cuboid,
    Ellipsoid,
    /// Elliptic cylinder along the local z axis.
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub half: Vec3,
    pub orientation: Rotation,
}

impl Primitive {
    fn axis_aligned(kind: PrimitiveKind, center: Vec3, half: Vec3) -> Self {
        Self {
            kind,
            center,
            half,
            orientation: Rotation::identity(),
        }
    }

    fn area(&self) -> f64 {
        let [a, b, c] = self.half;
        match self.kind {
            PrimitiveKind::Cuboid => 8.0 * (a * b + b * c + a * c),
            // Knud Thomsen's approximation
            PrimitiveKind::Ellipsoid => {
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            PrimitiveKind::Cylinder => {
                let r = 0.5 * (a + b);
                2.0 * PI * r * 2.0 * c + 2.0 * PI * a * b
            }
        }
    }

    /// Surface point and outward normal in the local frame.
    fn sample_local<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        let [a, b, c] = self.half;
        match self.kind {
            PrimitiveKind::Cuboid => {
                let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                while face < 5 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [
                    rng.random_range(-a..=a),
                    rng.random_range(-b..=b),
                    rng.random_range(-c..=c),
                ];
                p[axis] = sign * self.half[axis];
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n)
            }
            PrimitiveKind::Ellipsoid => {
                let d = loop {
                    let v: Vec3 = [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ];
                    let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    if n2 > 1e-6 && n2 <= 1.0 {
                        break normalize(v);
                    }
                };
                let p = [a * d[0], b * d[1], c * d[2]];
                (p, normalize([p[0] / (a * a), p[1] / (b * b), p[2] / (c * c)]))
            }
            PrimitiveKind::Cylinder => {
                let r = 0.5 * (a + b);
                let side = 2.0 * PI * r * 2.0 * c;
                let cap = PI * a * b;
                let t = rng.random_range(0.0..side + 2.0 * cap);
                if t < side {
                    let th = rng.random_range(0.0..2.0 * PI);
                    let (s, co) = th.sin_cos();
                    let p = [a * co, b * s, rng.random_range(-c..=c)];
                    (p, normalize([co / a, s / b, 0.0]))
                } else {
                    let sign = if t < side + cap { 1.0 } else { -1.0 };
                    let (rad, th) = (rng.random::<f64>().sqrt(), rng.random_range(0.0..2.0 * PI));
                    let (s, co) = th.sin_cos();
                    ([a * rad * co, b * rad * s, sign * c], [0.0, 0.0, sign])
                }
            }
        }
    }

    fn to_world(&self, p: Vec3) -> Vec3 {
        let q = self.orientation.apply(p);
        [q[0] + self.center[0], q[1] + self.center[1], q[2] + self.center[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    /// Three boxes: a long arm, a short arm at a right angle, and a tab.
    LBracket,
    /// Cylindrical handle with an off-centre head and a claw.
    Hammer,
    /// Seat, back rest, and three legs of unequal length.
    Chair,
    /// One axis-aligned box; rotationally symmetric, used as a negative control.
    Slab,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::LBracket, ShapeClass::Hammer, ShapeClass::Chair, ShapeClass::Slab];

    pub fn id(self) -> u32 {
        match self {
            ShapeClass::LBracket => 0,
            ShapeClass::Hammer => 1,
            ShapeClass::Chair => 2,
            ShapeClass::Slab => 3,
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeClass::LBracket => "l-bracket",
            ShapeClass::Hammer => "hammer",
            ShapeClass::Chair => "chair",
            ShapeClass::Slab => "slab",
        })
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    /// Class label written to datasets; may differ from the class's own id.
    pub class_id: u32,
    pub primitives: Vec<Primitive>,
    /// Seeds the surface sampling used by the renderer.
    pub seed: u64,
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, v: f64, frac: f64) -> f64 {
    v * rng.random_range(1.0 - frac..=1.0 + frac)
}

fn class_primitives<R: Rng + ?Sized>(class: ShapeClass, rng: &mut R) -> Vec<Primitive> {
    use PrimitiveKind::*;
    let j = |rng: &mut R, v: f64| jitter(rng, v, 0.15);
    match class {
        ShapeClass::LBracket => {
            let (len, arm, t) = (j(rng, 0.9), j(rng, 0.5), j(rng, 0.12));
            let w = j(rng, 0.25);
            vec![
                Primitive::axis_aligned(Cuboid, [0.0, 0.0, 0.0], [len, t, w]),
                Primitive::axis_aligned(Cuboid, [len - t, arm + t, 0.0], [t, arm, w]),
                Primitive::axis_aligned(Cuboid, [-len + 0.15, -t - 0.12, w * 0.4], [0.15, 0.12, w * 0.6]),
            ]
        }
        ShapeClass::Hammer => {
            let (h, r) = (j(rng, 0.7), j(rng, 0.12));
            let (hx, hy) = (j(rng, 0.45), j(rng, 0.18));
            vec![
                Primitive::axis_aligned(Cylinder, [0.0, 0.0, 0.0], [r, r, h]),
                Primitive::axis_aligned(Cuboid, [hx * 0.3, 0.0, h], [hx, hy, hy]),
                Primitive {
                    kind: Ellipsoid,
                    center: [-hx * 0.9, hy * 0.5, h + hy],
                    half: [j(rng, 0.3), hy * 0.8, hy * 0.6],
                    orientation: Rotation::about_axis([0.0, 1.0, 0.0], 0.5),
                },
            ]
        }
        ShapeClass::Chair => {
            let (s, t) = (j(rng, 0.45), j(rng, 0.06));
            let back = j(rng, 0.5);
            let leg = j(rng, 0.4);
            let lr = 0.05;
            vec![
                Primitive::axis_aligned(Cuboid, [0.0, 0.0, 0.0], [s, s * 0.9, t]),
                Primitive::axis_aligned(Cuboid, [0.0, -s * 0.9 + t, back + t], [s, t, back]),
                Primitive::axis_aligned(Cylinder, [s - lr, s * 0.9 - lr, -leg], [lr, lr, leg]),
                Primitive::axis_aligned(Cylinder, [-s + lr, s * 0.9 - lr, -leg * 0.8], [lr, lr, leg * 0.8]),
                Primitive::axis_aligned(Cylinder, [0.0, -s * 0.9 + lr, -leg * 0.6], [lr * 1.5, lr * 1.5, leg * 0.6]),
            ]
        }
        ShapeClass::Slab => vec![Primitive::axis_aligned(Cuboid, [0.0, 0.0, 0.0], [j(rng, 0.8), j(rng, 0.5), j(rng, 0.3)])],
    }
}

impl ShapeSpec {
    /// Builds one jittered instance of `class`, scaled into the unit ball.
    pub fn generate(class: ShapeClass, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = class_primitives(class, &mut rng);
        let mut spec = ShapeSpec {
            class,
            class_id: class.id(),
            primitives: raw,
            seed,
        };
        spec.normalize();
        spec
    }

    /// Translates and scales so that every surface point lies within radius
    /// 0.95 of the origin.
    fn normalize(&mut self) {
        let pts = self.surface_samples(20_000);
        if pts.is_empty() {
            return;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (p, _) in &pts {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let c: Vec3 = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        let radius = pts
            .iter()
            .map(|(p, _)| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        // Sampling can miss the extreme corner; the margin absorbs it.
        let s = FIT_RADIUS / (radius * 1.01);
        for prim in &mut self.primitives {
            prim.center = std::array::from_fn(|k| (prim.center[k] - c[k]) * s);
            prim.half = prim.half.map(|h| h * s);
        }
    }

    /// Area-weighted surface samples `(point, normal)` in object coordinates.
    pub fn surface_samples(&self, count: usize) -> Vec<(Vec3, Vec3)> {
        if self.primitives.is_empty() {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let areas: Vec<f64> = self.primitives.iter().map(Primitive::area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        for (prim, area) in self.primitives.iter().zip(&areas) {
            let n = ((count as f64) * area / total).ceil() as usize;
            for _ in 0..n {
                let (p, nrm) = prim.sample_local(&mut rng);
                out.push((prim.to_world(p), prim.orientation.apply(nrm)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenderMode {
    #[default]
    Depth,
    Grayscale,
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(RenderMode::Depth),
            "grayscale" | "gray" => Ok(RenderMode::Grayscale),
            other => Err(Error::Config(format!("unknown render mode {other:?}"))),
        }
    }
}

/// Surface samples of a spec, ready to be rendered from many views.
pub struct Renderer {
    points: Vec<Vec3>,
}

impl Renderer {
    pub fn new(spec: &ShapeSpec, samples: usize) -> Self {
        Self {
            points: spec.surface_samples(samples).into_iter().map(|(p, _)| p).collect(),
        }
    }

    /// `H x W` single-channel image of the shape rotated by `rotation`.
    pub fn render(&self, rotation: &Rotation, height: usize, width: usize, mode: RenderMode) -> Vec<f32> {
        let s = height.min(width) as f64 / 2.0;
        let (cu, cv) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut zbuf = vec![f64::NEG_INFINITY; height * width];
        let m = rotation.matrix();
        for p in &self.points {
            let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2];
            let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2];
            let z = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2];
            let j = (cu + s * x).round();
            let i = (cv - s * y).round();
            if j < 0.0 || i < 0.0 || j >= width as f64 || i >= height as f64 {
                continue;
            }
            let idx = i as usize * width + j as usize;
            if z > zbuf[idx] {
                zbuf[idx] = z;
            }
        }
        match mode {
            RenderMode::Depth => zbuf
                .iter()
                .map(|&z| if z.is_finite() { depth_value(z) } else { 0.0 })
                .collect(),
            RenderMode::Grayscale => shade(&zbuf, height, width, s),
        }
    }
}

fn depth_value(z: f64) -> f32 {
    (((1.0 + z) / 2.0) as f32).clamp(MIN_FOREGROUND, 1.0)
}

/// Lambertian shading of the z-buffer with the light on the viewing axis.
fn shade(zbuf: &[f64], h: usize, w: usize, s: f64) -> Vec<f32> {
    let at = |i: isize, j: isize| -> Option<f64> {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            return None;
        }
        let z = zbuf[i as usize * w + j as usize];
        z.is_finite().then_some(z)
    };
    // derivative along one axis from whichever neighbours are foreground
    let diff = |z: f64, lo: Option<f64>, hi: Option<f64>| -> f64 {
        match (lo, hi) {
            (Some(a), Some(b)) => (b - a) * s / 2.0,
            (Some(a), None) => (z - a) * s,
            (None, Some(b)) => (b - z) * s,
            (None, None) => 0.0,
        }
    };
    let mut out = vec![0.0f32; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let Some(z) = at(i, j) else { continue };
            let dzdx = diff(z, at(i, j - 1), at(i, j + 1));
            // rows grow downwards, y grows upwards
            let dzdy = diff(z, at(i + 1, j), at(i - 1, j));
            let nz = 1.0 / (1.0 + dzdx * dzdx + dzdy * dzdy).sqrt();
            out[i as usize * w + j as usize] = (0.15 + 0.85 * nz) as f32;
        }
    }
    out
}

/// Renders `spec` rotated by `rotation` with the default sample count.
pub fn render(spec: &ShapeSpec, rotation: &Rotation, height: usize, width: usize, mode: RenderMode) -> Vec<f32> {
    Renderer::new(spec, DEFAULT_SAMPLES).render(rotation, height, width, mode)
}

/// Mean absolute pixel difference.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len().max(1) as f64
}

/// Smallest mean absolute difference between the canonical view and the
/// views rotated by each non-identity group element.
pub fn asymmetry_margin(renderer: &Renderer, group: &IcoGroup, size: usize) -> f64 {
    let base = renderer.render(&Rotation::identity(), size, size, RenderMode::Depth);
    (1..group.len())
        .map(|g| mean_abs_diff(&base, &renderer.render(group.element(g), size, size, RenderMode::Depth)))
        .fold(f64::INFINITY, f64::min)
}

/// Generates `count` instances of `class`, rejecting jitter draws whose
/// canonical render coincides with a rotated copy under some element of I60.
pub fn gen_shapes(
    class: ShapeClass,
    count: usize,
    seed: u64,
    group: &IcoGroup,
    size: usize,
    samples: usize,
) -> Result<Vec<ShapeSpec>> {
    if count == 0 {
        return Err(Error::Config("shape count must be at least 1".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..GUARD_ATTEMPTS {
                let spec = ShapeSpec::generate(class, derive_seed(seed, class.id() as u64 + 1, (i * GUARD_ATTEMPTS + attempt) as u64));
                if asymmetry_margin(&Renderer::new(&spec, samples), group, size) > GUARD_THRESHOLD {
                    return Ok(spec);
                }
            }
            Err(Error::AsymmetryGuardFailed {
                class: class.to_string(),
                attempts: GUARD_ATTEMPTS,
            })
        })
        .collect()
}

/// One rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class_id: u32,
    pub instance_id: u32,
    /// Label quaternion `(w, x, y, z)` exactly as stored on disk.
    pub quat: [f64; 4],
    /// Row-major `H x W x C`.
    pub image: Vec<f32>,
}

impl Sample {
    pub fn label(&self) -> Rotation {
        Rotation::from_quaternion(self.quat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    pub height: usize,
    pub width: usize,
    pub mode: RenderMode,
    pub samples: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            mode: RenderMode::Depth,
            samples: DEFAULT_SAMPLES,
        }
    }
}

/// Renders `views` Haar-random views of each spec. Instance ids follow the
/// order of `specs`; labels are canonicalized under `sym`.
pub fn make_dataset(
    specs: &[ShapeSpec],
    views: usize,
    seed: u64,
    sym: SymmetrySpec,
    settings: RenderSettings,
) -> Result<Dataset> {
    if views == 0 {
        return Err(Error::Config("views must be at least 1".into()));
    }
    sym.validate()?;
    let per_instance: Vec<Vec<Sample>> = specs
        .par_iter()
        .enumerate()
        .map(|(inst, spec)| {
            let renderer = Renderer::new(spec, settings.samples);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xDA7A, inst as u64));
            (0..views)
                .map(|_| {
                    let r = random_rotation(&mut rng);
                    Sample {
                        class_id: spec.class_id,
                        instance_id: inst as u32,
                        quat: canonicalize_label(&r, sym).quaternion(),
                        image: renderer.render(&r, settings.height, settings.width, settings.mode),
                    }
                })
                .collect()
        })
        .collect();
    Ok(Dataset {
        height: settings.height,
        width: settings.width,
        channels: 1,
        samples: per_instance.into_iter().flatten().collect(),
    })
}

/// Shapes of every class in `classes` (`instances` each, class ids by
/// position in the list) rendered from `views` random views.
pub fn generate_dataset(
    classes: &[ShapeClass],
    instances: usize,
    views: usize,
    seed: u64,
    sym: SymmetrySpec,
    settings: RenderSettings,
    group: &IcoGroup,
) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::Config("at least one shape class is required".into()));
    }
    let mut specs = Vec::with_capacity(classes.len() * instances);
    for (id, &class) in classes.iter().enumerate() {
        let size = settings.height.min(settings.width);
        for mut spec in gen_shapes(class, instances, seed, group, size, settings.samples)? {
            spec.class_id = id as u32;
            specs.push(spec);
        }
    }
    make_dataset(&specs, views, seed, sym, settings)
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Splits by instance id: a seeded shuffle of the distinct ids puts the
    /// first 80% in the training set.
    pub fn split(&self, seed: u64) -> (Dataset, Dataset) {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.instance_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5917, 0)));
        let n_train = ((ids.len() as f64) * TRAIN_FRACTION).round() as usize;
        let n_train = n_train.clamp(ids.len().min(1), ids.len());
        let train_ids: std::collections::HashSet<u32> = ids[..n_train].iter().copied().collect();
        let (train, test): (Vec<Sample>, Vec<Sample>) = self
            .samples
            .iter()
            .cloned()
            .partition(|s| train_ids.contains(&s.instance_id));
        (self.with_samples(train), self.with_samples(test))
    }

    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            samples,
        }
    }

    /// Keeps `views` samples of each instance, chosen by a seeded shuffle.
    pub fn subsample_views(&self, views: usize, seed: u64) -> Dataset {
        let mut by_instance: std::collections::BTreeMap<u32, Vec<&Sample>> = Default::default();
        for s in &self.samples {
            by_instance.entry(s.instance_id).or_default().push(s);
        }
        let mut out = Vec::new();
        for (id, mut group) in by_instance {
            group.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0515, id as u64)));
            out.extend(group.into_iter().take(views).cloned());
        }
        self.with_samples(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.samples.len() as u32, self.height as u32, self.width as u32, self.channels as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.samples {
            w.write_all(&s.class_id.to_le_bytes())?;
            w.write_all(&s.instance_id.to_le_bytes())?;
            for q in s.quat {
                w.write_all(&q.to_le_bytes())?;
            }
            for p in &s.image {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.samples.len() * (40 + 4 * self.image_len()));
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            *v = read_u32(&mut r).ok_or_else(|| bad("truncated header".into()))?;
        }
        let [version, n, h, w, c] = u32s;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (h, w, c) = (h as usize, w as usize, c as usize);
        let per = 8 + 32 + 4 * h * w * c;
        if r.len() != n as usize * per {
            return Err(bad(format!(
                "expected {} bytes of samples for {n} samples, found {}",
                n as usize * per,
                r.len()
            )));
        }
        let mut samples = Vec::with_capacity(n as usize);
        for chunk in r.chunks_exact(per) {
            let u = |k: usize| u32::from_le_bytes(chunk[k..k + 4].try_into().expect("4 bytes"));
            let f = |k: usize| f64::from_le_bytes(chunk[k..k + 8].try_into().expect("8 bytes"));
            let quat = [f(8), f(16), f(24), f(32)];
            let image = chunk[40..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            samples.push(Sample {
                class_id: u(0),
                instance_id: u(4),
                quat,
                image,
            });
        }
        Ok(Dataset {
            height: h,
            width: w,
            channels: c,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

/// Translates an `H x W` image by `(dx, dy)` pixels (right, down), zero fill.
pub fn shift_image(image: &[f32], height: usize, width: usize, dx: i64, dy: i64) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for i in 0..height as i64 {
        let si = i - dy;
        if si < 0 || si >= height as i64 {
            continue;
        }
        for j in 0..width as i64 {
            let sj = j - dx;
            if sj < 0 || sj >= width as i64 {
                continue;
            }
            out[(i * width as i64 + j) as usize] = image[(si * width as i64 + sj) as usize];
        }
    }
    out
}

/// Adds `delta` to foreground values, clamped to `[0, 1]`.
pub fn shift_depth(image: &[f32], delta: f64) -> Vec<f32> {
    image
        .iter()
        .map(|&v| if v > 0.0 { (v as f64 + delta).clamp(0.0, 1.0) as f32 } else { 0.0 })
        .collect()
}

/// Random integer translation in `[-max_shift_px, max_shift_px]` per axis and
/// a random foreground depth offset in `[-depth_shift_frac, depth_shift_frac]`.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    height: usize,
    width: usize,
    max_shift_px: usize,
    depth_shift_frac: f64,
    rng: &mut R,
) -> Sample {
    let m = max_shift_px as i64;
    let (dx, dy) = if m > 0 {
        (rng.random_range(-m..=m), rng.random_range(-m..=m))
    } else {
        (0, 0)
    };
    let mut image = if dx != 0 || dy != 0 {
        shift_image(&sample.image, height, width, dx, dy)
    } else {
        sample.image.clone()
    };
    if depth_shift_frac > 0.0 {
        image = shift_depth(&image, rng.random_range(-depth_shift_frac..=depth_shift_frac));
    }
    Sample {
        image,
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icogroup::build_group;
    use std::f64::consts::PI;

    fn rotate180(img: &[f32], h: usize, w: usize) -> Vec<f32> {
        (0..h * w).map(|i| img[(h - 1 - i / w) * w + (w - 1 - i % w)]).collect()
    }

    #[test]
    fn specs_are_deterministic_and_fit_unit_ball() {
        for class in ShapeClass::ALL {
            let a = ShapeSpec::generate(class, 17);
            assert_eq!(a, ShapeSpec::generate(class, 17));
            assert_ne!(a, ShapeSpec::generate(class, 18));
            for (p, _) in a.surface_samples(50_000) {
                assert!(crate::rotations::norm(p) <= 1.0, "{class}: {p:?}");
            }
        }
    }

    #[test]
    fn empty_spec_renders_blank() {
        let spec = ShapeSpec {
            class: ShapeClass::Slab,
            class_id: 0,
            primitives: vec![],
            seed: 0,
        };
        let img = render(&spec, &Rotation::identity(), 16, 16, RenderMode::Depth);
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_turn_about_view_axis_rotates_image() {
        let spec = ShapeSpec::generate(ShapeClass::Hammer, 3);
        let renderer = Renderer::new(&spec, DEFAULT_SAMPLES);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [RenderMode::Depth, RenderMode::Grayscale] {
            for _ in 0..5 {
                let r = random_rotation(&mut rng);
                let a = renderer.render(&r, 32, 32, mode);
                let b = renderer.render(&Rotation::rot_z(PI).compose(&r), 32, 32, mode);
                assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(mean_abs_diff(&b, &rotate180(&a, 32, 32)) < 2.0 / 255.0);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_nonempty() {
        let spec = ShapeSpec::generate(ShapeClass::LBracket, 5);
        let r = Rotation::about_axis([1.0, 2.0, 3.0], 0.7);
        let a = render(&spec, &r, 32, 32, RenderMode::Depth);
        assert_eq!(a, render(&spec, &r, 32, 32, RenderMode::Depth));
        let fg = a.iter().filter(|&&v| v > 0.0).count();
        assert!(fg > 50 && fg < 1024, "{fg} foreground pixels");
    }

    #[test]
    fn asymmetry_guard() {
        let g = build_group().unwrap();
        let specs = gen_shapes(ShapeClass::LBracket, 2, 1, &g, 32, 50_000).unwrap();
        assert_eq!(specs.len(), 2);
        let slab = gen_shapes(ShapeClass::Slab, 1, 1, &g, 32, 50_000);
        assert!(matches!(slab, Err(Error::AsymmetryGuardFailed { attempts: 20, .. })));
    }

    #[test]
    fn dataset_views_labels_and_split() {
        let specs: Vec<ShapeSpec> = (0..5).map(|i| ShapeSpec::generate(ShapeClass::LBracket, i)).collect();
        let settings = RenderSettings {
            height: 16,
            width: 16,
            samples: 20_000,
            ..RenderSettings::default()
        };
        let ds = make_dataset(&specs, 60, 9, SymmetrySpec::None, settings).unwrap();
        assert_eq!(ds.samples.len(), 300);
        for id in 0..5 {
            assert_eq!(ds.samples.iter().filter(|s| s.instance_id == id).count(), 60);
        }
        // without symmetry the labels are the sampled rotations themselves
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9, 0xDA7A, 0));
        let first = random_rotation(&mut rng);
        assert_eq!(ds.samples[0].quat, first.quaternion());
        let (train, test) = ds.split(3);
        assert_eq!(train.samples.len() + test.samples.len(), 300);
        assert_eq!(test.samples.len(), 60);
        for s in &test.samples {
            assert!(train.samples.iter().all(|t| t.instance_id != s.instance_id));
        }
        let sub = train.subsample_views(15, 1);
        assert_eq!(sub.samples.len(), 60);
    }

    #[test]
    fn symmetric_labels_are_canonical() {
        let specs = vec![ShapeSpec::generate(ShapeClass::Hammer, 1)];
        let settings = RenderSettings {
            height: 8,
            width: 8,
            samples: 2_000,
            ..RenderSettings::default()
        };
        for sym in [SymmetrySpec::ContinuousZ, SymmetrySpec::CyclicZ(4)] {
            let ds = make_dataset(&specs, 20, 2, sym, settings).unwrap();
            for s in &ds.samples {
                let l = s.label();
                let again = canonicalize_label(&l, sym);
                assert!(crate::rotations::geodesic_angle(&l, &again) < 1e-9);
            }
        }
    }

    #[test]
    fn files_round_trip_bit_exactly() {
        let specs: Vec<ShapeSpec> = (0..2).map(|i| ShapeSpec::generate(ShapeClass::Chair, i)).collect();
        let settings = RenderSettings {
            height: 8,
            width: 8,
            samples: 5_000,
            ..RenderSettings::default()
        };
        let ds = make_dataset(&specs, 3, 1, SymmetrySpec::None, settings).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.i2id");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..4], b"I2ID");
        assert_eq!(bytes.len(), 24 + 6 * (40 + 4 * 64));
        assert!(Dataset::from_bytes(&bytes[..30], &path).is_err());
        assert!(matches!(Dataset::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img: Vec<f32> = (0..64).map(|i| (i as f32 + 1.0) / 64.0).collect();
        let s = Sample {
            class_id: 0,
            instance_id: 0,
            quat: [1.0, 0.0, 0.0, 0.0],
            image: img.clone(),
        };
        assert_eq!(augment(&s, 8, 8, 0, 0.0, &mut rng), s);
        let there = shift_image(&img, 8, 8, 3, 0);
        let back = shift_image(&there, 8, 8, -3, 0);
        for i in 0..8 {
            for j in 0..5 {
                assert_eq!(back[i * 8 + j], img[i * 8 + j]);
            }
        }
        let d = shift_depth(&[0.0, 0.5, 0.95], 0.1);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.6).abs() < 1e-6 && d[2] == 1.0);
        let big = augment(&s, 8, 8, 30, 0.3, &mut rng);
        assert_eq!(big.image.len(), 64);
    }
}

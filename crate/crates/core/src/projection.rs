//! Orthographic projection of a dense feature map onto the camera-facing
//! submesh points.
//!
//! Each visible point `p` lands at pixel `(u, v)` and gathers the feature map
//! under a normalized Gaussian window centred there. Feature maps use the
//! channel-first layout `[k, H, W]` produced by the encoder.

use std::fmt;
use std::str::FromStr;

use i2i_tensor::{Scalar, Tensor, Tape, Var};

use crate::error::{Error, Result};
use crate::icogroup::{Quotient, NUM_VERTICES};

/// Points with `z` at or above this are treated as facing the camera.
pub const VISIBILITY_Z: f64 = -1e-9;

/// Visible submesh points in the standard orientation (direct enumeration).
pub const VISIBLE_SUBMESH: usize = 25;
/// Visible icosahedron vertices in the standard orientation.
pub const VISIBLE_VERTICES: usize = 8;

pub const DEFAULT_SIGMA: f64 = 0.2;
pub const DEFAULT_COVERAGE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// All 42 submesh points; per-point values are `m x n` filter matrices.
    Submesh42,
    /// Only the 12 icosahedron vertices.
    Sparse12,
    /// Submesh points carry `n`-vectors and the feature sphere holds the
    /// matrices instead.
    Vector,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Submesh42 => "submesh42",
            Scheme::Sparse12 => "sparse12",
            Scheme::Vector => "vector",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "submesh42" => Ok(Scheme::Submesh42),
            "sparse12" => Ok(Scheme::Sparse12),
            "vector" => Ok(Scheme::Vector),
            other => Err(Error::Config(format!(
                "unknown projection scheme {other:?} (expected submesh42, sparse12, vector)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionPlan {
    pub scheme: Scheme,
    pub height: usize,
    pub width: usize,
    /// Submesh indices of the visible points, ascending.
    pub visible: Vec<usize>,
    /// `(u, v)` = (column, row) pixel coordinates of each visible point.
    pub pixel_coords: Vec<(f64, f64)>,
    /// Row-major `[visible.len(), H * W]`; each row sums to 1.
    pub weights: Vec<f64>,
}

/// Per-point filter values on the visible set; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFilter {
    pub visible: Vec<usize>,
    /// `[visible.len(), m, n]`, or `[visible.len(), k]` for the vector scheme.
    pub values: Tensor<f64>,
}

pub fn build_plan(
    quotient: &Quotient,
    height: usize,
    width: usize,
    sigma: f64,
    coverage: f64,
    scheme: Scheme,
) -> Result<ProjectionPlan> {
    if height < 2 || width < 2 {
        return Err(Error::Config(format!(
            "projection grid must be at least 2x2, got {height}x{width}"
        )));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage must lie in (0, 1], got {coverage}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let candidates = match scheme {
        Scheme::Sparse12 => NUM_VERTICES,
        Scheme::Submesh42 | Scheme::Vector => quotient.submesh.len(),
    };
    let visible: Vec<usize> = (0..candidates)
        .filter(|&p| quotient.submesh[p][2] >= VISIBILITY_Z)
        .collect();
    if visible.is_empty() {
        return Err(Error::EmptyVisibleSet);
    }
    let s = coverage * height.min(width) as f64 / 2.0;
    let sigma_px = sigma * s;
    let (cu, cv) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let mut pixel_coords = Vec::with_capacity(visible.len());
    let mut weights = Vec::with_capacity(visible.len() * height * width);
    for &p in &visible {
        let [x, y, _] = quotient.submesh[p];
        let (u, v) = (cu + s * x, cv - s * y);
        pixel_coords.push((u, v));
        let start = weights.len();
        for i in 0..height {
            for j in 0..width {
                let d2 = (j as f64 - u).powi(2) + (i as f64 - v).powi(2);
                weights.push((-d2 / (2.0 * sigma_px * sigma_px)).exp());
            }
        }
        let row = &mut weights[start..];
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config(format!(
                "sigma {sigma} too small: point {p} has no pixel support"
            )));
        }
        row.iter_mut().for_each(|w| *w /= total);
    }
    Ok(ProjectionPlan {
        scheme,
        height,
        width,
        visible,
        pixel_coords,
        weights,
    })
}

impl ProjectionPlan {
    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    /// Weight matrix as a tensor `[visible, H * W]`.
    pub fn weight_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.visible.len(), self.height * self.width], &self.weights)
            .expect("weights sized at construction")
    }

    /// Projects a `[k, H, W]` feature map into `[visible, m, n]` filter values
    /// (`[visible, k]` when `n` is `None`). Linear in `y`.
    pub fn project_var<'t, T: Scalar>(
        &self,
        y: Var<'t, T>,
        m: usize,
        n: Option<usize>,
    ) -> Result<Var<'t, T>> {
        let shape = y.shape();
        let k = match *shape.as_slice() {
            [k, h, w] if h == self.height && w == self.width => k,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "projection expects [k, {}, {}], got {shape:?}",
                    self.height, self.width
                )))
            }
        };
        if let Some(n) = n {
            if m * n != k {
                return Err(Error::ShapeMismatch(format!(
                    "feature map has k = {k} channels, filter needs m*n = {m}*{n}"
                )));
            }
        }
        let flat = y.reshape(&[k, self.height * self.width])?;
        let w = y.tape().constant(self.weight_tensor());
        let raw = w.matmul_nt(flat)?;
        Ok(match n {
            Some(n) => raw.reshape(&[self.visible.len(), m, n])?,
            None => raw,
        })
    }

    /// Tape-free projection in f64.
    pub fn project(&self, y: &Tensor<f64>, m: usize, n: Option<usize>) -> Result<DynamicFilter> {
        let tape = Tape::new();
        let v = self.project_var(tape.constant(y.clone()), m, n)?;
        Ok(DynamicFilter {
            visible: self.visible.clone(),
            values: (*v.value()).clone(),
        })
    }
}

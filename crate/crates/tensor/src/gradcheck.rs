use crate::{Result, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Magnitude below which errors are measured absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Compares the tape gradient of a scalar function against central
/// differences with step `eps`, element by element over every parameter.
///
/// `f` is re-evaluated on a fresh tape for every perturbation, so it must be
/// deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel_err || rel.is_nan() {
                max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = (pi, ei);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        tol,
        passed: max_rel_err < tol,
    })
}

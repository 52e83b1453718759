//! Central finite-difference check of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input, per coordinate.
    pub errors: Vec<Vec<f64>>,
    pub max_error: f64,
    /// (input, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    value
        .item()
        .ok_or_else(|| Error::NotScalar(value.shape().to_vec()))
}

/// Compare the tape gradient of the scalar function `f` at `points` against
/// `(f(x + h) - f(x - h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item().unwrap_or(f64::NAN);
    if !base.is_finite() {
        return Err(Error::NonFinite {
            input: 0,
            coordinate: 0,
            value: base,
        });
    }
    let grads = g.backward(out)?;

    let mut errors = Vec::with_capacity(points.len());
    let mut max_error = 0.0;
    let mut worst = (0, 0);
    let mut probe = points.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every point is a param leaf");
        let mut errs = Vec::with_capacity(analytic.numel());
        for c in 0..analytic.numel() {
            let orig = points[i].data()[c];
            probe[i].data_mut()[c] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig;
            let a = analytic.data()[c];
            for v in [plus, minus, a] {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        input: i,
                        coordinate: c,
                        value: v,
                    });
                }
            }
            let e = relative_error(a, (plus - minus) / (2.0 * h));
            if e > max_error {
                max_error = e;
                worst = (i, c);
            }
            errs.push(e);
        }
        errors.push(errs);
    }
    Ok(GradCheckReport {
        errors,
        max_error,
        worst,
        tolerance,
    })
}

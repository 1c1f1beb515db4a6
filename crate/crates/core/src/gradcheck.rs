//! Central finite-difference verification of backward passes.

use crate::graph::{Graph, GraphError, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("non-finite value at input {input}, coordinate {coord}")]
    NonFinite { input: usize, coord: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Max over coordinates of `|a - b| / max(1, |a|, |b|)` between the backward
/// gradient and a central difference of `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, GraphError>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), step)
}

/// Same as [`grad_check`] over several leaf tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, GraphError>,
{
    grad_check_report(f, points, step, 1e-4).map(|r| r.max_rel_err)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// Max over coordinates of `|a - b| / max(1, |a|, |b|)`.
    pub max_rel_err: f64,
    /// Coordinates whose stencil `x ± step` straddles a kink of a piecewise
    /// smooth function, where a central difference is not a derivative.
    pub kinks: usize,
}

/// [`grad_check_many`] that also flags coordinates where the one-sided
/// differences disagree by more than a kink biasing the central difference
/// by `kink_tol` (relative) would produce, for example a leaky-ReLU
/// pre-activation within `step` of zero. Strong smooth curvature can also be
/// flagged; flags never hide an error, they only mark the point as unusable.
pub fn grad_check_report<F>(f: F, points: &[Tensor], step: f64, kink_tol: f64) -> Result<GradReport, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, GraphError>,
{
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let eval = |pts: &[Tensor]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item();
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    for (input, grad) in analytic.iter().enumerate() {
        if let Some(coord) = grad.data().iter().position(|a| !a.is_finite()) {
            return Err(GradCheckError::NonFinite { input, coord });
        }
    }

    let mut worst = 0.0f64;
    let mut kinks = 0;
    let mut pts = points.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for (coord, &a) in grad.data().iter().enumerate() {
            let x0 = pts[input].data()[coord];
            pts[input].data_mut()[coord] = x0 + step;
            let up = eval(&pts)?;
            pts[input].data_mut()[coord] = x0 - step;
            let down = eval(&pts)?;
            pts[input].data_mut()[coord] = x0;
            if !up.is_finite() || !down.is_finite() {
                return Err(GradCheckError::NonFinite { input, coord });
            }
            let b = (up - down) / (2.0 * step);
            let err = (a - b).abs() / 1f64.max(a.abs()).max(b.abs());
            worst = worst.max(err);
            // A kink at distance d < step with slope jump J biases the central
            // difference by |second| / (2·step), where second = J·(step − d).
            // Flag the coordinate when that bias could exceed `kink_tol`.
            let second = (up - f0) - (f0 - down);
            if second.abs() > 2.0 * kink_tol * step * 1f64.max(b.abs()) + 64.0 * f64::EPSILON * 1f64.max(f0.abs()) {
                kinks += 1;
            }
        }
    }
    Ok(GradReport {
        max_rel_err: worst,
        kinks,
    })
}

//! Finite-difference probes.
//!
//! Central differences serve two roles: they are the independent oracle the
//! gradient tests compare analytic gradients against, and they back the
//! `finite_diff` mode of saliency scoring. Both uses share these helpers so
//! there is exactly one definition of the stencils.

use crate::error::Result;

/// First derivative by central difference: (f(x+h) - f(x-h)) / (2h).
pub fn central_diff(mut f: impl FnMut(f64) -> Result<f64>, x0: f64, h: f64) -> Result<f64> {
    let hi = f(x0 + h)?;
    let lo = f(x0 - h)?;
    Ok((hi - lo) / (2.0 * h))
}

/// Second derivative by central difference: (f(x+h) - 2f(x) + f(x-h)) / h^2.
///
/// Exact (up to rounding) for quadratics, which is what the scalar oracle
/// tests exploit.
pub fn second_diff(mut f: impl FnMut(f64) -> Result<f64>, x0: f64, h: f64) -> Result<f64> {
    let hi = f(x0 + h)?;
    let mid = f(x0)?;
    let lo = f(x0 - h)?;
    Ok((hi - 2.0 * mid + lo) / (h * h))
}

/// Relative agreement between an analytic value and a finite-difference
/// estimate: true when |a - b| <= tol * max(|a|, |b|) or both are tiny.
pub fn grad_close(analytic: f64, estimate: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - estimate).abs();
    diff <= rel_tol * analytic.abs().max(estimate.abs()) || diff <= abs_floor
}

use crate::netcore::{
    backward, cross_entropy_from_trace, forward_trace, Batch, LossKind, Model, ParamLoc,
};

/// Outcome of checking a model's analytic gradients against central
/// differences of the cross-entropy loss.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar parameters probed.
    pub checked: usize,
    /// Worst relative disagreement seen.
    pub worst_rel: f64,
    /// Parameters whose analytic and estimated gradients disagreed:
    /// (location, analytic, estimate).
    pub failures: Vec<(ParamLoc, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// True when any relu input sits within `margin` of its kink for this batch,
/// where a finite-difference step could cross the nondifferentiable point.
/// Gradient checks skip such instances; the subgradient is not wrong, the
/// stencil is.
pub fn has_relu_kink(model: &Model, batch: &Batch, training: bool, margin: f64) -> crate::error::Result<bool> {
    use crate::netcore::Layer;
    let trace = forward_trace(model, &batch.inputs, training)?;
    for (i, layer) in model.layers().iter().enumerate() {
        if matches!(layer, Layer::Relu) {
            let near = trace.inputs[i].data().iter().any(|v| v.abs() < margin);
            if near {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Compares every parameter gradient (optionally subsampled with `stride`)
/// of the mean cross-entropy loss against a central difference with step
/// `h`. Disagreements beyond `rel_tol` (with `abs_floor` slack for tiny
/// gradients) are reported.
pub fn check_param_gradients(
    model: &Model,
    batch: &Batch,
    training: bool,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    stride: usize,
) -> crate::error::Result<GradCheckReport> {
    let out = backward(model, batch, LossKind::CrossEntropy, training)?;
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let stride = stride.max(1);
    for (k, loc) in model.param_locs().into_iter().enumerate() {
        if k % stride != 0 {
            continue;
        }
        let x0 = model.get_param(loc).expect("loc enumerated from model");
        let estimate = central_diff(
            |v| {
                let mut m = model.clone();
                m.set_param(loc, v)?;
                let trace = forward_trace(&m, &batch.inputs, training)?;
                cross_entropy_from_trace(&trace, &batch.labels)
            },
            x0,
            h,
        )?;
        let analytic = out.grads.get(loc).unwrap_or(0.0);
        report.checked += 1;
        let denom = analytic.abs().max(estimate.abs());
        if denom > 0.0 {
            report.worst_rel = report.worst_rel.max((analytic - estimate).abs() / denom);
        }
        if !grad_close(analytic, estimate, rel_tol, abs_floor) {
            report.failures.push((loc, analytic, estimate));
        }
    }
    Ok(report)
}

/// Same comparison for the gradient w.r.t. the inputs.
pub fn check_input_gradients(
    model: &Model,
    batch: &Batch,
    training: bool,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    stride: usize,
) -> crate::error::Result<GradCheckReport> {
    let out = backward(model, batch, LossKind::CrossEntropy, training)?;
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let stride = stride.max(1);
    for i in (0..batch.inputs.len()).step_by(stride) {
        let x0 = batch.inputs.data()[i];
        let estimate = central_diff(
            |v| {
                let mut b = batch.clone();
                b.inputs.data_mut()[i] = v;
                let trace = forward_trace(model, &b.inputs, training)?;
                cross_entropy_from_trace(&trace, &b.labels)
            },
            x0,
            h,
        )?;
        let analytic = out.input_grad.data()[i];
        report.checked += 1;
        let denom = analytic.abs().max(estimate.abs());
        if denom > 0.0 {
            report.worst_rel = report.worst_rel.max((analytic - estimate).abs() / denom);
        }
        if !grad_close(analytic, estimate, rel_tol, abs_floor) {
            report.failures.push((
                ParamLoc {
                    layer: usize::MAX,
                    kind: crate::netcore::ParamKind::Weight,
                    index: i,
                },
                analytic,
                estimate,
            ));
        }
    }
    Ok(report)
}

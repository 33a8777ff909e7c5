//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::tensor::{Result, Tensor, TensorError};

use super::graph::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-7, 1e-3]`.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub magnitude_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            magnitude_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` against central differences for every
/// entry of every parameter.
///
/// `f` receives a fresh graph and one leaf per parameter (in order) and must
/// return a scalar. It is called `1 + 2·Σ numel` times and must be
/// deterministic.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                what: "objective during gradient check".into(),
            });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).all_finite() {
        return Err(TensorError::NonFinite {
            what: "objective during gradient check".into(),
        });
    }
    let grads = g.backward(loss)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        if !analytic.all_finite() {
            return Err(TensorError::NonFinite {
                what: format!("analytic gradient of {name}"),
            });
        }
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for k in 0..tensor.len() {
            let orig = tensor.data()[k];
            values[pi].data_mut()[k] = orig + opts.step;
            let plus = evaluate(&values)?;
            values[pi].data_mut()[k] = orig - opts.step;
            let minus = evaluate(&values)?;
            values[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[k];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric, opts.magnitude_floor));
        }
        report.push(ParamCheck {
            name: name.clone(),
            numel: tensor.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel <= opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        params: report,
    })
}

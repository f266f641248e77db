//! Central finite-difference checks of autodiff gradients.
//!
//! Meant for `f64` parameter stores: each probed entry is nudged by `±step`
//! and the scalar loss re-evaluated.

use candle_core::{Device, Tensor};

use crate::error::{NetError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute slack added to the bound for near-zero gradients.
    pub abs_floor: f64,
    /// Parameters probed, spread evenly over those with a gradient.
    pub params: usize,
    /// Largest-gradient entries probed per parameter.
    pub entries: usize,
    /// Parameters whose peak gradient is below this are not probed.
    pub min_grad: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-3,
            abs_floor: 1e-8,
            params: 6,
            entries: 2,
            min_grad: 1e-6,
        }
    }
}

/// One probed entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|numeric − analytic| / max(|numeric|, |analytic|)`, or 0 when both vanish.
    pub fn rel_error(&self) -> f64 {
        let scale = self.numeric.abs().max(self.analytic.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.numeric - self.analytic).abs() / scale
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub probes: Vec<Probe>,
    pub failures: Vec<Probe>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.failures.is_empty()
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.probes.iter().map(Probe::rel_error).fold(0.0, f64::max)
    }
}

fn set_entry(ps: &ParamStore, name: &str, idx: usize, v: f64) -> Result<f64> {
    let var = ps.var(name).ok_or_else(|| NetError::Config(format!("no parameter {name}")))?;
    let mut data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    let old = data[idx];
    data[idx] = v;
    ps.assign(name, &Tensor::from_vec(data, var.dims(), &Device::Cpu)?)?;
    Ok(old)
}

/// Compares the autodiff gradient of `loss()` with central differences on
/// a sample of parameter entries. `loss` must rebuild the graph from the
/// current parameter values on every call.
pub fn check(ps: &ParamStore, loss: impl Fn() -> Result<Tensor>, opts: &GradCheck) -> Result<GradReport> {
    let grads = loss()?.backward()?;
    let mut candidates = Vec::new();
    for (name, var) in ps.vars() {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = g.flatten_all()?.to_vec1::<f64>()?;
        if g.iter().any(|v| v.abs() > opts.min_grad) {
            candidates.push((name.clone(), g));
        }
    }
    let stride = (candidates.len() / opts.params.max(1)).max(1);
    let value = || -> Result<f64> { Ok(loss()?.to_scalar::<f64>()?) };
    let mut report = GradReport {
        probes: Vec::new(),
        failures: Vec::new(),
    };
    for (name, g) in candidates.iter().step_by(stride).take(opts.params) {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &idx in order.iter().take(opts.entries) {
            let old = set_entry(ps, name, idx, 0.0)?;
            set_entry(ps, name, idx, old + opts.step)?;
            let up = value()?;
            set_entry(ps, name, idx, old - opts.step)?;
            let down = value()?;
            set_entry(ps, name, idx, old)?;
            let probe = Probe {
                param: name.clone(),
                index: idx,
                analytic: g[idx],
                numeric: (up - down) / (2.0 * opts.step),
            };
            let bound = opts.rel_tol * probe.numeric.abs().max(probe.analytic.abs()) + opts.abs_floor;
            if (probe.numeric - probe.analytic).abs() > bound {
                report.failures.push(probe.clone());
            }
            report.probes.push(probe);
        }
    }
    Ok(report)
}

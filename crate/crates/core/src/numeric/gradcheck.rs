//! Central-difference gradient oracle.
//!
//! Every analytic backward pass in the crate is checked against this: each
//! parameter coordinate is nudged by ±eps, the loss re-evaluated, and the
//! resulting slope compared with the stored analytic gradient.

use rand::seq::index;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::rng;

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry about 1e-11 of rounding noise, so smaller gradients are compared
/// absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes further apart than this (relatively) mean a relu kink lies
/// inside the ±eps window; such coordinates are counted, not scored.
pub const KINK_RATIO: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per tensor
    /// (`None` checks every coordinate).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub kinks_skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the analytic gradients stored in `params` against central
/// differences of `loss_fn`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &ParamSet<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!(
            "eps must be positive, got {}",
            opts.eps
        )));
    }
    let base_a = loss_fn(params);
    let base_b = loss_fn(params);
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Oracle(format!(
            "loss function is not deterministic ({base_a} vs {base_b})"
        )));
    }

    let mut probe = params.clone();
    let mut picker = rng::seeded(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
    };

    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let len = params.entry(id).value.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < len => {
                let mut c = index::sample(&mut picker, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let original = probe.value(id)[i];
            probe.value_mut(id)[i] = original + opts.eps;
            let up = loss_fn(&probe);
            probe.value_mut(id)[i] = original - opts.eps;
            let down = loss_fn(&probe);
            probe.value_mut(id)[i] = original;

            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = params.grad(id)[i];
            let right = (up - base_a) / opts.eps;
            let left = (base_a - down) / opts.eps;
            if (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()).max(1e-6) {
                report.kinks_skipped += 1;
                continue;
            }
            let err = relative_error(analytic, numeric);
            if !err.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite comparison at {}[{i}]",
                    params.entry(id).name
                )));
            }
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst_param.is_none() {
                report.max_relative_error = err;
                report.worst_param = Some(params.entry(id).name.clone());
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences `(f(x+eps) - f(x-eps)) / (2 eps)` against the
//! accumulated analytic gradient, coordinate by coordinate. Meant to run in
//! 64-bit: the default tolerance 1e-4 is unreachable in f32.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{with_no_grad, Elem, Tensor};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat coordinate over the concatenation of all checked parameters.
    pub worst_coordinate: usize,
    /// Name of the parameter holding the worst coordinate.
    pub worst_param: String,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            worst_coordinate: 0,
            worst_param: String::new(),
            checked: 0,
            passed: true,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Check `f`'s reverse-mode gradient w.r.t. the named parameters.
///
/// `f` must be deterministic and rebuild its graph on every call. All
/// coordinates of every parameter are probed; use
/// [`finite_diff_gradcheck_sampled`] for large parameter sets.
pub fn finite_diff_gradcheck<E: Elem>(
    f: &dyn Fn() -> Result<Tensor<E>>,
    params: &[(String, Tensor<E>)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.numel()).map(move |ci| (pi, ci)))
        .collect();
    run_check(f, params, &coords, eps, tol)
}

/// Like [`finite_diff_gradcheck`], but probes `samples` uniformly random
/// coordinates per parameter (with replacement when a parameter is smaller
/// than the sample count).
pub fn finite_diff_gradcheck_sampled<E: Elem>(
    f: &dyn Fn() -> Result<Tensor<E>>,
    params: &[(String, Tensor<E>)],
    samples: usize,
    rng: &mut ChaCha8Rng,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut coords = Vec::with_capacity(params.len() * samples);
    for (pi, (_, t)) in params.iter().enumerate() {
        let n = t.numel();
        for _ in 0..samples {
            coords.push((pi, rng.gen_range(0..n)));
        }
    }
    run_check(f, params, &coords, eps, tol)
}

fn run_check<E: Elem>(
    f: &dyn Fn() -> Result<Tensor<E>>,
    params: &[(String, Tensor<E>)],
    coords: &[(usize, usize)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    for (name, p) in params {
        if !p.requires_grad() {
            return Err(Error::invalid(format!(
                "gradcheck: parameter `{name}` does not require grad"
            )));
        }
        p.zero_grad();
    }

    // Analytic pass.
    let loss = f()?;
    let base = loss.item().to_f64();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradcheck: non-finite objective {base}"
        )));
    }
    loss.backward()?;
    let analytic: Vec<Vec<E>> = params
        .iter()
        .map(|(name, p)| {
            p.grad().ok_or_else(|| {
                Error::invalid(format!("gradcheck: parameter `{name}` has no grad buffer"))
            })
        })
        .collect::<Result<_>>()?;
    drop(loss);

    // Flat-coordinate offsets for reporting.
    let mut offsets = vec![0usize; params.len()];
    let mut total = 0usize;
    for (i, (_, p)) in params.iter().enumerate() {
        offsets[i] = total;
        total += p.numel();
    }

    let e = E::from_f64(eps);
    let mut report = GradCheckReport::empty();
    for &(pi, ci) in coords {
        let p = &params[pi].1;
        p.nudge(ci, e);
        let plus = with_no_grad(|| f())?.item().to_f64();
        p.nudge(ci, -(e + e));
        let minus = with_no_grad(|| f())?.item().to_f64();
        p.nudge(ci, e);
        if !plus.is_finite() || !minus.is_finite() {
            return Ok(GradCheckReport {
                max_relative_error: f64::INFINITY,
                worst_coordinate: offsets[pi] + ci,
                worst_param: params[pi].0.clone(),
                checked: report.checked + 1,
                passed: false,
            });
        }
        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic[pi][ci].to_f64();
        let err = rel_err(fd, an);
        report.checked += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_coordinate = offsets[pi] + ci;
            report.worst_param = params[pi].0.clone();
        }
    }
    report.passed = report.max_relative_error <= tol;
    Ok(report)
}

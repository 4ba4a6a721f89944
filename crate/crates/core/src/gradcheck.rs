//! Central finite-difference gradient checking.
//!
//! Each coordinate is perturbed by `±h`; the step actually taken is measured
//! after rounding to `f32`, so the quotient uses the exact denominator.
//! Where the two one-sided slopes disagree the objective has a kink inside
//! the step (a ReLU crossing zero); there the analytic value is compared
//! against the nearer one-sided slope instead. A coordinate that fails at
//! `h` is retried at `h/4` and `h/16`. It fails only if some step saw no kink
//! and still disagreed; if every step saw a kink and neither side matched it
//! is reported as skipped.

use alloc::string::String;
use alloc::vec::Vec;

use crate::params::Parameterized;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Passed against a one-sided slope.
    pub one_sided: usize,
    /// A kink inside every step and neither side matched.
    pub skipped_nonsmooth: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn central_difference<F>(mut f: F, x: &[f32], h: f32) -> Vec<f64>
where
    F: FnMut(&[f32]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let (plus, minus) = (x[i] + h, x[i] - h);
            probe[i] = plus;
            let fp = f(&probe);
            probe[i] = minus;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (plus as f64 - minus as f64)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` on the coordinates
/// listed in `indices` (all coordinates when `None`).
pub fn check_gradient<F>(mut f: F, x: &[f32], analytic: &[f32], h: f32, rel_tol: f64, indices: Option<&[usize]>) -> GradCheckReport
where
    F: FnMut(&[f32]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match parameter length");
    let all: Vec<usize>;
    let idx = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport::default();
    let mut probe = x.to_vec();
    let f0 = f(x);
    for &i in idx {
        let a = analytic[i] as f64;
        let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        let mut passed = None;
        let mut smooth_err: Option<f64> = None;
        for step in [h, h / 4.0, h / 16.0] {
            let (plus, minus) = (x[i] + step, x[i] - step);
            probe[i] = plus;
            let fp = f(&probe);
            probe[i] = minus;
            let fm = f(&probe);
            probe[i] = x[i];

            let up = (fp - f0) / (plus as f64 - x[i] as f64);
            let down = (f0 - fm) / (x[i] as f64 - minus as f64);
            let scale = up.abs().max(down.abs()).max(1.0);
            let kink = (up - down).abs() > rel_tol * scale;
            let err = if kink {
                rel(up).min(rel(down))
            } else {
                rel((fp - fm) / (plus as f64 - minus as f64))
            };
            if err <= rel_tol {
                passed = Some((err, kink));
                break;
            }
            if !kink {
                smooth_err = Some(smooth_err.map_or(err, |e: f64| e.min(err)));
            }
        }
        let (err, kink) = match (passed, smooth_err) {
            (Some(p), _) => p,
            (None, Some(e)) => (e, false),
            (None, None) => {
                report.skipped_nonsmooth += 1;
                continue;
            }
        };
        report.one_sided += kink as usize;
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
        if err > rel_tol {
            report.failures += 1;
        }
    }
    report
}

/// Largest relative error of one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks every parameter tensor of `model` against `grads` (a value of the
/// same type holding the analytic gradient), probing up to `per_tensor`
/// evenly spaced coordinates of each tensor.
pub fn check_model_gradient<M, F>(model: &M, grads: &M, mut loss: F, per_tensor: usize, h: f32, rel_tol: f64) -> Vec<ParamCheck>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> f64,
{
    let analytic: Vec<Vec<f32>> = grads.params("").into_iter().map(|p| p.data.to_vec()).collect();
    let params = model.params("");
    let mut out = Vec::with_capacity(params.len());
    for (slot, p) in params.iter().enumerate() {
        let base = p.data.to_vec();
        let step = (base.len() / per_tensor.max(1)).max(1);
        let idx: Vec<usize> = (0..base.len()).step_by(step).take(per_tensor.max(1)).collect();
        let f = |v: &[f32]| {
            let mut probe = model.clone();
            probe.params_mut("")[slot].data.copy_from_slice(v);
            loss(&probe)
        };
        let report = check_gradient(f, &base, &analytic[slot], h, rel_tol, Some(&idx));
        out.push(ParamCheck {
            name: p.name.clone(),
            report,
        });
    }
    out
}

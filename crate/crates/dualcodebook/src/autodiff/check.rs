//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every analytic gradient in the crate:
//! perturb one parameter entry at a time, evaluate the loss twice, and compare
//! `(f(p+eps) - f(p-eps)) / (2 eps)` against the tape's gradient.
//!
//! Two situations make a finite-difference estimate meaningless, and both are
//! skipped and reported rather than failed:
//!
//! * the entry sits *on* a non-differentiable point (a relu kink, a max or
//!   nearest-neighbor tie) — detected by comparing the two one-sided slopes,
//!   which then disagree by the slope jump;
//! * a switch lies strictly *inside* the probe interval `[p-eps, p+eps]` — at
//!   the point itself the function is differentiable, but the quotient mixes
//!   two smooth branches. Detected by re-estimating at `eps/2`: for a smooth
//!   function the two estimates agree to `O(eps^2)`, while a straddled switch
//!   moves the estimate at first order.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]. Each loss evaluation carries
/// rounding noise of a few ulps, so the quotient `(f(p+eps) - f(p-eps))/2eps`
/// is only accurate to roughly `|f| * 1e-11` in absolute terms at the default
/// step; gradient entries below this floor are certified absolutely (at
/// `floor * tolerance`) rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// One-sided slopes disagreeing by more than this fraction of their scale mark
/// a non-differentiable point.
const KINK_TOL: f64 = 1e-3;

/// Relative disagreement between the full-step and half-step central
/// estimates that marks a switch inside the probe interval. Smooth truncation
/// error scales with `eps^2 * f'''`, orders of magnitude below this.
const STRADDLE_REL: f64 = 1e-6;

/// Absolute disagreement floor for the straddle test, above quotient noise.
const STRADDLE_ABS: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Which parameter entries to perturb.
#[derive(Debug, Clone)]
pub enum FdPlan {
    /// Every entry of every tensor. Only affordable for small parameter sets.
    All,
    /// Explicit `(tensor index, entry index)` pairs.
    Entries(Vec<(usize, usize)>),
}

impl FdPlan {
    fn entries(&self, params: &[Tensor]) -> Vec<(usize, usize)> {
        match self {
            FdPlan::All => params
                .iter()
                .enumerate()
                .flat_map(|(ti, t)| (0..t.numel()).map(move |ei| (ti, ei)))
                .collect(),
            FdPlan::Entries(list) => list.clone(),
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Entries actually compared (kink-skipped ones excluded).
    pub checked: usize,
    /// Worst relative error over the checked entries.
    pub max_rel_err: f64,
    /// `(tensor index, entry index)` of the worst entry, if any were checked.
    pub worst: Option<(usize, usize)>,
    /// Entries skipped because the two one-sided slopes disagreed.
    pub skipped_kinks: Vec<(usize, usize)>,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Compares analytic gradients against central finite differences.
///
/// * `f` evaluates the scalar objective for a given parameter list; it must be
///   deterministic in its inputs.
/// * `params` are the current parameter values; `analytic` must be gradient
///   tensors of identical shapes (one per parameter).
/// * `eps` is the perturbation step.
///
/// Returns the worst relative error with the index of the offending entry.
/// A non-finite objective value at any evaluation is a numeric error.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    plan: &FdPlan,
) -> Result<FdReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?} but its gradient has {:?}",
                i,
                p.shape(),
                g.shape()
            )));
        }
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!("finite-difference eps must be positive, got {eps}")));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let base = eval_finite(&f, &work, "unperturbed")?;

    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        skipped_kinks: Vec::new(),
    };
    for (ti, ei) in plan.entries(params) {
        let original = params[ti].data()[ei];
        let plus = eval_perturbed(&f, &mut work, ti, ei, original + eps)?;
        let minus = eval_perturbed(&f, &mut work, ti, ei, original - eps)?;
        let half_plus = eval_perturbed(&f, &mut work, ti, ei, original + eps / 2.0)?;
        let half_minus = eval_perturbed(&f, &mut work, ti, ei, original - eps / 2.0)?;
        // Restore before any early exit below.
        set_entry(&mut work[ti], ei, original);

        let slope_plus = (plus - base) / eps;
        let slope_minus = (base - minus) / eps;
        let disagreement = (slope_plus - slope_minus).abs();
        if disagreement > KINK_TOL * slope_plus.abs().max(slope_minus.abs()).max(1.0) {
            report.skipped_kinks.push((ti, ei));
            continue;
        }

        let numeric = (plus - minus) / (2.0 * eps);
        let numeric_half = (half_plus - half_minus) / eps;
        let drift = (numeric - numeric_half).abs();
        if drift > (STRADDLE_REL * numeric.abs().max(numeric_half.abs())).max(STRADDLE_ABS) {
            report.skipped_kinks.push((ti, ei));
            continue;
        }
        let rel = relative_error(analytic[ti].data()[ei], numeric, REL_ERR_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((ti, ei));
        }
    }
    Ok(report)
}

fn eval_perturbed<F>(
    f: &F,
    work: &mut [Tensor],
    ti: usize,
    ei: usize,
    value: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    set_entry(&mut work[ti], ei, value);
    eval_finite(f, work, "perturbed")
}

fn eval_finite<F>(f: &F, params: &[Tensor], when: &str) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let v = f(params)?;
    if !v.is_finite() {
        return Err(Error::numeric(format!(
            "objective returned non-finite value {v} at {when} parameters"
        )));
    }
    Ok(v)
}

fn set_entry(t: &mut Tensor, ei: usize, value: f64) {
    let shape = t.shape().to_vec();
    let mut data = t.data().to_vec();
    data[ei] = value;
    *t = Tensor::new(shape, data).expect("shape unchanged");
}

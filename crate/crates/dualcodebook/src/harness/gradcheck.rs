//! End-to-end gradient verification of the full training objective.
//!
//! Sweeping every scalar parameter with central differences is quadratic in
//! model size, so the check samples a fixed number of entries from *every*
//! parameter tensor (seeded, without replacement). Each sampled entry is
//! perturbed in both directions through the complete pipeline — regions,
//! quantization, exchange, folding, Chamfer — and compared against the tape
//! gradient. Entries sitting on kink boundaries (relu, row norms at zero)
//! are skipped by the one-sided-slope test and reported.
//!
//! The objective is evaluated through [`Tape::replay_value`] over the one
//! recorded graph whose reverse sweep produced the analytic gradients. Both
//! sides of the comparison therefore differentiate the *same* function:
//! code assignments and stop-gradient values stay at the recorded point,
//! and straight-through nodes move with their differentiable inputs. A
//! naive re-run of the forward pass would instead measure the loss's true
//! dependence through the quantization — a dependence the straight-through
//! estimator deliberately ignores — and would disagree at every parameter
//! upstream of a quantization site no matter how correct the backward pass
//! is.

use crate::autodiff::{finite_diff_check, FdPlan, Tape, Tensor, Var};
use crate::data::{gen_shape, mix_seed, ShapeKind, ShapeSpec};
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::model::{total_loss, Model, ModelConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Default perturbation step.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Default pass tolerance for the whole-model sweep.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Default entries sampled per parameter tensor.
pub const GRADCHECK_SAMPLES: usize = 6;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradcheckReport {
    pub tensors: usize,
    pub entries_planned: usize,
    pub entries_checked: usize,
    pub kinks_skipped: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat entry index of the worst comparison.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub eps: f64,
    pub elapsed_seconds: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        let worst = match &self.worst {
            Some((name, ei)) => format!("{name}[{ei}]"),
            None => "-".to_string(),
        };
        format!(
            "gradcheck: {} | max rel err {:.3e} (tol {:.1e}) at {} | {}/{} entries over {} tensors, {} kinks skipped | {:.1}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            worst,
            self.entries_checked,
            self.entries_planned,
            self.tensors,
            self.kinks_skipped,
            self.elapsed_seconds
        )
    }
}

/// The fixed probe input: a partial sphere view against a torus ground truth,
/// both seeded from the model seed so runs are reproducible.
fn probe_clouds(config: &ModelConfig) -> Result<(PointCloud, PointCloud)> {
    let n_partial = config.min_partial_points().max(96);
    let partial = gen_shape(&ShapeSpec {
        kind: ShapeKind::Sphere,
        n: n_partial,
        seed: mix_seed(config.seed, 101, 0),
    })?;
    let gt = gen_shape(&ShapeSpec {
        kind: ShapeKind::Torus,
        n: 96,
        seed: mix_seed(config.seed, 101, 1),
    })?;
    Ok((partial, gt))
}

/// Samples `per_tensor` distinct entry indices from every parameter tensor.
fn stratified_plan(model: &Model, per_tensor: usize) -> FdPlan {
    let mut entries = Vec::new();
    for ti in 0..model.params().len() {
        let numel = model.params().tensor_at(ti).numel();
        if numel <= per_tensor {
            entries.extend((0..numel).map(|ei| (ti, ei)));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(model.config().seed, 202, ti as u64));
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < per_tensor {
            picked.insert(rng.gen_range(0..numel));
        }
        entries.extend(picked.into_iter().map(|ei| (ti, ei)));
    }
    FdPlan::Entries(entries)
}

/// Verifies the analytic gradient of the full objective for a freshly
/// initialized model of the given configuration.
pub fn gradcheck_model(
    config: &ModelConfig,
    per_tensor: usize,
    eps: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    config.validate()?;
    let start = Instant::now();
    let model = Model::init(config)?;
    let (partial, gt) = probe_clouds(config)?;

    // One recorded graph serves both sides: its reverse sweep yields the
    // analytic gradients, and finite differences replay the same graph with
    // perturbed parameter values. Parameters are bound first in the forward
    // pass, so they occupy nodes 0..len in store order.
    let mut tape = Tape::new();
    let (fwd, _usage) = model.forward_on_tape(&mut tape, &partial)?;
    let loss = total_loss(&mut tape, &fwd, &gt, &model.config().loss_weights)?;
    tape.backward(loss.total)?;
    let analytic: Vec<Tensor> =
        (0..model.params().len()).map(|i| tape.grad_tensor(Var(i))).collect();

    let plan = stratified_plan(&model, per_tensor);
    let planned = match &plan {
        FdPlan::Entries(e) => e.len(),
        FdPlan::All => model.params().scalar_count(),
    };

    let objective = |ps: &[Tensor]| -> Result<f64> {
        let overrides: Vec<(Var, Tensor)> =
            ps.iter().enumerate().map(|(i, t)| (Var(i), t.clone())).collect();
        tape.replay_value(loss.total, &overrides)?.scalar_value()
    };
    let fd = finite_diff_check(objective, model.params().tensors(), &analytic, eps, &plan)?;

    let worst = fd
        .worst
        .map(|(ti, ei)| (model.params().name_at(ti).to_string(), ei));
    let passed = fd.passes(tolerance) && fd.checked > 0;
    Ok(GradcheckReport {
        tensors: model.params().len(),
        entries_planned: planned,
        entries_checked: fd.checked,
        kinks_skipped: fd.skipped_kinks.len(),
        max_rel_err: fd.max_rel_err,
        worst,
        tolerance,
        eps,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        passed,
    })
}

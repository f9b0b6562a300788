//! The six-variant ablation sweep: train each variant from the same base
//! configuration and dataset, then evaluate on the held-out split.
//!
//! The combined table carries the published full-scale reference column for
//! orientation only — desk-scale runs are orders of magnitude smaller and no
//! ordering against the reference numbers is asserted anywhere.

use super::eval::{evaluate_model, EvalReport, F_SCORE_TAU};
use super::report::Table;
use super::train::{train, Sample, TrainOutcome};
use crate::data::DatasetEntry;
use crate::error::Result;
use crate::model::{AblationConfig, ModelConfig};

/// One variant's outcome in the sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub description: String,
    /// Mean training loss of the final epoch.
    pub train_total: f64,
    /// Final-epoch exchange loss (identically zero without the exchange).
    pub train_codebook: f64,
    /// Held-out Chamfer means.
    pub test_cd_l1: f64,
    pub test_cd_l2: f64,
    pub test_f_score: f64,
    /// Published full-scale CD-l1 x 10^3, for orientation only.
    pub reference_cd_l1_e3: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationReport {
    pub base_fingerprint: String,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn text_table(&self) -> String {
        let mut t = Table::new(&[
            "variant",
            "codebooks",
            "train total",
            "exchange",
            "test cd_l1 (x1e3)",
            "test cd_l2 (x1e3)",
            "f@0.01",
            "full-scale ref (x1e3)",
        ]);
        for r in &self.rows {
            t.push_row(vec![
                r.variant.clone(),
                r.description.clone(),
                format!("{:.4}", r.train_total),
                format!("{:.4}", r.train_codebook),
                format!("{:.4}", r.test_cd_l1 * 1e3),
                format!("{:.4}", r.test_cd_l2 * 1e3),
                format!("{:.4}", r.test_f_score),
                format!("{:.3}", r.reference_cd_l1_e3),
            ]);
        }
        let mut out = t.render();
        out.push_str(
            "\nThe full-scale reference column reports published results at full training\n\
             scale; desk-scale runs are not comparable and no ordering is asserted.\n",
        );
        out
    }
}

/// Trains and evaluates every variant. `on_variant` observes each finished
/// variant (for example to save its checkpoint) before the next one starts.
pub fn run_ablation(
    base: &ModelConfig,
    train_samples: &[Sample],
    test_entries: &[&DatasetEntry],
    threads: Option<usize>,
    mut on_variant: impl FnMut(AblationConfig, &TrainOutcome, &EvalReport) -> Result<()>,
) -> Result<AblationReport> {
    base.validate()?;
    let mut rows = Vec::with_capacity(AblationConfig::ALL.len());
    for variant in AblationConfig::ALL {
        let cfg = variant.apply(base);
        let outcome = train(&cfg, train_samples, threads, |_| {})?;
        let eval = evaluate_model(&outcome.model, test_entries, F_SCORE_TAU, None, None)?;
        let last = outcome.logs.last().expect("epochs >= 1");
        rows.push(AblationRow {
            variant: variant.to_string(),
            description: variant.description().to_string(),
            train_total: last.loss.total,
            train_codebook: last.loss.codebook,
            test_cd_l1: eval.mean.cd_l1,
            test_cd_l2: eval.mean.cd_l2,
            test_f_score: eval.mean.f_score,
            reference_cd_l1_e3: variant.reference_cd_l1(),
        });
        on_variant(variant, &outcome, &eval)?;
    }
    Ok(AblationReport {
        base_fingerprint: base.fingerprint(),
        epochs: base.epochs,
        rows,
    })
}

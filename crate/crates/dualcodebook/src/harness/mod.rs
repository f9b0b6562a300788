//! Training, evaluation, and reporting around the model: the Adam optimizer,
//! JSON checkpoints, the training loop, held-out metrics, the ablation sweep,
//! whole-model gradient verification, code-assignment consistency probes, and
//! codebook statistics exports.

mod ablate;
mod checkpoint;
mod complete;
mod consistency;
mod eval;
mod gradcheck;
mod optim;
mod report;
mod stats;
mod train;

pub use ablate::{run_ablation, AblationReport, AblationRow};
pub use checkpoint::{Checkpoint, ParamEntry, RngState, UsageState, CHECKPOINT_VERSION};
pub use complete::complete_file;
pub use consistency::{encoder_consistency, ConsistencyReport};
pub use eval::{
    evaluate_model, evaluate_outputs, load_reference_clouds, manifest_digest, CategoryMetrics,
    EvalReport, F_SCORE_TAU,
};
pub use gradcheck::{
    gradcheck_model, GradcheckReport, GRADCHECK_EPS, GRADCHECK_SAMPLES, GRADCHECK_TOL,
};
pub use optim::{Adam, AdamState, ADAM_EPS};
pub use report::{write_json, write_text, Table};
pub use stats::{codebook_stats, stats_csv, stats_svg, CodebookStats, DimStats, STATS_BINS};
pub use train::{mean_loss, train, EpochLog, Sample, TrainOutcome};

//! The dual-codebook completion model: configuration, parameter storage, and
//! the tape-built forward pass.

mod config;
mod net;
mod params;

pub use config::{AblationConfig, CoarseSource, LossWeights, ModelConfig};
pub use net::{
    fold_grid_coords, total_loss, CompletionOutput, ForwardVars, LossBreakdown, LossVars, Model,
    UsageDelta, FOLD_SPAN,
};
pub use params::{decoder_codebook_name, encoder_codebook_name, init_params, ParamStore};

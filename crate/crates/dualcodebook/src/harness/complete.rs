//! Single-cloud completion: read a partial `.xyz`, run the model, write the
//! dense prediction (and optionally the coarse sketch).
//!
//! Inputs are taken as-is in the training coordinate frame — partial views
//! produced by the dataset pipeline inherit their ground truth's
//! normalization, so re-normalizing a crop here would shift it off the
//! distribution the model was trained on.

use crate::data::{read_xyz, write_xyz};
use crate::error::Result;
use crate::model::Model;
use std::path::Path;

/// Completes one cloud file. Returns the number of points written.
pub fn complete_file(
    model: &Model,
    input: &Path,
    output: &Path,
    coarse_output: Option<&Path>,
) -> Result<usize> {
    let partial = read_xyz(input)?;
    let out = model.complete_cloud(&partial)?;
    write_xyz(output, &out.complete)?;
    if let Some(coarse_path) = coarse_output {
        write_xyz(coarse_path, &out.coarse)?;
    }
    Ok(out.complete.len())
}

//! Learnable codebooks and nearest-code vector quantization.
//!
//! A codebook is a `K x R` matrix of code vectors. Quantizing a feature row
//! replaces it by its nearest code under Euclidean distance (ties to the
//! lowest code index), yielding a hard, deterministic posterior. Gradients
//! cross the quantization step via the straight-through estimator recorded on
//! the tape; the codebook itself learns from the VQ loss pair.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weight of the commitment term relative to the codebook term when the VQ
/// pair is added to the model loss.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

/// A `K x R` table of learnable code vectors plus per-code usage counters.
#[derive(Debug, Clone)]
pub struct Codebook {
    vectors: Tensor,
    usage: Vec<u64>,
}

/// The result of quantizing a feature matrix: one code index per feature row
/// and the gathered code vectors.
#[derive(Debug, Clone)]
pub struct QuantizedSet {
    pub indices: Vec<usize>,
    pub codes: Tensor,
}

/// Usage summary for reporting.
#[derive(Debug, Clone, serde::Serialize)]
pub struct UsageStats {
    pub counts: Vec<u64>,
    pub dead_fraction: f64,
}

impl Codebook {
    /// `K x R` codebook with entries drawn i.i.d. uniform on `[-1/K, 1/K]`
    /// from a seeded generator. The small initial box keeps early code
    /// assignments spread across directions rather than dominated by a few
    /// large outliers.
    pub fn init(k: usize, r: usize, seed: u64) -> Result<Self> {
        if k == 0 || r == 0 {
            return Err(Error::config(format!("codebook needs k > 0 and r > 0, got {k} x {r}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / k as f64;
        let data: Vec<f64> = (0..k * r).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(Codebook { vectors: Tensor::matrix(k, r, data)?, usage: vec![0; k] })
    }

    /// Wraps existing vectors (e.g. restored from a checkpoint).
    pub fn from_parts(vectors: Tensor, usage: Vec<u64>) -> Result<Self> {
        if !vectors.is_matrix() || vectors.rows() == 0 {
            return Err(Error::shape(format!(
                "codebook vectors must be a non-empty matrix, found {:?}",
                vectors.shape()
            )));
        }
        if usage.len() != vectors.rows() {
            return Err(Error::shape(format!(
                "{} usage counters for {} codes",
                usage.len(),
                vectors.rows()
            )));
        }
        Ok(Codebook { vectors, usage })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn r(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Replaces the code vectors (after an optimizer step). Shape must match.
    pub fn set_vectors(&mut self, vectors: Tensor) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::shape(format!(
                "cannot replace codebook {:?} with {:?}",
                self.vectors.shape(),
                vectors.shape()
            )));
        }
        self.vectors = vectors;
        Ok(())
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Zeroes the usage counters (called at epoch boundaries).
    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|c| *c = 0);
    }

    /// Quantizes each row of `features` to its nearest code and increments
    /// the matching usage counters.
    pub fn quantize(&mut self, features: &Tensor) -> Result<QuantizedSet> {
        let indices = nearest_indices(features, &self.vectors)?;
        for &i in &indices {
            self.usage[i] += 1;
        }
        let r = self.r();
        let mut data = Vec::with_capacity(indices.len() * r);
        for &i in &indices {
            data.extend_from_slice(self.vectors.row(i));
        }
        Ok(QuantizedSet { indices: indices.clone(), codes: Tensor::matrix(indices.len(), r, data)? })
    }

    /// Per-code usage counts plus the fraction of codes never used since the
    /// last reset.
    pub fn usage_histogram(&self) -> UsageStats {
        let dead = self.usage.iter().filter(|&&c| c == 0).count();
        UsageStats {
            counts: self.usage.clone(),
            dead_fraction: dead as f64 / self.k() as f64,
        }
    }
}

/// Nearest-code index for every row of `features` against `vectors`
/// (`K x R`). Distance ties resolve to the lowest code index.
pub fn nearest_indices(features: &Tensor, vectors: &Tensor) -> Result<Vec<usize>> {
    if !features.is_matrix() || !vectors.is_matrix() {
        return Err(Error::shape("quantization expects 2-D features and codebook".to_string()));
    }
    if features.rows() == 0 {
        return Err(Error::data("cannot quantize an empty feature set".to_string()));
    }
    if features.cols() != vectors.cols() {
        return Err(Error::shape(format!(
            "feature width {:?} does not match codebook width {:?}",
            features.shape(),
            vectors.shape()
        )));
    }
    Ok((0..features.rows())
        .map(|i| nearest_code(features.row(i), vectors))
        .collect())
}

/// Nearest-code index for a single feature row; shared by [`nearest_indices`]
/// and the exchange pipeline.
pub fn nearest_code(row: &[f64], vectors: &Tensor) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for k in 0..vectors.rows() {
        let code = vectors.row(k);
        let d2: f64 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best.0
}

/// The VQ loss pair on the tape: the codebook term
/// `mean_i || stopgrad(f_i) - c_i ||^2` (moves codes toward features) and the
/// commitment term `mean_i || f_i - stopgrad(c_i) ||^2` (moves features
/// toward their codes). Both are means over rows of squared row distances.
pub fn vq_losses(tape: &mut Tape, features: Var, codes: Var) -> Result<(Var, Var)> {
    let rows = tape.value(features).rows();
    if rows == 0 {
        return Err(Error::data("vq_losses over an empty feature set".to_string()));
    }
    if tape.value(features).shape() != tape.value(codes).shape() {
        return Err(Error::shape(format!(
            "vq_losses shapes disagree: features {:?} vs codes {:?}",
            tape.value(features).shape(),
            tape.value(codes).shape()
        )));
    }
    let f_const = tape.detach(features);
    let d1 = tape.sub(f_const, codes)?;
    let sq1 = tape.mul(d1, d1)?;
    let sum1 = tape.sum_all(sq1);
    let codebook_term = tape.scale(sum1, 1.0 / rows as f64);

    let c_const = tape.detach(codes);
    let d2 = tape.sub(features, c_const)?;
    let sq2 = tape.mul(d2, d2)?;
    let sum2 = tape.sum_all(sq2);
    let commitment_term = tape.scale(sum2, 1.0 / rows as f64);
    Ok((codebook_term, commitment_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_code_book() -> Codebook {
        let vectors = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        Codebook::from_parts(vectors, vec![0, 0]).unwrap()
    }

    #[test]
    fn init_draws_inside_the_uniform_box_and_is_seed_deterministic() {
        let a = Codebook::init(16, 8, 42).unwrap();
        let b = Codebook::init(16, 8, 42).unwrap();
        let c = Codebook::init(16, 8, 43).unwrap();
        assert_eq!(a.vectors(), b.vectors(), "same seed, same vectors");
        assert_ne!(a.vectors(), c.vectors(), "different seed, different vectors");
        let bound = 1.0 / 16.0;
        assert!(a.vectors().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn quantize_picks_the_nearest_code() {
        let mut cb = two_code_book();
        let f = Tensor::matrix(1, 2, vec![0.2, 0.1]).unwrap();
        let q = cb.quantize(&f).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.codes.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn quantize_tie_breaks_to_the_lowest_index() {
        let mut cb = two_code_book();
        let f = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let q = cb.quantize(&f).unwrap();
        assert_eq!(q.indices, vec![0], "equidistant row goes to code 0");
    }

    #[test]
    fn quantizing_code_vectors_is_idempotent() {
        let mut cb = Codebook::init(12, 6, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::matrix(
            20,
            6,
            (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let q1 = cb.quantize(&f).unwrap();
        let q2 = cb.quantize(&q1.codes).unwrap();
        assert_eq!(q1.indices, q2.indices, "a code's nearest code is itself");
    }

    #[test]
    fn usage_counts_sum_to_total_quantizations() {
        let mut cb = Codebook::init(4, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let f = Tensor::matrix(7, 3, (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            cb.quantize(&f).unwrap();
        }
        assert_eq!(cb.usage().iter().sum::<u64>(), 35);
        cb.reset_usage();
        assert_eq!(cb.usage().iter().sum::<u64>(), 0);
        assert_eq!(cb.usage_histogram().dead_fraction, 1.0);
    }

    #[test]
    fn quantize_rejects_empty_or_mismatched_features() {
        let mut cb = two_code_book();
        assert!(cb.quantize(&Tensor::matrix(0, 2, vec![]).unwrap()).is_err());
        let wrong = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let err = cb.quantize(&wrong).unwrap_err();
        assert!(err.to_string().contains("[1, 3]"), "names the offending shape: {err}");
    }

    #[test]
    fn vq_losses_single_pair_at_unit_distance_is_one_one() {
        let mut tape = Tape::new();
        let f = tape.param(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let c = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let (cb_term, commit) = vq_losses(&mut tape, f, c).unwrap();
        assert_eq!(tape.value(cb_term).scalar_value().unwrap(), 1.0);
        assert_eq!(tape.value(commit).scalar_value().unwrap(), 1.0);
    }

    #[test]
    fn vq_losses_match_hand_computed_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fd: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cd: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected: f64 = fd
            .chunks(3)
            .zip(cd.chunks(3))
            .map(|(f, c)| f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / 8.0;
        let mut tape = Tape::new();
        let f = tape.param(Tensor::matrix(8, 3, fd).unwrap());
        let c = tape.param(Tensor::matrix(8, 3, cd).unwrap());
        let (cb_term, commit) = vq_losses(&mut tape, f, c).unwrap();
        assert!((tape.value(cb_term).scalar_value().unwrap() - expected).abs() < 1e-12);
        assert!((tape.value(commit).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn vq_loss_gradients_respect_the_stop_gradients() {
        // The codebook term must push only the codes; the commitment term
        // must push only the features.
        let mut tape = Tape::new();
        let f = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let (cb_term, _) = vq_losses(&mut tape, f, c).unwrap();
        tape.backward(cb_term).unwrap();
        assert!(tape.grad(f).is_none(), "codebook term must not move features");
        assert_eq!(tape.grad(c).unwrap(), &[-2.0, -4.0]);

        let mut tape = Tape::new();
        let f = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let (_, commit) = vq_losses(&mut tape, f, c).unwrap();
        tape.backward(commit).unwrap();
        assert!(tape.grad(c).is_none(), "commitment term must not move codes");
        assert_eq!(tape.grad(f).unwrap(), &[2.0, 4.0]);
    }
}

//! The training loop: seeded shuffling, mini-batch gradient averaging with a
//! deterministic ordered reduction, Adam updates, and per-epoch logging.
//!
//! Batch samples are evaluated in parallel, but gradients are summed in
//! sample order after all evaluations finish, so the result is bitwise
//! identical for any thread count.

use super::checkpoint::RngState;
use super::optim::{Adam, AdamState};
use crate::autodiff::Tensor;
use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{LossBreakdown, Model, ModelConfig, UsageDelta};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

/// One (partial, ground-truth) training pair.
pub type Sample = (PointCloud, PointCloud);

/// Per-epoch summary. [`EpochLog::line`] deliberately excludes wall time so
/// written logs are byte-comparable between runs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub batches: usize,
    /// Mean loss components over the epoch's samples.
    pub loss: LossBreakdown,
    /// Fraction of never-used codes this epoch, per active site.
    pub encoder_dead: Option<f64>,
    pub decoder_dead: Option<f64>,
    /// Wall time of the epoch; not part of [`EpochLog::line`].
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let dead = |d: Option<f64>| match d {
            Some(f) => format!("{f:.4}"),
            None => "-".to_string(),
        };
        format!(
            "epoch {:>3} | total {:.6} | cd_complete {:.6} | cd_coarse {:.6} | codebook {:.6} | vq {:.6} | commit {:.6} | dead enc {} dec {}",
            self.epoch,
            self.loss.total,
            self.loss.cd_complete,
            self.loss.cd_coarse,
            self.loss.codebook,
            self.loss.vq_codebook,
            self.loss.vq_commitment,
            dead(self.encoder_dead),
            dead(self.decoder_dead),
        )
    }
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    pub rng: RngState,
    pub logs: Vec<EpochLog>,
}

fn dead_fraction(usage: &[u64]) -> Option<f64> {
    if usage.is_empty() {
        return None;
    }
    let dead = usage.iter().filter(|&&c| c == 0).count();
    Some(dead as f64 / usage.len() as f64)
}

/// Trains a freshly initialized model of `config` on `samples`.
///
/// `threads` pins the size of a private rayon pool (`None` uses the global
/// default). `on_epoch` observes each epoch as it completes.
pub fn train(
    config: &ModelConfig,
    samples: &[Sample],
    threads: Option<usize>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::data("training set is empty".to_string()));
    }
    for (i, (partial, gt)) in samples.iter().enumerate() {
        if partial.len() < config.min_partial_points() || gt.is_empty() {
            return Err(Error::data(format!(
                "training sample {i} has {} partial / {} ground-truth points; need at least {} / 1",
                partial.len(),
                gt.len(),
                config.min_partial_points()
            )));
        }
    }
    let pool = match threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?,
        ),
        None => None,
    };

    let mut model = Model::init(config)?;
    let mut adam = Adam::new(
        model.params(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
    )?;
    let shuffle_seed = mix_seed(config.seed, 404, 0);
    let mut order_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        model.reset_usage();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);

        let mut sum = LossBreakdown {
            total: 0.0,
            cd_complete: 0.0,
            cd_coarse: 0.0,
            codebook: 0.0,
            vq_codebook: 0.0,
            vq_commitment: 0.0,
        };
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let eval = || -> Vec<Result<(LossBreakdown, Vec<Tensor>, UsageDelta)>> {
                batch
                    .par_iter()
                    .map(|&si| model.loss_and_gradients(&samples[si].0, &samples[si].1))
                    .collect()
            };
            let results = match &pool {
                Some(p) => p.install(eval),
                None => eval(),
            };

            // Ordered reduction: accumulate in batch order regardless of
            // which thread finished first.
            let mut grad_sum: Option<Vec<Tensor>> = None;
            for (k, r) in results.into_iter().enumerate() {
                let (loss, grads, usage) = r.map_err(|e| {
                    Error::numeric(format!("epoch {epoch}, batch {bi}, sample {k}: {e}"))
                })?;
                sum.total += loss.total;
                sum.cd_complete += loss.cd_complete;
                sum.cd_coarse += loss.cd_coarse;
                sum.codebook += loss.codebook;
                sum.vq_codebook += loss.vq_codebook;
                sum.vq_commitment += loss.vq_commitment;
                model.apply_usage(&usage);
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            let data: Vec<f64> =
                                a.data().iter().zip(g.data()).map(|(x, y)| x + y).collect();
                            *a = Tensor::new(a.shape().to_vec(), data)?;
                        }
                        acc
                    }
                });
            }
            let mut grads = grad_sum.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                let data: Vec<f64> = g.data().iter().map(|x| x * inv).collect();
                *g = Tensor::new(g.shape().to_vec(), data)?;
            }
            adam.step(model.params_mut(), &grads)?;
            batches += 1;
        }

        let inv = 1.0 / samples.len() as f64;
        let log = EpochLog {
            epoch,
            batches,
            loss: LossBreakdown {
                total: sum.total * inv,
                cd_complete: sum.cd_complete * inv,
                cd_coarse: sum.cd_coarse * inv,
                codebook: sum.codebook * inv,
                vq_codebook: sum.vq_codebook * inv,
                vq_commitment: sum.vq_commitment * inv,
            },
            encoder_dead: dead_fraction(model.usage_encoder()),
            decoder_dead: dead_fraction(model.usage_decoder()),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }

    let rng = RngState { seed: shuffle_seed, word_pos: order_rng.get_word_pos() };
    Ok(TrainOutcome { model, optimizer: adam.state().clone(), rng, logs })
}

/// Mean loss of a model over an evaluation set, without gradient work.
pub fn mean_loss(model: &Model, samples: &[Sample]) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::data("evaluation set is empty".to_string()));
    }
    let mut sum = LossBreakdown {
        total: 0.0,
        cd_complete: 0.0,
        cd_coarse: 0.0,
        codebook: 0.0,
        vq_codebook: 0.0,
        vq_commitment: 0.0,
    };
    for (partial, gt) in samples {
        let b = model.evaluate_loss(partial, gt)?;
        sum.total += b.total;
        sum.cd_complete += b.cd_complete;
        sum.cd_coarse += b.cd_coarse;
        sum.codebook += b.codebook;
        sum.vq_codebook += b.vq_codebook;
        sum.vq_commitment += b.vq_commitment;
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(LossBreakdown {
        total: sum.total * inv,
        cd_complete: sum.cd_complete * inv,
        cd_coarse: sum.cd_coarse * inv,
        codebook: sum.codebook * inv,
        vq_codebook: sum.vq_codebook * inv,
        vq_commitment: sum.vq_commitment * inv,
    })
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::teacher::Dataset;
use crate::adapters::{Adapter, AdapterKind, DropoutMask};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Drives batch sampling and dropout masks.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub kind: AdapterKind,
    pub rank: usize,
    pub seed: u64,
    /// `(step, mini-batch loss before the update)`, steps numbered from 1.
    pub per_step: Vec<(usize, f64)>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub config: TrainConfig,
}

/// `½‖y − target‖²` averaged over columns.
fn half_mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred.sub(target)?;
    let n = diff.cols() as f64;
    let loss = 0.5 * diff.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff))
}

/// Mean of `½‖y − target‖²` over every sample, without dropout.
pub fn evaluate<A: Adapter + ?Sized>(adapter: &A, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let pred = adapter.forward(&dataset.inputs)?;
    Ok(half_mse(&pred, &dataset.targets)?.0)
}

const BATCH_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;

/// Mini-batch AdamW on the adapter's trainable factors. `W` is never touched.
///
/// Batches are drawn with replacement; the loss is `½‖y − target‖²`
/// averaged over the batch. Dropout follows `adapter.config().dropout_rate`.
pub fn train<A: Adapter + ?Sized>(
    adapter: &mut A,
    train_set: &Dataset,
    eval_set: &Dataset,
    config: &TrainConfig,
) -> Result<RunMetrics> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(BATCH_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);

    let dropout = adapter.config().dropout_rate;
    let n = adapter.base().cols();
    let mut state = OptimizerState::new(AdamWConfig::new(config.learning_rate), &adapter.trainable());
    let initial_eval_loss = evaluate(adapter, eval_set)?;

    let mut per_step = Vec::with_capacity(config.steps);
    let mut indices = vec![0usize; config.batch_size];
    for step in 1..=config.steps {
        for idx in indices.iter_mut() {
            *idx = batch_rng.random_range(0..train_set.len());
        }
        let (x, target) = train_set.batch(&indices);
        let mask = (dropout > 0.0).then(|| DropoutMask::sample(&mut dropout_rng, dropout, n, x.cols()));

        let pred = adapter.forward_masked(&x, mask.as_ref())?;
        let (loss, diff) = half_mse(&pred, &target)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        per_step.push((step, loss));

        let upstream = diff.scale(1.0 / x.cols() as f64);
        let grads = adapter.backward_masked(&x, &upstream, mask.as_ref())?;
        adamw_step(&mut adapter.trainable_mut(), &grads.parameter_grads(), &mut state)?;
    }

    let final_eval_loss = evaluate(adapter, eval_set)?;
    if !final_eval_loss.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            loss: final_eval_loss,
        });
    }
    Ok(RunMetrics {
        kind: adapter.kind(),
        rank: adapter.config().rank,
        seed: config.seed,
        per_step,
        initial_eval_loss,
        final_eval_loss,
        config: config.clone(),
    })
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, ElboBreakdown, Model, ModelError};
use crate::numerics::{Adam, AdamConfig, Session, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of epochs over which KL terms ramp linearly from 0 to 1.
    /// Zero disables the warm-up.
    pub kl_warmup_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
            kl_warmup_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-averaged terms of the training objective.
    pub terms: ElboBreakdown,
}

impl EpochLog {
    pub fn loss(&self) -> f64 {
        -self.terms.total
    }
}

/// Minimize the training loss over `data` with Adam. Deterministic given
/// the config seed.
pub fn train_model(
    model: &mut Model,
    data: &Batch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    data.check(&model.dims)?;
    let n = data.size();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut order: Vec<usize> = (0..n).collect();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let warmup_steps = (cfg.kl_warmup_frac * (cfg.epochs * batches_per_epoch) as f64).ceil();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut acc = ElboBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let kl_weight = if warmup_steps > 0.0 {
                ((adam.steps() + 1) as f64 / warmup_steps).min(1.0)
            } else {
                1.0
            };
            let tape = Tape::new();
            let grads = {
                let s = Session::new(&tape, &model.store);
                let (loss, bd) = model.loss_drl(&s, &batch, &mut noise_rng, kl_weight)?;
                acc.accumulate(&bd, chunk.len() as f64 / n as f64);
                let g = tape.backward(loss)?;
                s.collect(&g)
            };
            adam.step(&mut model.store, &grads)?;
        }
        let log = EpochLog { epoch, terms: acc };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

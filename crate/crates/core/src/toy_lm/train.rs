use rand::seq::SliceRandom;

use crate::data::QaDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor_store::Checkpoint;

use super::model::loss_and_grad;
use super::params::Params;
use super::{pack_pairs, ToyLmConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 3e-3,
            steps: 1000,
            batch: 32,
        }
    }
}

/// Adam on the mean per-pair answer cross-entropy. Returns the trained
/// checkpoint and the loss of every step.
pub fn train_with_log(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    dataset: &QaDataset,
    hp: &TrainParams,
    seed: u64,
) -> Result<(Checkpoint, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if hp.batch == 0 || !(hp.lr > 0.0) {
        return Err(Error::invalid(format!(
            "batch and lr must be positive, got batch={} lr={}",
            hp.batch, hp.lr
        )));
    }
    if hp.steps == 0 {
        return Ok((ckpt.clone(), Vec::new()));
    }
    let mut params = Params::from_checkpoint(ckpt, cfg)?;
    let pairs = dataset.token_pairs();
    for (q, a) in &pairs {
        super::check_pair(cfg, q, a)?;
    }

    let mut m = Params::zeros(cfg);
    let mut v = Params::zeros(cfg);
    let mut rng = rng_for(seed, "train/shuffle");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let batch = hp.batch.min(pairs.len());
    let mut losses = Vec::with_capacity(hp.steps);

    for step in 1..=hp.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let chosen: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
        let (packed, targets) = pack_pairs(&chosen, 1.0 / batch as f64);
        let (loss, grad) = loss_and_grad(&params, cfg, &packed, &targets);
        losses.push(loss);

        let bc1 = 1.0 - BETA1.powi(step as i32);
        let bc2 = 1.0 - BETA2.powi(step as i32);
        let slices = params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(m.slices_mut())
            .zip(v.slices_mut());
        for (((p, g), m), v) in slices {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= hp.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
    let mut out = params.to_checkpoint(cfg);
    // carry over any extra metadata the input had
    for (k, val) in &ckpt.metadata {
        out.metadata.entry(k.clone()).or_insert_with(|| val.clone());
    }
    Ok((out, losses))
}

/// Trains a copy of `ckpt`; the input is left untouched.
pub fn train(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    dataset: &QaDataset,
    hp: &TrainParams,
    seed: u64,
) -> Result<Checkpoint> {
    train_with_log(ckpt, cfg, dataset, hp, seed).map(|(c, _)| c)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, TrainMeta};
use super::network::Network;
use super::ops::{adam_update, bce_logit_grad, bce_loss, AdamParams, AdamState, Mode};
use super::spec::NetworkSpec;
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Minimum decrease of the monitored loss that counts as an improvement.
pub const MIN_DELTA: f64 = 1e-6;
const EVAL_CHUNK: usize = 16;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            val_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta", "Adam betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::param("max_epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::param("val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Loss used for early stopping: validation loss, or the inference-mode
    /// training loss when there is no validation slice.
    pub monitor: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Index split: seeded shuffle, then the tail `N − floor(N·(1−f))` entries
/// form the validation slice.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_len = (n as f64 * (1.0 - val_fraction)).floor() as usize;
    let val = perm.split_off(train_len.min(n));
    (perm, val)
}

/// Mini-batches over `order`; a trailing batch of one joins its predecessor.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Mean BCE of inference-mode predictions over `indices`.
pub fn evaluate_loss(net: &Network, inputs: &Tensor4, targets: &Tensor4, indices: &[usize]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let p = net.infer(&inputs.gather(chunk))?;
        let y = targets.gather(chunk);
        sum += bce_loss(&p.data, &y.data)? * p.len() as f64;
        count += p.len();
    }
    if count == 0 {
        return Err(Error::Empty("loss over zero samples".into()));
    }
    Ok(sum / count as f64)
}

fn check_targets(net: &Network, inputs: &Tensor4, targets: &Tensor4) -> Result<()> {
    let out = *net.shapes().last().expect("validated spec has layers");
    if targets.shape() != [inputs.n, out[0], out[1], out[2]] {
        return Err(Error::Shape(format!(
            "targets {:?} do not match network output [{}, {}, {}, {}]",
            targets.shape(),
            inputs.n,
            out[0],
            out[1],
            out[2]
        )));
    }
    if targets.data.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::param("targets", "values must lie in [0, 1]"));
    }
    Ok(())
}

/// Adam + BCE training with early stopping on the monitored loss. Returns
/// the best epoch's weights as a bundle, plus per-epoch history.
pub fn train_model(
    spec: NetworkSpec,
    inputs: &Tensor4,
    targets: &Tensor4,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    cfg.validate()?;
    spec.validate()?;
    if inputs.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, val_idx) = split_indices(inputs.n, cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::param("val_fraction", "leaves no training samples"));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(STREAM_DROPOUT);

    let mut net = Network::init(spec, &mut init_rng)?;
    check_targets(&net, inputs, targets)?;
    inputs.check_finite("training inputs")?;
    let top = net.spec().layers.len() - 2;
    let hp = cfg.adam();
    let mut states: Vec<Vec<AdamState>> = net
        .params()
        .iter()
        .map(|g| g.iter().map(|p| AdamState::zeros(p.data.len())).collect())
        .collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Network)> = None;
    let mut wait = 0usize;
    let mut step = 0u64;
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let x = inputs.gather(batch);
            let y = targets.gather(batch);
            let pass = net.forward(&x, Mode::Train, &mut dropout_rng, None)?;
            let p = pass.output();
            let loss = bce_loss(&p.data, &y.data)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {b}: loss is {loss}")));
            }
            loss_sum += loss * batch.len() as f64;
            let dz = pass.activations[top + 1].with_data(bce_logit_grad(&p.data, &y.data));
            let grads = net.backward(&pass, top, dz)?;
            net.apply_bn_updates(pass.bn_updates);
            step += 1;
            for ((group, gg), sg) in net.params_mut().iter_mut().zip(&grads.params).zip(&mut states) {
                for ((param, g), s) in group.iter_mut().zip(gg).zip(sg) {
                    if param.trainable {
                        adam_update(&mut param.data, g, s, step, &hp)?;
                    }
                }
            }
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_loss(&net, inputs, targets, &val_idx)?)
        };
        let monitor = match val_loss {
            Some(v) => v,
            None => evaluate_loss(&net, inputs, targets, &train_idx)?,
        };
        if !monitor.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: monitored loss is {monitor}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.6}, monitor {monitor:.6}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            monitor,
        });
        let improved = best.as_ref().is_none_or(|(b, _)| monitor < b - MIN_DELTA);
        if improved {
            best = Some((monitor, net.clone()));
            history.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience.max(1) {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (best_loss, mut best_net) = best.expect("at least one epoch ran");
    best_net.round_to_f32();
    let meta = TrainMeta {
        seed: cfg.seed,
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_val_loss: Some(best_loss),
        notes: Default::default(),
    };
    Ok((ModelBundle::from_network(&best_net, meta), history))
}

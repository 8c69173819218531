//! Soft-Dice training with best-on-validation snapshotting, and ensemble
//! training with one data split per member.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::augment;
use crate::data::patches::{check_window, stack};
use crate::data::{balance, split_patches, AugmentConfig, Patch, PatchSplit};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed2, rng_from_seed};
use crate::tensor::ops::{soft_dice_loss_value, DiceTerms};
use crate::tensor::{Tape, Tensor};
use crate::unet::{Model, ModelConfig};
use crate::volume_io::{Checkpoint, CheckpointMeta};

// sub-stream tags under the training seed
const BALANCE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const MEMBER_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Used by `sgd_momentum` only.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub stride: usize,
    pub augment: AugmentConfig,
    pub dice_eps: f64,
    /// Use `sum(p^2) + sum(g^2)` in the Dice denominator.
    pub squared_denominator: bool,
    /// Oversample positive patches once before the first epoch.
    pub balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            optimizer: OptimizerConfig::default(),
            eval_every: 1,
            seed: 0,
            patch_size: 32,
            stride: 32,
            augment: AugmentConfig::default(),
            dice_eps: 1e-8,
            squared_denominator: false,
            balance: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 || self.eval_every < 1 {
            return bad("batch_size and eval_every must be >= 1".into());
        }
        let o = &self.optimizer;
        // zero is accepted so a run can be checked to leave parameters untouched
        if !(o.learning_rate >= 0.0) || !o.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                o.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice_eps must be > 0".into());
        }
        check_window(self.patch_size, self.stride).map_err(|e| Error::Config(e.to_string()))?;
        self.augment.validate()
    }
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` over the whole batch.
pub fn soft_dice_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f32> {
    if !(eps > 0.0) {
        return Err(Error::invalid("soft Dice eps must be > 0"));
    }
    soft_dice_loss_value(pred, target, eps, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_soft_dice: Option<f64>,
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    crate::volume_io::write_file(path, &bytes)
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Parameters after the last epoch.
    pub last: Model<f32>,
}

struct Optimizer {
    cfg: OptimizerConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig, model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model
            .params()
            .values()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Optimizer {
            cfg: cfg.clone(),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, model: &mut Model<f32>, grads: &[Tensor]) {
        self.step += 1;
        let c = &self.cfg;
        let lr = c.learning_rate as f32;
        match c.kind {
            OptimizerKind::Adam => {
                let bc1 = (1.0 - c.beta1.powi(self.step)) as f32;
                let bc2 = (1.0 - c.beta2.powi(self.step)) as f32;
                let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
                for (k, ((_, p), g)) in model.params_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = c.momentum as f32;
                for (k, ((_, p), g)) in model.params_mut().zip(grads).enumerate() {
                    let buf = &mut self.m[k];
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        buf[i] = mu * buf[i] + gi;
                        *w -= lr * buf[i];
                    }
                }
            }
        }
    }
}

/// One forward/backward pass on a batch; returns the loss and the gradient of
/// every parameter in model order.
pub fn loss_and_gradients(
    model: &Model<f32>,
    input: Tensor,
    target: Tensor,
    eps: f64,
    squared: bool,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let x = tape.leaf(input, false);
    let t = tape.leaf(target, false);
    let y = model.forward_on_tape(&mut tape, &bound, x, true, &mut rng_from_seed(dropout_seed))?;
    let loss = tape.soft_dice_loss(y, t, eps, squared)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Mean over batches of the batch soft Dice, with dropout off.
pub fn validation_soft_dice(
    model: &Model<f32>,
    patches: &[Patch],
    batch_size: usize,
    eps: f64,
    squared: bool,
) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let refs: Vec<&Patch> = patches.iter().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = stack(chunk)?;
        let pred = model.predict(&x)?;
        total += DiceTerms::new(pred.data(), y.data(), eps, squared).dice();
        n += 1;
    }
    Ok(total / n as f64)
}

/// Trains `model` and keeps the parameters of the epoch with the highest
/// validation soft Dice (the earlier epoch wins a tie).
pub fn train(
    model: Model<f32>,
    train_patches: &[Patch],
    val_patches: &[Patch],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_patches.is_empty() || val_patches.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be nonempty",
        ));
    }
    if let Some(p) = train_patches
        .iter()
        .chain(val_patches)
        .find(|p| p.size != cfg.patch_size)
    {
        return Err(Error::shape(format!(
            "patch of size {} in a run configured for size {}",
            p.size, cfg.patch_size
        )));
    }
    let patches = if cfg.balance {
        let b = balance(
            train_patches.to_vec(),
            &mut rng_from_seed(derive_seed(cfg.seed, BALANCE_STREAM)),
        );
        if !b.balanced {
            warn!("training set has an empty class; continuing unbalanced");
        }
        b.patches
    } else {
        train_patches.to_vec()
    };
    let extra = serde_json::to_string(cfg).expect("train config serializes");
    let mut model = model;
    let mut opt = Optimizer::new(&cfg.optimizer, &model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut steps = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed2(
            cfg.seed,
            SHUFFLE_STREAM,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for (b, chunk) in batches.enumerate() {
            let augmented: Vec<Patch> = chunk
                .iter()
                .map(|&i| {
                    let s = derive_seed2(
                        derive_seed(cfg.seed, AUGMENT_STREAM),
                        i as u64,
                        epoch as u64,
                    );
                    augment(&patches[i], &cfg.augment, &mut rng_from_seed(s))
                })
                .collect();
            let refs: Vec<&Patch> = augmented.iter().collect();
            let (x, y) = stack(&refs)?;
            let dropout_seed = derive_seed2(
                derive_seed(cfg.seed, DROPOUT_STREAM),
                epoch as u64,
                b as u64,
            );
            let (loss, grads) = loss_and_gradients(
                &model,
                x,
                y,
                cfg.dice_eps,
                cfg.squared_denominator,
                dropout_seed,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            opt.apply(&mut model, &grads);
            steps += 1;
            loss_sum += loss;
        }
        let train_loss = loss_sum / n_batches as f64;
        let val = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let d = validation_soft_dice(
                &model,
                val_patches,
                cfg.batch_size,
                cfg.dice_eps,
                cfg.squared_denominator,
            )?;
            if best.as_ref().is_none_or(|b| d > b.meta.val_soft_dice) {
                best = Some(Checkpoint {
                    model: model.clone(),
                    meta: CheckpointMeta {
                        epoch,
                        val_soft_dice: d,
                        rng_cursor: steps,
                        extra: extra.clone(),
                    },
                });
            }
            Some(d)
        } else {
            None
        };
        info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}{}",
            cfg.epochs,
            val.map(|d| format!(", val soft Dice {d:.4}"))
                .unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_soft_dice: val,
        });
    }
    Ok(TrainOutcome {
        best: best.expect("last epoch is always validated"),
        history,
        last: model,
    })
}

/// One trained ensemble member.
#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub outcome: TrainOutcome,
    pub split: PatchSplit,
}

/// Trains `n` members, each on its own seeded 80/20 split of `patches`; the
/// last member uses attention-gated skips, the rest do not.
pub fn train_ensemble(
    n: usize,
    patches: &[Patch],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EnsembleMember>> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "an ensemble needs at least 2 members, got {n}"
        )));
    }
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed2(cfg.seed, MEMBER_STREAM, k as u64);
            let split = split_patches(patches.len(), seed)?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| patches[i].clone()).collect::<Vec<_>>();
            let mcfg = ModelConfig {
                attention: k == n - 1,
                seed: derive_seed(model_cfg.seed, k as u64),
                ..model_cfg.clone()
            };
            let tcfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            info!(
                "ensemble member {}/{n} (attention: {})",
                k + 1,
                mcfg.attention
            );
            let outcome = train(
                Model::build(mcfg)?,
                &pick(&split.train),
                &pick(&split.val),
                &tcfg,
            )?;
            Ok(EnsembleMember { outcome, split })
        })
        .collect()
}

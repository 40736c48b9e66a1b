//! Training loop, evaluation, cross-validation and the ablation runner.

mod experiment;
mod metrics;
mod optim;

pub use experiment::{
    cross_validate, default_grid, format_parameters, holdout_runs, mix_seed, run_ablation, write_ablation_csv,
    AblationRow, AblationResult, Protocol, RunSummary, DEFAULT_ROWS,
};
pub use metrics::{evaluate, Evaluation, MeanStd, Metrics, Scores};
pub use optim::{clip_grad_norm, learning_rate, SgdMomentum};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{stack, Sample};
use crate::error::{Error, Result};
use crate::loss::{loss_var, supervised_loss_var, LossConfig, LossKind};
use crate::model::{head_targets, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Inverse-time decay per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub loss_kind: LossKind,
    pub seed: u64,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            decay: 1e-6,
            epochs: 100,
            batch_size: 16,
            loss: LossConfig::tversky(),
            loss_kind: LossKind::FocalTversky,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("decay must be >= 0, got {}", self.decay)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("clip norm must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub train_loss: f64,
    /// Mean Dice on the validation samples, when any were given.
    pub val_dice: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_dice,learning_rate`; an empty `val_dice` field
    /// means no validation set.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["epoch", "train_loss", "val_dice", "learning_rate"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.train_loss),
                r.val_dice.map(|d| format!("{d:.6}")).unwrap_or_default(),
                format!("{:.6}", r.learning_rate),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<history output>", e))?;
        Ok(())
    }
}

/// Loss of `model` on one batch, and the gradient of every parameter.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let loss = batch_loss_on_tape(&mut tape, model, &vars, images, masks, cfg)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect()))
}

/// Builds the supervised loss of a batch on `tape` with parameters `vars`.
pub fn batch_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &[crate::autodiff::Var],
    images: &Tensor<T>,
    masks: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<crate::autodiff::Var> {
    let x = tape.constant(images.clone());
    let out = model.forward(tape, x, vars)?;
    let targets: Vec<_> = head_targets(model.config(), masks)?
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    if out.heads.len() == 1 {
        loss_var(tape, cfg.loss_kind, out.heads[0], targets[0], &cfg.loss)
    } else {
        supervised_loss_var(tape, cfg.loss_kind, &out.heads, &targets, &cfg.loss)
    }
}

/// Trains `model` in place. Each epoch visits `train` in an order shuffled
/// by `(cfg.seed, epoch)`; the last batch of an epoch may be short.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample<T>],
    validation: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for s in train.iter().chain(validation) {
        model.check_input(&[1, s.channels(), s.height(), s.width()])?;
    }

    let mut opt = SgdMomentum::new(model.params());
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack(&refs)?;
            let (loss, mut grads) = batch_loss_and_grads(model, &x, &y, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(model.params_mut(), &grads, cfg, epoch)?;
            total += loss;
            batches += 1;
        }
        let val_dice = if validation.is_empty() {
            None
        } else {
            Some(evaluate(model, validation, 0.5)?.mean.dice)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_dice,
            learning_rate: learning_rate(cfg, epoch),
        });
    }
    Ok(history)
}

//! Deep-supervision objective, Adam, and the epoch loop.

mod adam;
mod loss;

pub use adam::{adam_step, AdamState};
pub use loss::{
    cross_entropy, deep_supervision_loss, dice_loss, downsample_labels, supervision_loss, LossBreakdown, LossConfig,
    OneHotTarget,
};

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::standardize;
use crate::error::{invalid, shape_err, Error, Result};
use crate::network::{ForwardPass, Model, NetworkConfig};
use crate::tensor::{BatchNormMode, Tensor};
use crate::volume::{LabelVolume, VolumeGrid};

/// Which parameters `train` returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Epoch with the lowest validation loss (last epoch if there is no
    /// validation set).
    BestValidation,
    LastEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Seeds the per-epoch volume order.
    pub seed: u64,
    pub ensemble_size: usize,
    pub clamp_floor: f64,
    pub dice_smooth: f64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 300,
            seed: 0,
            ensemble_size: 3,
            clamp_floor: 1e-7,
            dice_smooth: 1e-6,
            selection: Selection::BestValidation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("clamp_floor", self.clamp_floor),
            ("dice_smooth", self.dice_smooth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.epochs == 0 || self.ensemble_size == 0 {
            return Err(invalid!("epochs and ensemble_size must be positive"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            clamp_floor: self.clamp_floor,
            dice_smooth: self.dice_smooth,
        }
    }
}

/// A standardized volume with its labels.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub input: Tensor,
    pub labels: LabelVolume,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, volume: &VolumeGrid, labels: LabelVolume) -> Result<Self> {
        if volume.extents() != labels.extents() {
            return Err(shape_err!(
                "volume extents {:?} differ from label extents {:?}",
                volume.extents(),
                labels.extents()
            ));
        }
        let std = standardize(volume)?;
        let [d, h, w] = std.extents();
        Ok(TrainSample {
            id: id.into(),
            input: Tensor::new(vec![1, 1, d, h, w], std.values().to_vec())?,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_ce: f64,
    pub train_dice: f64,
    pub val_ce: Option<f64>,
    pub val_dice: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
}

/// One forward/backward/update on a single volume. Returns the loss before
/// the update.
pub fn train_step(
    model: &mut Model,
    sample: &TrainSample,
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut pass = ForwardPass::run(model, &sample.input, BatchNormMode::Train, true)?;
    let mut outputs = vec![pass.main];
    outputs.extend(&pass.aux);
    let (loss, parts) = supervision_loss(&mut pass.graph, &outputs, &sample.labels, &cfg.loss())?;
    if !parts.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss on `{}`", sample.id)));
    }
    pass.graph.backward(loss)?;
    let grads = pass.param_grads();
    adam_step(model.params_mut(), &grads, adam, cfg)?;
    for (layer, state) in model.norms_mut().iter_mut().zip(pass.norms) {
        layer.state = state;
    }
    Ok(parts)
}

/// Loss with running batch-norm statistics, as at inference.
pub fn evaluate_loss(model: &Model, sample: &TrainSample, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let pass = ForwardPass::run(model, &sample.input, BatchNormMode::Eval, false)?;
    deep_supervision_loss(&pass.output(), &sample.labels, &cfg.loss())
}

fn mean_parts(parts: &[LossBreakdown]) -> (f64, f64, f64) {
    let n = parts.len() as f64;
    (
        parts.iter().map(|p| p.total).sum::<f64>() / n,
        parts.iter().map(|p| p.ce).sum::<f64>() / n,
        parts.iter().map(|p| p.dice).sum::<f64>() / n,
    )
}

/// Batch size one; the visiting order is reshuffled every epoch from a
/// stream seeded by `cfg.seed`.
pub fn train(
    net: &NetworkConfig,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let mut model = Model::new(net)?;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(order.len());
        for &i in &order {
            let p = train_step(&mut model, &train_set[i], &mut adam, cfg)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            parts.push(p);
        }
        let (train_loss, train_ce, train_dice) = mean_parts(&parts);
        let (val_loss, val_ce, val_dice) = if val_set.is_empty() {
            (None, None, None)
        } else {
            let vp: Vec<LossBreakdown> = val_set.iter().map(|s| evaluate_loss(&model, s, cfg)).collect::<Result<_>>()?;
            let (l, c, d) = mean_parts(&vp);
            if !l.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}: non-finite validation loss")));
            }
            (Some(l), Some(c), Some(d))
        };
        info!(
            "epoch {epoch}/{}: train {train_loss:.5} val {}",
            cfg.epochs,
            val_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_ce,
            train_dice,
            val_ce,
            val_dice,
        });
        if cfg.selection == Selection::BestValidation {
            if let Some(v) = val_loss {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, model.clone()));
                }
            }
        }
    }
    let (model, selected_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, cfg.epochs),
    };
    Ok(TrainOutcome {
        model,
        history,
        selected_epoch,
    })
}

/// Member `k` uses network seed `net.seed + k` and shuffle seed
/// `cfg.seed + k`. Members train on separate threads.
pub fn train_ensemble(
    net: &NetworkConfig,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.ensemble_size as u64)
            .map(|k| {
                let net = NetworkConfig {
                    seed: net.seed.wrapping_add(k),
                    ..net.clone()
                };
                let cfg = TrainConfig {
                    seed: cfg.seed.wrapping_add(k),
                    ..cfg.clone()
                };
                scope.spawn(move || train(&net, train_set, val_set, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("training thread panicked".into()))))
            .collect()
    })
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

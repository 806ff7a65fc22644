use super::batch::{epoch_batches, training_windows, Token, TokenBatch};
use super::metrics::{evaluate_lm, loss_ce};
use super::transformer::{forward, DenseLm, LanguageModel};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Graph};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 3e-3,
            batch_size: 16,
            seq_len: 16,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

/// Loss before training and the mean minibatch loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub initial: f64,
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

pub(crate) fn diverged(epoch: usize, step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` in place on next-token cross-entropy. Only parameters
/// for which `trainable(name)` holds are updated; the rest are inserted as
/// constants and never receive gradients.
pub fn train_lm<M: LanguageModel>(
    model: &mut M,
    corpus: &[Token],
    cfg: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<LossCurve> {
    let seq_len = cfg.seq_len.min(model.config().max_seq_len);
    let windows = training_windows(corpus, seq_len);
    if windows.is_empty() {
        return Err(Error::Empty("training corpus shorter than one window"));
    }
    let initial = evaluate_lm(model, corpus, seq_len)?.log_ppl;
    let mut curve = LossCurve {
        initial,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut adam = AdamState::new(model.params().tensors(), AdamConfig::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(&windows, cfg.batch_size, cfg.seed, epoch);
        for (step, rows) in batches.iter().enumerate() {
            let batch = TokenBatch::from_windows(rows)?;
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, &trainable);
            let out = forward(&mut g, model, &bound, &batch).map_err(diverged(epoch, step))?;
            let loss = loss_ce(&mut g, out.logits, &batch).map_err(diverged(epoch, step))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(epoch, step)(Error::NonFinite { op: "loss_ce" }));
            }
            total += value;
            let mut grads = g.backward(loss)?;
            let params = model.params_mut();
            params.store_grads(&bound, &mut grads)?;
            if let Some(c) = cfg.grad_clip {
                params.clip_grad_norm(c);
            }
            adam.step(params.tensors_mut())?;
        }
        curve.epochs.push(total / batches.len() as f64);
    }
    Ok(curve)
}

/// On-device training: returns the trained copy and its loss curve.
pub fn train_local(model: &DenseLm, corpus: &[Token], cfg: &TrainConfig) -> Result<(DenseLm, LossCurve)> {
    let mut m = model.clone();
    let curve = train_lm(&mut m, corpus, cfg, |_| true)?;
    Ok((m, curve))
}

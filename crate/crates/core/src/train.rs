//! Language-model training for the toy transformer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::metrics::windows;
use crate::model::{Coverage, ForwardOptions, MiniTransformer, ModelError};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop early once an epoch's mean token NLL falls below this.
    pub target_nll: Option<f64>,
    /// Steps over which a non-decreasing loss raises a warning.
    pub plateau_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: 3e-3,
            optimizer: OptimizerKind::adam(),
            grad_clip: Some(1.0),
            target_nll: None,
            plateau_window: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    /// Mean token NLL of each step's batch.
    pub step_losses: Vec<f64>,
    /// Mean token NLL over each epoch.
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Records the summed next-token NLL of `ids` on `tape`; returns the loss
/// node, the number of predicted tokens, and the parameter leaves.
pub fn lm_loss_on_tape<'p>(
    model: &'p MiniTransformer,
    tape: &Tape<'p>,
    ids: &[u32],
    trainable: &dyn Fn(usize) -> bool,
) -> Result<(Var, usize, Vec<Var>), ModelError> {
    let fwd = model.forward_on_tape(tape, ids, &ForwardOptions::default(), trainable)?;
    let mut targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t as usize)).collect();
    targets.push(None);
    let loss = tape.nll_sum(fwd.logits, &targets)?;
    Ok((loss, ids.len() - 1, fwd.params))
}

/// Adds `scale * grad` of every trainable leaf into `acc`.
pub(crate) fn accumulate(
    acc: &mut [Option<Vec<f64>>],
    grads: &crate::autodiff::Gradients,
    leaves: &[Var],
    scale: f64,
) {
    for (slot, &leaf) in acc.iter_mut().zip(leaves) {
        if let Some(g) = grads.get(leaf) {
            let buf = slot.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += scale * v;
            }
        }
    }
}

pub(crate) fn clip(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Trains every parameter on next-token prediction over `texts`.
/// `on_epoch` sees the epoch index and its mean token NLL.
pub fn train(
    model: &mut MiniTransformer,
    texts: &[String],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport, TrainError> {
    if texts.is_empty() {
        return Err(TrainError::Config("no training text".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config(
            "epochs, batch_size and lr must be positive".into(),
        ));
    }
    let ctx = model.config().context_len;
    let mut seqs: Vec<Vec<u32>> = Vec::new();
    for t in texts {
        let ids = model.encode(t)?;
        seqs.extend(windows(&ids, ctx).map(<[u32]>::to_vec));
    }
    let n_params = model.params().len();
    let coverage = vec![Coverage::All; n_params];
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        steps: 0,
        epochs: 0,
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        warnings: Vec::new(),
    };
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_nll, mut epoch_tokens) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let tokens: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
            let mut batch_nll = 0.0;
            for &i in batch {
                let tape = Tape::new();
                let (loss, _, leaves) = lm_loss_on_tape(model, &tape, &seqs[i], &|_| true)?;
                batch_nll += tape.scalar(loss);
                let g = tape.backward(loss).map_err(ModelError::from)?;
                accumulate(&mut grads, &g, &leaves, 1.0 / tokens as f64);
            }
            let mean = batch_nll / tokens as f64;
            if !mean.is_finite() {
                return Err(TrainError::Diverged {
                    step: report.steps,
                    loss: mean,
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            opt.step(model.params_mut(), &grads, &coverage);
            report.steps += 1;
            report.step_losses.push(mean);
            epoch_nll += batch_nll;
            epoch_tokens += tokens;
            let w = cfg.plateau_window;
            if w > 0 && report.steps % w == 0 && report.steps >= 2 * w {
                let recent = &report.step_losses[report.steps - w..];
                let before = &report.step_losses[report.steps - 2 * w..report.steps - w];
                let (a, b) = (
                    before.iter().sum::<f64>() / w as f64,
                    recent.iter().sum::<f64>() / w as f64,
                );
                if b >= a {
                    let msg = format!("loss did not decrease over steps {}..{}", report.steps - w, report.steps);
                    log::warn!("{msg}");
                    report.warnings.push(msg);
                }
            }
        }
        let epoch_mean = epoch_nll / epoch_tokens as f64;
        report.epoch_losses.push(epoch_mean);
        report.epochs = epoch + 1;
        on_epoch(epoch, epoch_mean);
        if cfg.target_nll.is_some_and(|t| epoch_mean < t) {
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tokenizer};

    fn tiny() -> (MiniTransformer, Vec<String>) {
        let texts: Vec<String> = (0..6)
            .map(|i| format!("def f{}(x):\n    return x + {}", i % 3, i % 3))
            .collect();
        let tok = Tokenizer::build(texts.iter().map(String::as_str));
        let cfg = ModelConfig {
            vocab_size: tok.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 32,
            context_len: 32,
            seed: 1,
        };
        (MiniTransformer::new(cfg, tok).unwrap(), texts)
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 3,
            lr: 1e-2,
            ..Default::default()
        };
        let (mut a, texts) = tiny();
        let ra = train(&mut a, &texts, &cfg, &mut |_, _| {}).unwrap();
        assert!(ra.epoch_losses.last().unwrap() < &(0.5 * ra.epoch_losses[0]));
        let (mut b, _) = tiny();
        let rb = train(&mut b, &texts, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let (mut m, texts) = tiny();
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(train(&mut m, &texts, &cfg, &mut |_, _| {}).is_err());
        assert!(train(&mut m, &[], &TrainConfig::default(), &mut |_, _| {}).is_err());
    }
}

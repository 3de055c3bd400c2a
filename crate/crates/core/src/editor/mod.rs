//! Masked gradient editing of the toy model towards factual pronoun shares.

mod losses;

pub use losses::{bias_losses, edit_gradients, edit_objective, recovery_loss};

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PromptCase;
use crate::locator::{Granularity, GranularityMask};
use crate::metrics::{evaluate_split, EvalSummary, MetricsError};
use crate::model::{Coverage, MiniTransformer, ModelError};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error("invalid edit config: {0}")]
    Config(String),
    #[error("degenerate edit: {0}")]
    Degenerate(String),
    #[error("mask does not fit the model: {0}")]
    Mask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<crate::tensor::TensorError> for EditError {
    fn from(e: crate::tensor::TensorError) -> Self {
        EditError::Model(e.into())
    }
}

/// How the per-case bias terms are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BiasObjective {
    /// `L_he = f_he * p_he`, `L_she = f_she * p_she`.
    #[default]
    Printed,
    /// `L_he = |p_he - f_he|`, `L_she = |p_she - f_she|`.
    Deviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub he: f64,
    pub she: f64,
    pub recover: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            he: 1.0,
            she: 1.0,
            recover: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// `None` picks by mask level: 1e-3 for row and neuron masks, 1e-4 for
    /// the coarser ones.
    pub lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub max_steps: usize,
    /// Train cases per step; `None` uses every train case.
    pub batch_size: Option<usize>,
    /// Recovery texts per step, resampled every step.
    pub recovery_batch: usize,
    pub weights: LossWeights,
    pub objective: BiasObjective,
    /// Tolerance on `|L_he - L_she| / max(L_he, L_she, delta)`.
    pub eq_tolerance: f64,
    pub delta: f64,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between dev evaluations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            lr: None,
            optimizer: OptimizerKind::Sgd,
            max_steps: 200,
            batch_size: None,
            recovery_batch: 32,
            weights: LossWeights::default(),
            objective: BiasObjective::Printed,
            eq_tolerance: 0.05,
            delta: 1e-9,
            patience: 10,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<(), EditError> {
        let bad = |m: &str| Err(EditError::Config(m.to_string()));
        if let Some(lr) = self.lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad("learning rate must be positive and finite");
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.eq_tolerance > 0.0) {
            return bad("eq_tolerance must be positive");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if self.recovery_batch == 0 || self.eval_every == 0 {
            return bad("recovery_batch and eval_every must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn lr_for(&self, level: Granularity) -> f64 {
        self.lr.unwrap_or(match level {
            Granularity::Row | Granularity::Neuron => 1e-3,
            _ => 1e-4,
        })
    }

    /// Equality ratio of the two bias terms.
    pub fn equality_ratio(&self, l_he: f64, l_she: f64) -> f64 {
        (l_he - l_she).abs() / l_he.max(l_she).max(self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_he: f64,
    pub l_she: f64,
    pub l_recover: f64,
    pub l_total: f64,
}

impl StepRecord {
    pub fn new(step: usize, l_he: f64, l_she: f64, l_recover: f64, cfg: &EditConfig) -> Self {
        let w = cfg.weights;
        StepRecord {
            step,
            l_he,
            l_she,
            l_recover,
            l_total: w.he * l_he + w.she * l_she + w.recover * l_recover,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Dev FB-Score stalled while the two bias terms were equal.
    Equilibrium,
    /// Dev FB-Score stalled.
    Patience,
    MaxSteps,
    /// The loss became non-finite.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub config: EditConfig,
    pub mask_level: String,
    pub mask_provenance: Option<String>,
    pub masked_params: usize,
    /// Losses measured before each step's update.
    pub steps: Vec<StepRecord>,
    /// `(step, dev mean FB-Score)`; step 0 is the unedited model.
    pub dev_fb: Vec<(usize, f64)>,
    pub steps_taken: usize,
    pub stop_reason: StopReason,
    pub diverged: bool,
    /// Step whose model is returned.
    pub best_step: usize,
    pub pre: EvalSummary,
    pub post: EvalSummary,
}

impl EditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edit report serializes")
    }

    /// One line per step: losses and, where evaluated, the dev FB-Score
    /// after that step.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("step,l_he,l_she,l_recover,l_total,dev_fb\n");
        for r in &self.steps {
            let dev = self
                .dev_fb
                .iter()
                .find(|(k, _)| *k == r.step)
                .map(|(_, v)| format!("{v:.9}"))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{dev}\n",
                r.step, r.l_he, r.l_she, r.l_recover, r.l_total
            ));
        }
        s
    }
}

fn check_mask(model: &MiniTransformer, mask: &GranularityMask) -> Result<Vec<Coverage>, EditError> {
    if let Some(h) = &mask.arch_hash {
        if *h != model.config().arch_hash() {
            return Err(EditError::Mask(
                "mask was located on a different architecture".into(),
            ));
        }
    }
    if !mask.is_full() && mask.is_empty() {
        return Err(EditError::Mask("mask selects nothing".into()));
    }
    Ok(model.coverage(mask)?)
}

/// One update of the masked parameters. Returns the losses measured before
/// the update.
pub fn edit_step(
    model: &mut MiniTransformer,
    coverage: &[Coverage],
    optimizer: &mut Optimizer,
    cases: &[PromptCase],
    recovery: &[String],
    cfg: &EditConfig,
) -> Result<StepRecord, EditError> {
    let (record, grads) = edit_gradients(model, coverage, cases, recovery, cfg)?;
    if !record.l_total.is_finite() {
        return Ok(record);
    }
    let flows = grads.iter().zip(coverage).any(|(g, c)| match (g, c) {
        (Some(g), Coverage::All) => g.iter().any(|&v| v != 0.0),
        (Some(g), Coverage::Indices(ix)) => ix.iter().any(|&i| g[i] != 0.0),
        _ => false,
    });
    if !flows {
        return Err(EditError::Degenerate(
            "no gradient reaches the masked parameters".into(),
        ));
    }
    optimizer.step(model.params_mut(), &grads, coverage);
    Ok(record)
}

fn mean_fb(model: &MiniTransformer, split: &str, cases: &[PromptCase]) -> Result<f64, EditError> {
    Ok(evaluate_split(model, split, cases)?.mean_fb)
}

/// Edits a copy of `base` and returns the copy with the best dev FB-Score
/// seen, which may be the unedited model.
pub fn run_edit(
    base: &MiniTransformer,
    mask: &GranularityMask,
    cfg: &EditConfig,
    train: &[PromptCase],
    dev: &[PromptCase],
    recovery: &[String],
) -> Result<(MiniTransformer, EditReport), EditError> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(EditError::Config("train and dev cases are both required".into()));
    }
    if recovery.is_empty() {
        return Err(EditError::Config("recovery corpus is empty".into()));
    }
    let train_ids: BTreeSet<usize> = train.iter().map(|c| c.id).collect();
    if let Some(c) = dev.iter().find(|c| train_ids.contains(&c.id)) {
        return Err(EditError::Config(format!("case {} is in both train and dev", c.id)));
    }
    let prompts: BTreeSet<&str> = train.iter().chain(dev).map(|c| c.prompt.as_str()).collect();
    if let Some(t) = recovery.iter().find(|t| prompts.contains(t.as_str())) {
        return Err(EditError::Config(format!("recovery text overlaps the edit prompts: {t:?}")));
    }
    let coverage = check_mask(base, mask)?;
    let masked_params = base.masked_count(mask)?;

    let mut model = base.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_for(mask.level()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pre = evaluate_split(base, "dev", dev)?;
    let mut best = (0usize, pre.mean_fb, base.clone());
    let mut dev_fb = vec![(0, pre.mean_fb)];
    let mut steps = Vec::new();
    let mut stale = 0usize;
    let mut stop = StopReason::MaxSteps;
    let mut diverged = false;

    for step in 1..=cfg.max_steps {
        let batch: Vec<PromptCase> = match cfg.batch_size {
            Some(b) if b < train.len() => train.choose_multiple(&mut rng, b).cloned().collect(),
            _ => train.to_vec(),
        };
        let rec: Vec<String> = recovery
            .choose_multiple(&mut rng, cfg.recovery_batch.min(recovery.len()))
            .cloned()
            .collect();
        let mut record = edit_step(&mut model, &coverage, &mut opt, &batch, &rec, cfg)?;
        record.step = step;
        steps.push(record);
        let blown = model.params().iter().any(|t| t.data().iter().any(|v| !v.is_finite()));
        if !record.l_total.is_finite() || blown {
            log::warn!("edit diverged at step {step}");
            diverged = true;
            stop = StopReason::Diverged;
            break;
        }
        if step % cfg.eval_every != 0 && step != cfg.max_steps {
            continue;
        }
        if let Err(ModelError::NonFinite(_)) = model.gender_probe(&dev[0].prompt) {
            log::warn!("edit diverged at step {step}");
            diverged = true;
            stop = StopReason::Diverged;
            break;
        }
        let fb = mean_fb(&model, "dev", dev)?;
        dev_fb.push((step, fb));
        if fb < best.1 {
            best = (step, fb, model.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience.max(1) {
            // equality of the two terms after this step's update
            let now = edit_objective(&model, &batch, &rec, cfg)?;
            stop = if cfg.equality_ratio(now.l_he, now.l_she) < cfg.eq_tolerance {
                StopReason::Equilibrium
            } else {
                StopReason::Patience
            };
            break;
        }
    }
    let (best_step, _, edited) = best;
    let post = evaluate_split(&edited, "dev", dev)?;
    let report = EditReport {
        config: cfg.clone(),
        mask_level: mask.level().to_string(),
        mask_provenance: mask.provenance.clone(),
        masked_params,
        steps_taken: steps.len(),
        steps,
        dev_fb,
        stop_reason: stop,
        diverged,
        best_step,
        pre,
        post,
    };
    Ok((edited, report))
}

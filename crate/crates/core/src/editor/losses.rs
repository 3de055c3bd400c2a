use crate::autodiff::{Tape, Var};
use crate::corpus::PromptCase;
use crate::metrics::{locality_metrics, windows};
use crate::model::{Coverage, ForwardOptions, LogitsMode, MiniTransformer};
use crate::tensor::Tensor;
use crate::train::{accumulate, lm_loss_on_tape};

use super::{BiasObjective, EditConfig, EditError, StepRecord};

/// `(L_he, L_she)` of one case, from a plain probe.
pub fn bias_losses(
    model: &MiniTransformer,
    case: &PromptCase,
    objective: BiasObjective,
) -> Result<(f64, f64), EditError> {
    let p = model.gender_probe(&case.prompt)?;
    let s = &case.shares;
    Ok(match objective {
        BiasObjective::Printed => (s.f_he * p.p_he(), s.f_she * p.p_she()),
        BiasObjective::Deviation => ((p.p_he() - s.f_he).abs(), (p.p_she() - s.f_she).abs()),
    })
}

/// Token-normalized next-token NLL over `texts`, windowed like the
/// locality metric.
pub fn recovery_loss(model: &MiniTransformer, texts: &[String]) -> Result<f64, EditError> {
    if texts.is_empty() {
        return Err(EditError::Config("recovery batch is empty".into()));
    }
    Ok(locality_metrics(model, texts)?.nll)
}

/// `L_he`, `L_she`, `L_recover` and the weighted total, without gradients.
/// The bias terms are means over `cases`.
pub fn edit_objective(
    model: &MiniTransformer,
    cases: &[PromptCase],
    recovery: &[String],
    cfg: &EditConfig,
) -> Result<StepRecord, EditError> {
    if cases.is_empty() {
        return Err(EditError::Config("no edit cases".into()));
    }
    let (mut he, mut she) = (0.0, 0.0);
    for c in cases {
        let (a, b) = bias_losses(model, c, cfg.objective)?;
        he += a;
        she += b;
    }
    let n = cases.len() as f64;
    Ok(StepRecord::new(0, he / n, she / n, recovery_loss(model, recovery)?, cfg))
}

fn bias_on_tape<'p>(
    model: &'p MiniTransformer,
    tape: &Tape<'p>,
    case: &PromptCase,
    objective: BiasObjective,
    trainable: &dyn Fn(usize) -> bool,
) -> Result<(Var, Var, Vec<Var>), EditError> {
    let ids = model.encode(&case.prompt)?;
    let fwd = model.forward_on_tape(
        tape,
        &ids,
        &ForwardOptions {
            logits: LogitsMode::Last,
            ..Default::default()
        },
        trainable,
    )?;
    let probs = tape.softmax(fwd.logits, 1)?;
    let p_he = tape.select(probs, model.tokenizer().he() as usize)?;
    let p_she = tape.select(probs, model.tokenizer().she() as usize)?;
    let s = &case.shares;
    let (l_he, l_she) = match objective {
        BiasObjective::Printed => (tape.scale(p_he, s.f_he), tape.scale(p_she, s.f_she)),
        BiasObjective::Deviation => {
            let dev = |p: Var, f: f64| -> Result<Var, EditError> {
                let f = tape.constant(Tensor::scalar(f));
                Ok(tape.abs(tape.sub(p, f)?))
            };
            (dev(p_he, s.f_he)?, dev(p_she, s.f_she)?)
        }
    };
    Ok((l_he, l_she, fwd.params))
}

/// Loss record and gradient of the weighted total with respect to every
/// parameter the coverage touches. Cases are reduced in the given order,
/// then the recovery windows, so the sum is deterministic.
pub fn edit_gradients(
    model: &MiniTransformer,
    coverage: &[Coverage],
    cases: &[PromptCase],
    recovery: &[String],
    cfg: &EditConfig,
) -> Result<(StepRecord, Vec<Option<Vec<f64>>>), EditError> {
    if cases.is_empty() {
        return Err(EditError::Config("no edit cases".into()));
    }
    if recovery.is_empty() {
        return Err(EditError::Config("recovery batch is empty".into()));
    }
    let trainable = |i: usize| !matches!(coverage[i], Coverage::None);
    let n_params = model.params().len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
    let w = cfg.weights;
    let n = cases.len() as f64;
    let (mut he, mut she) = (0.0, 0.0);
    for case in cases {
        let tape = Tape::new();
        let (l_he, l_she, leaves) = bias_on_tape(model, &tape, case, cfg.objective, &trainable)?;
        he += tape.scalar(l_he);
        she += tape.scalar(l_she);
        let a = tape.scale(l_he, w.he);
        let b = tape.scale(l_she, w.she);
        let total = tape.add(a, b)?;
        let g = tape.backward(total).map_err(crate::model::ModelError::from)?;
        accumulate(&mut grads, &g, &leaves, 1.0 / n);
    }

    let ctx = model.config().context_len;
    let mut seqs = Vec::new();
    for t in recovery {
        let ids = model.encode(t)?;
        seqs.extend(windows(&ids, ctx).map(<[u32]>::to_vec));
    }
    let tokens: usize = seqs.iter().map(|s| s.len() - 1).sum();
    if tokens == 0 {
        return Err(EditError::Config("recovery batch has no predictable tokens".into()));
    }
    let mut nll = 0.0;
    for s in &seqs {
        let tape = Tape::new();
        let (loss, _, leaves) = lm_loss_on_tape(model, &tape, s, &trainable)?;
        nll += tape.scalar(loss);
        if w.recover != 0.0 {
            let g = tape.backward(loss).map_err(crate::model::ModelError::from)?;
            accumulate(&mut grads, &g, &leaves, w.recover / tokens as f64);
        }
    }
    let record = StepRecord::new(0, he / n, she / n, nll / tokens as f64, cfg);
    Ok((record, grads))
}

use super::report::ImportanceReport;
use super::{Granularity, LocateError};
use crate::corpus::PromptCase;
use crate::model::{ForwardOptions, LayerTrace, LogitsMode, MiniTransformer, ParameterAddress};

/// Per-layer importance for one trace: the L1 shift in "he" and "she"
/// probability between the logit-lens readouts before and after the layer.
pub fn layer_importances(trace: &LayerTrace, he: usize, she: usize) -> Vec<f64> {
    trace
        .dists
        .windows(2)
        .map(|w| (w[1][he] - w[0][he]).abs() + (w[1][she] - w[0][she]).abs())
        .collect()
}

pub(crate) fn trace_prompt(model: &MiniTransformer, prompt: &str) -> Result<LayerTrace, LocateError> {
    let ids = model.encode(prompt)?;
    let out = model.forward(
        &ids,
        &ForwardOptions {
            trace: true,
            logits: LogitsMode::Last,
            ..Default::default()
        },
    )?;
    Ok(out.trace.expect("trace was requested"))
}

/// Each case votes for its highest-importance layer; the layer with most
/// votes wins, ties going to the higher mean score and then the lower index.
pub fn locate_layer(
    model: &MiniTransformer,
    cases: &[PromptCase],
    probe_set: &str,
) -> Result<ImportanceReport, LocateError> {
    if cases.is_empty() {
        return Err(LocateError::Contract("no probe cases for layer locating".into()));
    }
    let (he, she) = (model.tokenizer().he() as usize, model.tokenizer().she() as usize);
    let n_layers = model.config().n_layers;
    let mut report = ImportanceReport::new(Granularity::Layer, probe_set);
    for l in 0..n_layers {
        report.scores.insert(ParameterAddress::layer(l), 0.0);
    }
    for case in cases {
        let imp = layer_importances(&trace_prompt(model, &case.prompt)?, he, she);
        let best = super::report::top_k(&imp, 1)[0];
        for (l, v) in imp.iter().enumerate() {
            *report.scores.get_mut(&ParameterAddress::layer(l)).unwrap() += v;
        }
        report.push_case(case.id, ParameterAddress::layer(best), None);
    }
    report.average();
    let winner = (0..n_layers)
        .map(ParameterAddress::layer)
        .max_by(|a, b| {
            let va = report.votes.get(a).copied().unwrap_or(0);
            let vb = report.votes.get(b).copied().unwrap_or(0);
            va.cmp(&vb)
                .then(report.scores[a].total_cmp(&report.scores[b]))
                .then(b.layer.cmp(&a.layer))
        })
        .expect("at least one layer");
    report.selected = vec![winner];
    Ok(report)
}

//! Locator results checked against independent recomputations on small
//! models: finite-difference gradients for rows and neurons, a separate
//! logit-lens replay for layers.

mod common;

use codebias_core::locator::{
    build_mask, locate, locate_layer, locate_module, locate_row, Granularity,
    GranularityMask, LocateConfig, LocateError, LocateReports, RowConfig,
};
use codebias_core::model::{ModuleKind, ParameterAddress};
use common::oracles::{check_rows_and_neurons, check_zero_scores, ranked};
use common::{cases, small_model};

#[test]
fn rows_and_neurons_match_finite_difference_oracle() {
    check_rows_and_neurons(0);
}

/// The last fc_out has a rank-one gradient, so every cosine is ±1 and the
/// tie-break decides.
#[test]
fn rank_one_rows_match_finite_difference_oracle() {
    check_rows_and_neurons(1);
}

#[test]
fn layer_votes_replay_from_saved_traces() {
    let cs = cases(6);
    let model = small_model(&cs, 3, 5);
    let report = locate_layer(&model, &cs, "oracle").unwrap();
    let (he, she) = (model.tokenizer().he() as usize, model.tokenizer().she() as usize);
    let c = model.config().clone();
    let f = model.ln_f_index();
    let (gain, bias) = (model.params()[f].data(), model.params()[f + 1].data());
    let unembed = &model.params()[model.unembed_index()];
    let lens = |h: &[f64]| -> Vec<f64> {
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h.len() as f64;
        let n: Vec<f64> = (0..h.len())
            .map(|j| (h[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
            .collect();
        let logits: Vec<f64> = (0..c.vocab_size)
            .map(|v| (0..c.d_model).map(|j| unembed.data()[v * c.d_model + j] * n[j]).sum())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        logits.iter().map(|l| (l - mx).exp() / z).collect()
    };
    let mut votes = vec![0usize; c.n_layers];
    for (k, case) in cs.iter().enumerate() {
        let ids = model.encode(&case.prompt).unwrap();
        let out = model
            .forward(&ids, &codebias_core::model::ForwardOptions { trace: true, ..Default::default() })
            .unwrap();
        let hidden = out.trace.unwrap().hidden;
        let dists: Vec<Vec<f64>> = hidden.iter().map(|h| lens(h)).collect();
        let imp: Vec<f64> = (1..dists.len())
            .map(|i| (dists[i][he] - dists[i - 1][he]).abs() + (dists[i][she] - dists[i - 1][she]).abs())
            .collect();
        let best = ranked(&imp, 1)[0];
        votes[best] += 1;
        assert_eq!(report.winners[k], ParameterAddress::layer(best));
    }
    let top = (0..c.n_layers).max_by_key(|&l| (votes[l], std::cmp::Reverse(l))).unwrap();
    if votes.iter().filter(|&&v| v == votes[top]).count() == 1 {
        assert_eq!(report.selected, vec![ParameterAddress::layer(top)]);
    }
}

#[test]
fn zero_layers_and_modules_score_exactly_zero() {
    check_zero_scores();
}

#[test]
fn single_layer_model_takes_every_vote() {
    let cs = cases(4);
    let model = small_model(&cs, 1, 9);
    let r = locate_layer(&model, &cs, "one").unwrap();
    assert_eq!(r.votes[&ParameterAddress::layer(0)], 4);
    assert_eq!(r.selected, vec![ParameterAddress::layer(0)]);
}

#[test]
fn masks_nest_and_shrink() {
    let cs = cases(6);
    let model = small_model(&cs, 2, 11);
    let cfg = LocateConfig {
        row: RowConfig {
            top_k: 2,
            ..Default::default()
        },
        neuron_top_k: 3,
        ..Default::default()
    };
    let reports = locate(&model, &cs, "train", Granularity::Neuron, &cfg, LocateReports::default()).unwrap();
    let masks: Vec<GranularityMask> = Granularity::ALL
        .iter()
        .map(|&g| build_mask(g, &reports).unwrap())
        .collect();
    for w in masks.windows(2).skip(1) {
        w[1].check_nested_in(&w[0]).unwrap();
    }
    let counts: Vec<usize> = masks.iter().map(|m| model.masked_count(m).unwrap()).collect();
    for w in counts.windows(2) {
        assert!(w[1] <= w[0], "counts {counts:?}");
    }
    assert_eq!(counts[0], model.n_params());
    assert!(masks[4].provenance.is_some());

    // rerunning from the persisted upstream reports gives the same masks
    let partial = LocateReports {
        layer: reports.layer.clone(),
        module: reports.module.clone(),
        ..Default::default()
    };
    let json = serde_json::to_string(&partial).unwrap();
    let partial: LocateReports = serde_json::from_str(&json).unwrap();
    let again = locate(&model, &cs, "train", Granularity::Neuron, &cfg, partial).unwrap();
    assert_eq!(again, reports);
}

#[test]
fn pipeline_order_is_enforced() {
    let cs = cases(3);
    let model = small_model(&cs, 2, 13);
    let reports = locate(&model, &cs, "train", Granularity::Layer, &LocateConfig::default(), LocateReports::default()).unwrap();
    assert!(build_mask(Granularity::Layer, &reports).is_ok());
    let err = build_mask(Granularity::Row, &reports).unwrap_err();
    assert!(matches!(err, LocateError::Pipeline(ref m) if m.contains("module")), "{err}");
    assert!(build_mask(Granularity::Full, &LocateReports::default()).unwrap().is_full());
}

#[test]
fn disconnected_module_is_degenerate() {
    let cs = cases(2);
    let mut model = small_model(&cs, 2, 15);
    let u = model.unembed_index();
    model.params_mut()[u].data_mut().fill(0.0);
    let err = locate_row(&model, &cs, ParameterAddress::module(0, ModuleKind::FcIn), &RowConfig::default(), "x")
        .unwrap_err();
    assert!(matches!(err, LocateError::Degenerate(_)));
    let err = locate_module(&model, &cs, 5, 2, "x").unwrap_err();
    assert!(matches!(err, LocateError::Model(_)));
}

#[test]
fn locating_is_deterministic() {
    let cs = cases(4);
    let model = small_model(&cs, 2, 17);
    let cfg = LocateConfig::default();
    let a = locate(&model, &cs, "train", Granularity::Neuron, &cfg, LocateReports::default()).unwrap();
    let b = locate(&model, &cs, "train", Granularity::Neuron, &cfg, LocateReports::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        build_mask(Granularity::Neuron, &a).unwrap().to_json(),
        build_mask(Granularity::Neuron, &b).unwrap().to_json()
    );
}

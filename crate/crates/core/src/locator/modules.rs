use super::report::{top_k, ImportanceReport};
use super::{Granularity, LocateError};
use crate::corpus::PromptCase;
use crate::model::{MiniTransformer, ModuleKind, ParameterAddress};

/// Ablates each of the six modules of `key_layer` in turn and scores the
/// shift of the final "he"/"she" probabilities. The `top_n` modules with
/// the highest mean importance are selected.
pub fn locate_module(
    model: &MiniTransformer,
    cases: &[PromptCase],
    key_layer: usize,
    top_n: usize,
    probe_set: &str,
) -> Result<ImportanceReport, LocateError> {
    model.check_address(&ParameterAddress::layer(key_layer))?;
    if cases.is_empty() {
        return Err(LocateError::Contract("no probe cases for module locating".into()));
    }
    if top_n == 0 || top_n > ModuleKind::ALL.len() {
        return Err(LocateError::Contract(format!("cannot select {top_n} of 6 modules")));
    }
    let (he, she) = (model.tokenizer().he() as usize, model.tokenizer().she() as usize);
    let addrs: Vec<ParameterAddress> = ModuleKind::ALL
        .iter()
        .map(|&m| ParameterAddress::module(key_layer, m))
        .collect();
    let mut report = ImportanceReport::new(Granularity::Module, probe_set);
    let mut sums = vec![0.0; addrs.len()];
    // signed "he" shift per module, per case
    let mut shifts: Vec<Vec<f64>> = vec![Vec::with_capacity(cases.len()); addrs.len()];
    for case in cases {
        let ids = model.encode(&case.prompt)?;
        let base = model.next_token_dist(&ids, None)?;
        let mut imp = Vec::with_capacity(addrs.len());
        for (k, &a) in addrs.iter().enumerate() {
            let p = model.next_token_dist(&ids, Some(a))?;
            imp.push((p[he] - base[he]).abs() + (p[she] - base[she]).abs());
            shifts[k].push(p[he] - base[he]);
        }
        for (s, v) in sums.iter_mut().zip(&imp) {
            *s += v;
        }
        report.push_case(case.id, addrs[top_k(&imp, 1)[0]], None);
    }
    for (a, s) in addrs.iter().zip(&sums) {
        report.scores.insert(*a, *s);
    }
    report.average();
    let means: Vec<f64> = addrs.iter().map(|a| report.scores[a]).collect();
    report.selected = top_k(&means, top_n).into_iter().map(|i| addrs[i]).collect();
    report.selected.sort();
    report.coupling = Some(correlation_matrix(&shifts));
    report.settings.insert("top_n".into(), top_n.to_string());
    Ok(report)
}

/// Pearson correlations between series; pairs involving a constant series
/// are reported as 0.
pub fn correlation_matrix(series: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let centered: Vec<(Vec<f64>, f64)> = series
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
            let c: Vec<f64> = s.iter().map(|v| v - mean).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            (c, norm)
        })
        .collect();
    centered
        .iter()
        .map(|(a, na)| {
            centered
                .iter()
                .map(|(b, nb)| {
                    if *na == 0.0 || *nb == 0.0 {
                        0.0
                    } else {
                        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                    }
                })
                .collect()
        })
        .collect()
}

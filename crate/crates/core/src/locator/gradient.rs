use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::report::{top_k, ImportanceReport};
use super::{Granularity, LocateError};
use crate::autodiff::Tape;
use crate::corpus::PromptCase;
use crate::model::{Depth, ForwardOptions, LogitsMode, MiniTransformer, ModelError, ParameterAddress};

/// Gradients of the "he" and "she" completion NLL with respect to one
/// module's weight, row-major `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub module: ParameterAddress,
    pub rows: usize,
    pub cols: usize,
    pub he: Vec<f64>,
    pub she: Vec<f64>,
}

impl GradientPair {
    pub fn row_he(&self, i: usize) -> &[f64] {
        &self.he[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_she(&self, i: usize) -> &[f64] {
        &self.she[i * self.cols..(i + 1) * self.cols]
    }
}

/// Backpropagates `-ln p(he | prompt)` and `-ln p(she | prompt)` into the
/// weight of `module`.
pub fn gradient_pair(
    model: &MiniTransformer,
    prompt: &str,
    module: ParameterAddress,
) -> Result<GradientPair, LocateError> {
    if model.check_address(&module)? != Depth::Module {
        return Err(LocateError::Contract(format!("{module} is not a module address")));
    }
    let w = model.weight_index(module.layer, module.module.expect("module depth"));
    let ids = model.encode(prompt)?;
    let tape = Tape::new();
    let fwd = model.forward_on_tape(
        &tape,
        &ids,
        &ForwardOptions {
            logits: LogitsMode::Last,
            ..Default::default()
        },
        &|i| i == w,
    )?;
    let shape = model.params()[w].shape().to_vec();
    let grad = |target: u32| -> Result<Vec<f64>, ModelError> {
        let loss = tape.nll_sum(fwd.logits, &[Some(target as usize)])?;
        let g = tape.backward(loss)?;
        Ok(g.get_or_zeros(fwd.params[w], shape[0] * shape[1]))
    };
    let he = grad(model.tokenizer().he())?;
    let she = grad(model.tokenizer().she())?;
    Ok(GradientPair {
        module,
        rows: shape[0],
        cols: shape[1],
        he,
        she,
    })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowAggregate {
    Union,
    Intersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RowConfig {
    pub top_k: usize,
    pub aggregate: RowAggregate,
    /// Rank rows by the most negative cosine (conflicting gradients)
    /// instead of the most positive.
    pub sign_flip: bool,
}

impl Default for RowConfig {
    fn default() -> Self {
        RowConfig {
            top_k: 10,
            aggregate: RowAggregate::Union,
            sign_flip: false,
        }
    }
}

fn check_degenerate(g: &GradientPair, case: &PromptCase) -> Result<(), LocateError> {
    if g.he.iter().chain(&g.she).all(|&v| v == 0.0) {
        return Err(LocateError::Degenerate(format!(
            "no gradient reaches {} on case {}",
            g.module, case.id
        )));
    }
    Ok(())
}

/// Row importance is the cosine between the "he" and "she" gradient rows.
/// Each case keeps its top-k rows; the per-case sets are then merged.
pub fn locate_row(
    model: &MiniTransformer,
    cases: &[PromptCase],
    key_module: ParameterAddress,
    cfg: &RowConfig,
    probe_set: &str,
) -> Result<ImportanceReport, LocateError> {
    if cases.is_empty() {
        return Err(LocateError::Contract("no cases for row locating".into()));
    }
    if cfg.top_k == 0 {
        return Err(LocateError::Contract("row top_k must be positive".into()));
    }
    if model.check_address(&key_module)? != Depth::Module {
        return Err(LocateError::Contract(format!("{key_module} is not a module address")));
    }
    let (layer, kind) = (key_module.layer, key_module.module.expect("module depth"));
    let mut report = ImportanceReport::new(Granularity::Row, probe_set);
    let mut merged: Option<BTreeSet<ParameterAddress>> = None;
    let sign = if cfg.sign_flip { -1.0 } else { 1.0 };
    for case in cases {
        let g = gradient_pair(model, &case.prompt, key_module)?;
        check_degenerate(&g, case)?;
        let cos: Vec<f64> = (0..g.rows).map(|i| cosine(g.row_he(i), g.row_she(i))).collect();
        for (i, c) in cos.iter().enumerate() {
            *report.scores.entry(ParameterAddress::row(layer, kind, i)).or_default() += c;
        }
        let spread: Vec<f64> = (0..g.rows)
            .map(|i| {
                g.row_he(i)
                    .iter()
                    .zip(g.row_she(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let keys: Vec<f64> = cos.iter().map(|c| sign * c).collect();
        let top: Vec<ParameterAddress> = rank_rows(&keys, &spread, cfg.top_k)
            .into_iter()
            .map(|i| ParameterAddress::row(layer, kind, i))
            .collect();
        let set: BTreeSet<ParameterAddress> = top.iter().copied().collect();
        merged = Some(match (merged, cfg.aggregate) {
            (None, _) => set,
            (Some(m), RowAggregate::Union) => &m | &set,
            (Some(m), RowAggregate::Intersection) => &m & &set,
        });
        report.push_case(case.id, top[0], Some(top));
    }
    report.average();
    report.selected = merged.unwrap_or_default().into_iter().collect();
    if report.selected.is_empty() {
        return Err(LocateError::Degenerate(
            "the per-case row sets have an empty intersection".into(),
        ));
    }
    report.settings.insert("top_k".into(), cfg.top_k.to_string());
    report.settings.insert(
        "aggregate".into(),
        format!("{:?}", cfg.aggregate).to_lowercase(),
    );
    report.settings.insert("sign_flip".into(), cfg.sign_flip.to_string());
    Ok(report)
}

/// Orders rows by cosine compared at 1e-9 resolution, then by the norm of
/// the gradient difference, then by index. A module whose gradient is rank
/// one (the last layer's fc_out under a single-position loss) has every
/// cosine at exactly ±1, so the first key alone would rank on rounding noise.
pub(crate) fn rank_rows(keys: &[f64], spread: &[f64], k: usize) -> Vec<usize> {
    let q = |x: f64| (x * 1e9).round() as i64;
    let mut ix: Vec<usize> = (0..keys.len()).collect();
    ix.sort_by(|&a, &b| {
        q(keys[b])
            .cmp(&q(keys[a]))
            .then(spread[b].total_cmp(&spread[a]))
            .then(a.cmp(&b))
    });
    ix.truncate(k);
    ix
}

/// Neuron importance is `|g_he - g_she|` inside each selected row; every
/// case keeps the top-k columns of every row and the sets are united.
/// `subset` restricts the pass to some of the report's rows.
pub fn locate_neuron(
    model: &MiniTransformer,
    cases: &[PromptCase],
    row_report: &ImportanceReport,
    subset: Option<&[ParameterAddress]>,
    top_k_cols: usize,
    probe_set: &str,
) -> Result<ImportanceReport, LocateError> {
    if row_report.level != Granularity::Row {
        return Err(LocateError::Contract(format!(
            "neuron locating needs a row report, got {}",
            row_report.level
        )));
    }
    if cases.is_empty() {
        return Err(LocateError::Contract("no cases for neuron locating".into()));
    }
    if top_k_cols == 0 {
        return Err(LocateError::Contract("neuron top_k must be positive".into()));
    }
    let rows: Vec<ParameterAddress> = match subset {
        None => row_report.selected.clone(),
        Some(s) => {
            if let Some(a) = s.iter().find(|a| !row_report.selected.contains(a)) {
                return Err(LocateError::Contract(format!("row {a} is not in the selected row set")));
            }
            s.to_vec()
        }
    };
    if rows.is_empty() {
        return Err(LocateError::Contract("no rows to locate neurons in".into()));
    }
    let mut by_module: BTreeMap<ParameterAddress, Vec<usize>> = BTreeMap::new();
    for r in &rows {
        let module = r.parent().filter(|_| r.depth().ok() == Some(Depth::Row)).ok_or_else(|| {
            LocateError::Contract(format!("{r} is not a row address"))
        })?;
        by_module.entry(module).or_default().push(r.row.expect("row depth"));
    }
    let mut report = ImportanceReport::new(Granularity::Neuron, probe_set);
    let mut merged = BTreeSet::new();
    for case in cases {
        let mut top = Vec::new();
        let mut best: Option<(f64, ParameterAddress)> = None;
        for (&module, row_ix) in &by_module {
            let g = gradient_pair(model, &case.prompt, module)?;
            check_degenerate(&g, case)?;
            let kind = module.module.expect("module depth");
            for &i in row_ix {
                if i >= g.rows {
                    return Err(LocateError::Contract(format!("row {i} is outside {module}")));
                }
                let diff: Vec<f64> = g
                    .row_he(i)
                    .iter()
                    .zip(g.row_she(i))
                    .map(|(a, b)| (a - b).abs())
                    .collect();
                for (j, d) in diff.iter().enumerate() {
                    let a = ParameterAddress::neuron(module.layer, kind, i, j);
                    *report.scores.entry(a).or_default() += d;
                }
                for j in top_k(&diff, top_k_cols) {
                    let a = ParameterAddress::neuron(module.layer, kind, i, j);
                    if best.is_none_or(|(v, _)| diff[j] > v) {
                        best = Some((diff[j], a));
                    }
                    top.push(a);
                }
            }
        }
        merged.extend(top.iter().copied());
        report.push_case(case.id, best.expect("at least one row").1, Some(top));
    }
    report.average();
    report.selected = merged.into_iter().collect();
    report.settings.insert("top_k".into(), top_k_cols.to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_properties() {
        let a = [1.0, -2.0, 0.5];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &a[..2]), 0.0);
        let scaled: Vec<f64> = a.iter().map(|v| 7.5 * v).collect();
        assert!((cosine(&a, &scaled) - 1.0).abs() < 1e-15);
        assert!((cosine(&a, &scaled.iter().map(|v| -v).collect::<Vec<_>>()) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_rows_ignores_rounding_noise() {
        let keys = [1.0, 0.9999999999999998, 1.0000000000000002, 0.5];
        let spread = [0.1, 0.3, 0.2, 9.0];
        assert_eq!(rank_rows(&keys, &spread, 3), vec![1, 2, 0]);
        assert_eq!(rank_rows(&[0.2, 0.7], &[5.0, 0.0], 1), vec![1]);
    }
}

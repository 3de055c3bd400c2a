use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{fb_score, GenderProbe, MetricsError};
use crate::corpus::{ModifierCategory, PromptCase};
use crate::model::{ForwardOptions, MiniTransformer};
use crate::tensor::log_sum_exp;

/// Anything that can report next-token "he"/"she" probabilities.
pub trait GenderProber {
    fn probe(&self, prompt: &str) -> Result<GenderProbe, String>;
}

impl GenderProber for MiniTransformer {
    fn probe(&self, prompt: &str) -> Result<GenderProbe, String> {
        self.gender_probe(prompt).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: usize,
    pub profession: String,
    pub modifier: String,
    pub category: ModifierCategory,
    pub p_he: f64,
    pub p_she: f64,
    pub fb_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: ModifierCategory,
    pub cases: usize,
    pub mean_fb: f64,
}

/// Token-level scores on held-out text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Locality {
    pub nll: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    /// Cases requested.
    pub cases: usize,
    /// Cases that produced a probe.
    pub evaluated: usize,
    pub mean_fb: f64,
    /// Present categories in canonical order.
    pub categories: Vec<CategoryScore>,
    /// Unweighted mean of the category means.
    pub average: f64,
    pub partial: bool,
    pub failures: Vec<CaseFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality: Option<Locality>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pass_at_k: BTreeMap<String, f64>,
    pub results: Vec<CaseResult>,
}

/// Probes every case and aggregates FB-Scores. Cases are reduced in id
/// order so the result does not depend on the order they were given in.
pub fn evaluate_split(
    prober: &dyn GenderProber,
    split: &str,
    cases: &[PromptCase],
) -> Result<EvalSummary, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::Config(format!("split {split:?} has no cases")));
    }
    let mut ordered: Vec<&PromptCase> = cases.iter().collect();
    ordered.sort_by_key(|c| c.id);

    let mut results = Vec::with_capacity(cases.len());
    let mut failures = Vec::new();
    for case in ordered {
        match prober.probe(&case.prompt) {
            Ok(p) => results.push(CaseResult {
                id: case.id,
                profession: case.profession.name.clone(),
                modifier: case.modifier.clone(),
                category: case.category,
                p_he: p.p_he(),
                p_she: p.p_she(),
                fb_score: fb_score(&p, &case.shares),
            }),
            Err(error) => {
                log::warn!("case {} failed: {error}", case.id);
                failures.push(CaseFailure { id: case.id, error });
            }
        }
    }
    summarize(split, cases.len(), results, failures)
}

/// Builds a summary from per-case results (already in id order).
pub fn summarize(
    split: &str,
    requested: usize,
    results: Vec<CaseResult>,
    failures: Vec<CaseFailure>,
) -> Result<EvalSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Probe(format!(
            "every case of split {split:?} failed"
        )));
    }
    let mean_fb = results.iter().map(|r| r.fb_score).sum::<f64>() / results.len() as f64;
    let mut categories = Vec::new();
    for cat in ModifierCategory::ALL {
        let scores: Vec<f64> = results
            .iter()
            .filter(|r| r.category == cat)
            .map(|r| r.fb_score)
            .collect();
        if !scores.is_empty() {
            categories.push(CategoryScore {
                category: cat,
                cases: scores.len(),
                mean_fb: scores.iter().sum::<f64>() / scores.len() as f64,
            });
        }
    }
    let average = categories.iter().map(|c| c.mean_fb).sum::<f64>() / categories.len() as f64;
    Ok(EvalSummary {
        split: split.to_string(),
        cases: requested,
        evaluated: results.len(),
        mean_fb,
        categories,
        average,
        partial: !failures.is_empty(),
        failures,
        locality: None,
        pass_at_k: BTreeMap::new(),
        results,
    })
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["split".to_string()];
        cols.extend(ModifierCategory::ALL.iter().map(|c| c.name().to_string()));
        cols.extend(
            ["Average", "mean", "cases", "evaluated", "partial", "nll", "accuracy"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    /// One row in the column order of [`EvalSummary::csv_header`].
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.split.clone()];
        for cat in ModifierCategory::ALL {
            cols.push(
                self.categories
                    .iter()
                    .find(|c| c.category == cat)
                    .map(|c| format!("{:.6}", c.mean_fb))
                    .unwrap_or_default(),
            );
        }
        cols.push(format!("{:.6}", self.average));
        cols.push(format!("{:.6}", self.mean_fb));
        cols.push(self.cases.to_string());
        cols.push(self.evaluated.to_string());
        cols.push(self.partial.to_string());
        match &self.locality {
            Some(l) => {
                cols.push(format!("{:.6}", l.nll));
                cols.push(format!("{:.6}", l.accuracy));
            }
            None => {
                cols.push(String::new());
                cols.push(String::new());
            }
        }
        cols.join(",")
    }
}

/// Splits a token sequence into consecutive windows that fit the context.
pub fn windows(ids: &[u32], context_len: usize) -> impl Iterator<Item = &[u32]> {
    ids.chunks(context_len).filter(|w| w.len() >= 2)
}

/// Mean next-token NLL and greedy accuracy over `texts`.
pub fn locality_metrics(model: &MiniTransformer, texts: &[String]) -> Result<Locality, MetricsError> {
    if texts.is_empty() {
        return Err(MetricsError::Config("locality holdout is empty".into()));
    }
    let (mut nll, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for text in texts {
        let ids = model.encode(text)?;
        for w in windows(&ids, model.config().context_len) {
            let logits = model.forward(w, &ForwardOptions::default())?.logits;
            for t in 0..w.len() - 1 {
                let row = logits.row(t);
                let target = w[t + 1] as usize;
                nll += log_sum_exp(row) - row[target];
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                correct += usize::from(argmax == target);
                tokens += 1;
            }
        }
    }
    if tokens == 0 {
        return Err(MetricsError::Config("locality holdout has no token pairs".into()));
    }
    Ok(Locality {
        nll: nll / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)` in product form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, MetricsError> {
    if c > n || k == 0 || k > n {
        return Err(MetricsError::Contract(format!(
            "pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let prod: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - prod)
}

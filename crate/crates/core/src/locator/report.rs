use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Granularity, LocateError};
use crate::model::ParameterAddress;

/// Scores from one locating pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub level: Granularity,
    /// Names the probe cases, e.g. the split they came from.
    pub probe_set: String,
    /// Probe case ids in evaluation order.
    pub cases: Vec<usize>,
    /// Mean importance per address over the probe cases.
    pub scores: BTreeMap<ParameterAddress, f64>,
    /// Highest-importance address of each case, parallel to `cases`.
    pub winners: Vec<ParameterAddress>,
    pub votes: BTreeMap<ParameterAddress, usize>,
    pub selected: Vec<ParameterAddress>,
    /// Per-case top-k selections (row and neuron levels only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub case_top: Vec<Vec<ParameterAddress>>,
    /// Pearson correlation of the signed "he" shift between single-module
    /// ablations, indexed by module (module level only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

impl ImportanceReport {
    pub(crate) fn new(level: Granularity, probe_set: &str) -> Self {
        ImportanceReport {
            level,
            probe_set: probe_set.to_string(),
            cases: Vec::new(),
            scores: BTreeMap::new(),
            winners: Vec::new(),
            votes: BTreeMap::new(),
            selected: Vec::new(),
            case_top: Vec::new(),
            coupling: None,
            settings: BTreeMap::new(),
        }
    }

    /// Appends one case: its id, its argmax address, and (optionally) its
    /// top-k selection.
    pub(crate) fn push_case(
        &mut self,
        id: usize,
        winner: ParameterAddress,
        top: Option<Vec<ParameterAddress>>,
    ) {
        self.cases.push(id);
        self.winners.push(winner);
        *self.votes.entry(winner).or_default() += 1;
        if let Some(t) = top {
            self.case_top.push(t);
        }
    }

    /// Turns accumulated score sums into means.
    pub(crate) fn average(&mut self) {
        let n = self.cases.len().max(1) as f64;
        self.scores.values_mut().for_each(|v| *v /= n);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LocateError> {
        let r: ImportanceReport =
            serde_json::from_str(s).map_err(|e| LocateError::Format(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), LocateError> {
        let bad = |m: String| Err(LocateError::Format(m));
        if self.level == Granularity::Full {
            return bad("full granularity has no importance report".into());
        }
        if self.winners.len() != self.cases.len() {
            return bad("winners and cases differ in length".into());
        }
        let votes: usize = self.votes.values().sum();
        if votes != self.cases.len() {
            return bad(format!("{votes} votes for {} cases", self.cases.len()));
        }
        let depth = self.level.depth();
        for a in self.scores.keys().chain(&self.selected).chain(&self.winners) {
            if a.depth().ok() != depth {
                return bad(format!("address {a} is not at {} depth", self.level));
            }
        }
        for (a, &s) in &self.scores {
            let ok = if self.level == Granularity::Row {
                (-1.0 - 1e-9..=1.0 + 1e-9).contains(&s)
            } else {
                s >= 0.0
            };
            if !ok {
                return bad(format!("score {s} of {a} is out of range"));
            }
        }
        Ok(())
    }

    /// Vote table as CSV: address, votes, mean score.
    pub fn votes_csv(&self) -> String {
        let mut s = String::from("address,votes,score\n");
        for (a, score) in &self.scores {
            let v = self.votes.get(a).copied().unwrap_or(0);
            s.push_str(&format!("{a},{v},{score:.6}\n"));
        }
        s
    }
}

/// Indices of the `k` largest `keys`, ties going to the lower index.
pub(crate) fn top_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..keys.len()).collect();
    ix.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    ix.truncate(k);
    ix
}

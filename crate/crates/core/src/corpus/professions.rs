use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfessionRecord {
    pub name: String,
    pub f_score: f64,
    pub s_score: f64,
}

impl ProfessionRecord {
    pub fn new(name: &str, f_score: f64, s_score: f64) -> Result<Self, String> {
        if name.is_empty() {
            return Err("empty profession name".into());
        }
        if name != name.to_lowercase() {
            return Err(format!("profession {name:?} is not lowercase"));
        }
        if name.contains('_') {
            return Err(format!("profession {name:?} contains '_'; use spaces"));
        }
        if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == ' ')
            || name.starts_with(' ')
            || name.ends_with(' ')
            || name.contains("  ")
        {
            return Err(format!(
                "profession {name:?} must be ASCII words separated by single spaces"
            ));
        }
        for (label, v) in [("f_score", f_score), ("s_score", s_score)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(format!("{label} {v} of {name:?} is outside [-1, 1]"));
            }
        }
        Ok(ProfessionRecord {
            name: name.to_string(),
            f_score,
            s_score,
        })
    }

    /// Name as it appears in identifiers: spaces become underscores.
    pub fn ident(&self) -> String {
        self.name.replace(' ', "_")
    }
}

/// Parses `name<TAB>f_score<TAB>s_score` lines. `#` starts a comment; blank
/// lines are skipped. Errors carry 1-based line numbers.
pub fn parse_professions(text: &str) -> Result<Vec<ProfessionRecord>, CorpusError> {
    let mut out: Vec<ProfessionRecord> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Validation {
            line: Some(line_no),
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| err(format!("{what} {s:?} is not a number")))
        };
        let f = num(fields[1], "f_score")?;
        let s = num(fields[2], "s_score")?;
        let rec = ProfessionRecord::new(fields[0].trim(), f, s).map_err(err)?;
        if out.iter().any(|r| r.name == rec.name) {
            return Err(err(format!("duplicate profession {:?}", rec.name)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn ingest_professions(path: &Path) -> Result<Vec<ProfessionRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_professions(&text).map_err(|e| e.in_file(path))
}

pub fn professions_to_tsv(records: &[ProfessionRecord]) -> String {
    let mut s = String::from("# name\tf_score\ts_score\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\n", r.name, r.f_score, r.s_score));
    }
    s
}

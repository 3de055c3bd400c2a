//! Harness configuration: built-in defaults, overlaid by a TOML file,
//! overlaid by `--set section.key=value` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use codebias_core::corpus::{CorpusConfig, SplitPlan};
use codebias_core::editor::EditConfig;
use codebias_core::locator::LocateConfig;
use codebias_core::model::ModelConfig;
use codebias_core::train::TrainConfig;

use crate::adapter::AdapterEndpoint;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Tab-separated `name, f_score, s_score`; the bundled desk list if unset.
    pub professions: Option<PathBuf>,
    /// Modifier TOML; the built-in semantic lists if unset.
    pub modifiers: Option<PathBuf>,
    pub split_plan: SplitPlan,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            professions: None,
            modifiers: None,
            split_plan: SplitPlan::Proportional,
            seed: 0,
        }
    }
}

/// Injected bias of the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSection {
    /// Probability of the majority pronoun for every profession with a
    /// nonzero factual score.
    pub strength: f64,
    /// Per-profession probability of "he", applied after `strength`.
    pub p_he: BTreeMap<String, f64>,
}

impl Default for BiasSection {
    fn default() -> Self {
        BiasSection {
            strength: 0.95,
            p_he: BTreeMap::from([("nurse".to_string(), 0.1)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Compact,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub size: ModelSize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: ModelSize::Compact,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = match self.size {
            ModelSize::Compact => ModelConfig::compact(vocab_size),
            ModelSize::Desk => ModelConfig::desk(vocab_size),
        };
        c.seed = self.seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub dataset: DatasetSection,
    pub corpus: CorpusConfig,
    pub bias: BiasSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub locate: LocateConfig,
    pub edit: EditConfig,
    pub adapter: Option<AdapterEndpoint>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML value, or taken as a bare
/// string if it does not parse as one.
fn apply_set(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {spec:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key in --set {spec:?}")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {spec:?}: {part} is not a section")))?;
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

impl HarnessConfig {
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(HarnessConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let over: toml::Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, over);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: HarnessConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {e}")))?;
        cfg.edit.validate()?;
        if let Some(a) = &cfg.adapter {
            a.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

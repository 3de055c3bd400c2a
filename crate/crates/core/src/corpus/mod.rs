//! Prompt dataset generation, profession files, and the synthetic corpus
//! used to train the toy model.

mod dataset;
mod modifiers;
mod professions;
mod synth;
pub mod template;

use std::path::Path;

pub use dataset::{generate_dataset, split_counts, Dataset, PromptCase, Split, SplitPlan, PAPER_PROFESSIONS};
pub use modifiers::{ModifierCategory, ModifierSet, SEMANTIC_MODIFIERS, TABLE_MODIFIERS};
pub use professions::{ingest_professions, parse_professions, professions_to_tsv, ProfessionRecord};
pub use synth::{
    generate_biased_corpus, BiasSpec, Corpus, CorpusConfig, CorpusCounts, CorpusManifest, Sample,
    SampleKind,
};
pub use template::{render_prompt, Pronoun};

/// The bundled 32-profession desk-scale list.
pub const DESK_PROFESSIONS: &str = include_str!("../../data/professions_desk32.tsv");

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{}", match line { Some(l) => format!("line {l}: {message}"), None => message.clone() })]
    Validation { line: Option<usize>, message: String },
    #[error("{path}: {message}")]
    InFile { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CorpusError {
    fn in_file(self, path: &Path) -> Self {
        CorpusError::InFile {
            path: path.display().to_string(),
            message: self.to_string(),
        }
    }
}

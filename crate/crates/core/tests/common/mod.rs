//! Small models and case sets shared by the integration tests.
#![allow(dead_code)]

pub mod metric;
pub mod oracles;

use codebias_core::corpus::{
    generate_dataset, ModifierSet, ProfessionRecord, PromptCase, SplitPlan,
};
use codebias_core::model::{MiniTransformer, ModelConfig, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cases(n: usize) -> Vec<PromptCase> {
    let profs = vec![
        ProfessionRecord::new("nurse", -0.1, -0.7).unwrap(),
        ProfessionRecord::new("engineer", 0.3, 0.5).unwrap(),
    ];
    let d = generate_dataset(&profs, &ModifierSet::semantic(), SplitPlan::Proportional, 0).unwrap();
    d.cases.into_iter().step_by(3).take(n).collect()
}

pub fn recovery_texts() -> Vec<String> {
    (0..6)
        .map(|i| format!("def f{i}(x):\n    y = x + {i}\n    return y * {}", i + 1))
        .collect()
}

/// A d_model=8 model whose weights are large enough for every gradient
/// to be well away from zero.
pub fn small_model(cases: &[PromptCase], n_layers: usize, seed: u64) -> MiniTransformer {
    let texts: Vec<String> = cases
        .iter()
        .map(|c| c.prompt.clone())
        .chain(recovery_texts())
        .collect();
    let tok = Tokenizer::build(texts.iter().map(String::as_str));
    let cfg = ModelConfig {
        vocab_size: tok.len(),
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_mlp: 12,
        context_len: 128,
        seed,
    };
    let mut m = MiniTransformer::new(cfg, tok).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.4..0.4);
        }
    }
    m
}

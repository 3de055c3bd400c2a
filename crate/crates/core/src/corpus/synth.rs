//! Synthetic training corpus for the toy model: template completions whose
//! pronoun follows a per-profession bias, mixed with code-like filler. Two
//! disjoint filler slices are withheld: the recovery set used while editing
//! and a holdout for measuring retained capability.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::{completion, plural_ident, render_prompt, Pronoun, TEMPLATE_VERSION};
use super::{CorpusError, ModifierSet, ProfessionRecord};

/// Per-profession probability that a training completion uses "he".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BiasSpec {
    pub p_he: BTreeMap<String, f64>,
}

impl BiasSpec {
    /// Pushes every profession towards its factual majority pronoun with
    /// probability `strength`; professions with a zero score stay at 0.5.
    pub fn amplify(professions: &[ProfessionRecord], strength: f64) -> Self {
        let p_he = professions
            .iter()
            .map(|p| {
                let v = if p.f_score > 0.0 {
                    strength
                } else if p.f_score < 0.0 {
                    1.0 - strength
                } else {
                    0.5
                };
                (p.name.clone(), v)
            })
            .collect();
        BiasSpec { p_he }
    }

    pub fn set(&mut self, profession: &str, p_he: f64) {
        self.p_he.insert(profession.to_string(), p_he);
    }

    pub fn get(&self, profession: &str) -> Option<f64> {
        self.p_he.get(profession).copied()
    }

    pub fn validate(&self, professions: &[ProfessionRecord]) -> Result<(), CorpusError> {
        if self.p_he.is_empty() {
            return Err(CorpusError::Config("bias spec is empty".into()));
        }
        for (name, p) in &self.p_he {
            if !(0.0..=1.0).contains(p) {
                return Err(CorpusError::Config(format!(
                    "bias for {name:?} is {p}, outside [0, 1]"
                )));
            }
        }
        if let Some(p) = professions.iter().find(|p| !self.p_he.contains_key(&p.name)) {
            return Err(CorpusError::Config(format!("bias spec has no entry for {:?}", p.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Template completions in the training slice.
    pub n_samples: usize,
    /// Filler samples in the training slice.
    pub filler_samples: usize,
    pub recovery_samples: usize,
    pub holdout_samples: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_samples: 2000,
            filler_samples: 1000,
            recovery_samples: 128,
            holdout_samples: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleKind {
    Bias {
        profession: String,
        modifier: String,
        pronoun: Pronoun,
    },
    Filler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    #[serde(flatten)]
    pub kind: SampleKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub bias: usize,
    pub filler: usize,
    pub recovery: usize,
    pub holdout: usize,
    /// Per profession: (he completions, she completions).
    pub pronouns: BTreeMap<String, (usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub template_version: u32,
    pub config: CorpusConfig,
    pub bias_spec: BiasSpec,
    pub counts: CorpusCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub recovery: Vec<Sample>,
    pub holdout: Vec<Sample>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn texts(samples: &[Sample]) -> Vec<String> {
        samples.iter().map(|s| s.text.clone()).collect()
    }

    /// Plain-text form: samples separated by one blank line.
    pub fn join(samples: &[Sample]) -> String {
        let mut s = samples
            .iter()
            .map(|x| x.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        s.push('\n');
        s
    }

    /// Splits a plain-text corpus back into sample texts.
    pub fn split_text(text: &str) -> Vec<String> {
        text.trim_end_matches('\n')
            .split("\n\n")
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn samples_jsonl(samples: &[Sample]) -> String {
        samples
            .iter()
            .map(|s| serde_json::to_string(s).expect("sample serializes") + "\n")
            .collect()
    }
}

pub fn generate_biased_corpus(
    professions: &[ProfessionRecord],
    modifiers: &ModifierSet,
    bias: &BiasSpec,
    cfg: &CorpusConfig,
) -> Result<Corpus, CorpusError> {
    bias.validate(professions)?;
    if professions.is_empty() {
        return Err(CorpusError::Config("no professions given".into()));
    }
    if cfg.n_samples < 10 * professions.len() {
        return Err(CorpusError::Config(format!(
            "n_samples {} is below 10 per profession ({})",
            cfg.n_samples,
            10 * professions.len()
        )));
    }
    if cfg.recovery_samples == 0 || cfg.holdout_samples == 0 {
        return Err(CorpusError::Config("recovery and holdout slices must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mods = modifiers.all();

    let mut bias_samples = Vec::with_capacity(cfg.n_samples);
    let mut pronoun_counts = BTreeMap::new();
    let per = cfg.n_samples / professions.len();
    let extra = cfg.n_samples % professions.len();
    for (i, p) in professions.iter().enumerate() {
        let k = per + usize::from(i < extra);
        let p_he = bias.get(&p.name).expect("validated");
        let n_he = (p_he * k as f64).round() as usize;
        let mut pronouns: Vec<Pronoun> = (0..k)
            .map(|j| if j < n_he { Pronoun::He } else { Pronoun::She })
            .collect();
        pronouns.shuffle(&mut rng);
        pronoun_counts.insert(p.name.clone(), (n_he, k - n_he));
        for pronoun in pronouns {
            let (_, word) = *mods.choose(&mut rng).expect("modifiers nonempty");
            bias_samples.push((
                SampleKind::Bias {
                    profession: p.name.clone(),
                    modifier: word.to_string(),
                    pronoun,
                },
                format!("{}{}", render_prompt(p, word), completion(pronoun)),
            ));
        }
    }

    let n_filler = cfg.filler_samples + cfg.recovery_samples + cfg.holdout_samples;
    let mut seen = HashSet::new();
    let mut filler = Vec::with_capacity(n_filler);
    let mut attempts = 0usize;
    while filler.len() < n_filler {
        attempts += 1;
        if attempts > 100 * n_filler + 1000 {
            return Err(CorpusError::Config(format!(
                "filler grammar cannot produce {n_filler} distinct samples"
            )));
        }
        let text = filler_sample(&mut rng);
        if seen.insert(text.clone()) {
            filler.push(text);
        }
    }
    let holdout_texts = filler.split_off(filler.len() - cfg.holdout_samples);
    let recovery_texts = filler.split_off(filler.len() - cfg.recovery_samples);

    let mut train_items: Vec<(SampleKind, String)> = bias_samples;
    train_items.extend(filler.into_iter().map(|t| (SampleKind::Filler, t)));
    train_items.shuffle(&mut rng);

    let mut next_id = 0;
    let mut make = |kind: SampleKind, text: String| {
        let s = Sample {
            id: next_id,
            kind,
            text,
        };
        next_id += 1;
        s
    };
    let train: Vec<Sample> = train_items.into_iter().map(|(k, t)| make(k, t)).collect();
    let recovery: Vec<Sample> = recovery_texts
        .into_iter()
        .map(|t| make(SampleKind::Filler, t))
        .collect();
    let holdout: Vec<Sample> = holdout_texts
        .into_iter()
        .map(|t| make(SampleKind::Filler, t))
        .collect();

    let manifest = CorpusManifest {
        seed: cfg.seed,
        template_version: TEMPLATE_VERSION,
        config: cfg.clone(),
        bias_spec: bias.clone(),
        counts: CorpusCounts {
            bias: cfg.n_samples,
            filler: cfg.filler_samples,
            recovery: recovery.len(),
            holdout: holdout.len(),
            pronouns: pronoun_counts,
        },
    };
    Ok(Corpus {
        train,
        recovery,
        holdout,
        manifest,
    })
}

const NOUNS: [&str; 20] = [
    "apple", "dog", "car", "book", "file", "user", "order", "item", "city", "tree", "ship", "task",
    "song", "movie", "house", "plant", "star", "card", "box", "key",
];
const ATTRS: [&str; 11] = [
    "color", "size", "price", "age", "name", "weight", "speed", "status", "level", "health",
    "score",
];
const VALUES: [&str; 13] = [
    "red", "blue", "green", "bad", "good", "open", "closed", "large", "small", "new", "old",
    "fast", "slow",
];
const VERBS: [&str; 7] = ["find", "get", "filter", "select", "collect", "list", "pick"];
const OPS: [&str; 6] = [">", "<", "==", ">=", "<=", "!="];

/// One code-like sample from a small grammar. Never contains a pronoun or a
/// blank line.
fn filler_sample(rng: &mut ChaCha8Rng) -> String {
    let noun = *NOUNS.choose(rng).expect("nonempty");
    let nouns = plural_ident(noun);
    let attr = *ATTRS.choose(rng).expect("nonempty");
    let verb = *VERBS.choose(rng).expect("nonempty");
    let value = *VALUES.choose(rng).expect("nonempty");
    let op = *OPS.choose(rng).expect("nonempty");
    let num: u32 = rng.random_range(0..20);
    match rng.random_range(0..5) {
        0 => format!(
            "def {verb}_{value}_{nouns}({nouns}, {attr}):\n    return [{noun} for {noun} in {nouns} if {noun}.{attr} == \"{value}\"]"
        ),
        1 => format!("def {verb}_{noun}({noun}, {attr}):\n    return {noun}.{attr} {op} {num}"),
        2 => format!(
            "def total_{attr}({nouns}):\n    total = 0\n    for {noun} in {nouns}:\n        total += {noun}.{attr}\n    return total"
        ),
        3 => format!(
            "def count_{nouns}({nouns}, {attr}):\n    return len([{noun} for {noun} in {nouns} if {noun}.{attr} {op} {num}])"
        ),
        _ => format!(
            "def {verb}_first_{noun}({nouns}):\n    for {noun} in {nouns}:\n        if {noun}.{attr} {op} {num}:\n            return {noun}\n    return None"
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Vec<ProfessionRecord>, ModifierSet) {
        let p = vec![
            ProfessionRecord::new("nurse", -0.1, -0.7).unwrap(),
            ProfessionRecord::new("lifeguard", 0.0, 0.6).unwrap(),
            ProfessionRecord::new("engineer", 0.3, 0.5).unwrap(),
        ];
        (p, ModifierSet::semantic())
    }

    #[test]
    fn degenerate_bias_has_no_opposite_completion() {
        let (p, m) = setup();
        let mut bias = BiasSpec::amplify(&p, 0.9);
        bias.set("nurse", 0.0);
        let c = generate_biased_corpus(&p, &m, &bias, &CorpusConfig::default()).unwrap();
        let nurse_he = c.train.iter().any(|s| {
            matches!(&s.kind, SampleKind::Bias { profession, pronoun: Pronoun::He, .. } if profession == "nurse")
        });
        assert!(!nurse_he);
        assert!(!c
            .train
            .iter()
            .any(|s| s.text.contains("nurse.personal_pronoun == \"he\"")));
    }

    #[test]
    fn frequencies_follow_bias() {
        let (p, m) = setup();
        let bias = BiasSpec::amplify(&p, 0.9);
        let cfg = CorpusConfig {
            n_samples: 20_000,
            filler_samples: 10,
            ..Default::default()
        };
        let c = generate_biased_corpus(&p, &m, &bias, &cfg).unwrap();
        for prof in &p {
            let (mut he, mut total) = (0usize, 0usize);
            for s in &c.train {
                if let SampleKind::Bias { profession, pronoun, .. } = &s.kind {
                    if *profession == prof.name {
                        total += 1;
                        he += usize::from(*pronoun == Pronoun::He);
                    }
                }
            }
            let freq = he as f64 / total as f64;
            assert!((freq - bias.get(&prof.name).unwrap()).abs() <= 0.03, "{}", prof.name);
        }
    }

    #[test]
    fn slices_are_disjoint() {
        let (p, m) = setup();
        let c = generate_biased_corpus(&p, &m, &BiasSpec::amplify(&p, 0.9), &CorpusConfig::default())
            .unwrap();
        let ids: HashSet<usize> = c.train.iter().map(|s| s.id).collect();
        assert!(c.recovery.iter().chain(&c.holdout).all(|s| !ids.contains(&s.id)));
        let texts: HashSet<&str> = c.train.iter().map(|s| s.text.as_str()).collect();
        assert!(c
            .recovery
            .iter()
            .chain(&c.holdout)
            .all(|s| !texts.contains(s.text.as_str())));
        assert_eq!(c.recovery.len(), 128);
        for s in c.recovery.iter().chain(&c.holdout) {
            assert!(!s.text.contains("\n\n"));
            assert!(!s.text.contains("pronoun"));
        }
        assert_eq!(Corpus::split_text(&Corpus::join(&c.train)), Corpus::texts(&c.train));
    }

    #[test]
    fn preconditions() {
        let (p, m) = setup();
        let small = CorpusConfig {
            n_samples: 29,
            ..Default::default()
        };
        assert!(generate_biased_corpus(&p, &m, &BiasSpec::amplify(&p, 0.9), &small).is_err());
        assert!(generate_biased_corpus(&p, &m, &BiasSpec::default(), &CorpusConfig::default()).is_err());
        let mut partial = BiasSpec::default();
        partial.set("nurse", 0.1);
        assert!(generate_biased_corpus(&p, &m, &partial, &CorpusConfig::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let (p, m) = setup();
        let b = BiasSpec::amplify(&p, 0.8);
        let a = generate_biased_corpus(&p, &m, &b, &CorpusConfig::default()).unwrap();
        let c = generate_biased_corpus(&p, &m, &b, &CorpusConfig::default()).unwrap();
        assert_eq!(a, c);
    }
}

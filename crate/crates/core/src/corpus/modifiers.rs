use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::CorpusError;

/// Default category mapping: word lists follow their sentiment.
pub const SEMANTIC_MODIFIERS: &str = include_str!("../../data/modifiers.toml");
/// The word lists exactly as labeled in the reference modifier table. Its
/// category sizes do not fit the reference split counts, so it only works
/// with proportional splits.
pub const TABLE_MODIFIERS: &str = include_str!("../../data/modifiers_table.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModifierCategory {
    RobertaNeg,
    RandomNeg,
    RandomPos,
    ComparativeNeg,
    ComparativePos,
}

impl ModifierCategory {
    pub const ALL: [ModifierCategory; 5] = [
        ModifierCategory::RobertaNeg,
        ModifierCategory::RandomNeg,
        ModifierCategory::RandomPos,
        ModifierCategory::ComparativeNeg,
        ModifierCategory::ComparativePos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModifierCategory::RobertaNeg => "RoBERTa-Neg",
            ModifierCategory::RandomNeg => "Random-Neg",
            ModifierCategory::RandomPos => "Random-Pos",
            ModifierCategory::ComparativeNeg => "Comparative-Neg",
            ModifierCategory::ComparativePos => "Comparative-Pos",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Words per category in the reference dataset.
    pub fn expected_size(self) -> usize {
        match self {
            ModifierCategory::ComparativeNeg | ModifierCategory::ComparativePos => 2,
            _ => 3,
        }
    }

    /// Reference (train, dev, test) counts for 320 professions.
    pub fn paper_counts(self) -> [usize; 3] {
        match self {
            ModifierCategory::RobertaNeg => [132, 66, 762],
            ModifierCategory::RandomNeg => [131, 65, 764],
            ModifierCategory::RandomPos => [125, 62, 773],
            ModifierCategory::ComparativeNeg => [83, 41, 516],
            ModifierCategory::ComparativePos => [85, 42, 513],
        }
    }
}

impl fmt::Display for ModifierCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModifierCategory {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModifierCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CorpusError::Config(format!("unknown modifier category {s:?}")))
    }
}

impl Serialize for ModifierCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModifierCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModifierFile {
    #[serde(default)]
    name: Option<String>,
    categories: BTreeMap<String, Vec<String>>,
}

/// Modifier words per category, in [`ModifierCategory::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModifierSet {
    pub name: String,
    words: Vec<(ModifierCategory, Vec<String>)>,
}

impl ModifierSet {
    pub fn semantic() -> Self {
        Self::from_toml(SEMANTIC_MODIFIERS).expect("bundled modifier file is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let file: ModifierFile =
            toml::from_str(text).map_err(|e| CorpusError::Config(format!("modifier file: {e}")))?;
        let mut words = Vec::new();
        for cat in ModifierCategory::ALL {
            let list = file.categories.get(cat.name()).ok_or_else(|| {
                CorpusError::Config(format!("modifier file lacks category {:?}", cat.name()))
            })?;
            words.push((cat, list.clone()));
        }
        if let Some(extra) = file
            .categories
            .keys()
            .find(|k| k.parse::<ModifierCategory>().is_err())
        {
            return Err(CorpusError::Config(format!("unknown modifier category {extra:?}")));
        }
        let set = ModifierSet {
            name: file.name.unwrap_or_else(|| "custom".into()),
            words,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_lists(name: &str, lists: [Vec<&str>; 5]) -> Result<Self, CorpusError> {
        let words = ModifierCategory::ALL
            .into_iter()
            .zip(lists)
            .map(|(c, l)| (c, l.into_iter().map(str::to_string).collect()))
            .collect();
        let set = ModifierSet {
            name: name.into(),
            words,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = std::collections::BTreeSet::new();
        for (cat, list) in &self.words {
            if list.is_empty() {
                return Err(CorpusError::Config(format!("category {cat} has no words")));
            }
            for w in list {
                if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()) {
                    return Err(CorpusError::Config(format!(
                        "modifier {w:?} must be a single lowercase word"
                    )));
                }
                if !seen.insert(w.as_str()) {
                    return Err(CorpusError::Config(format!("modifier {w:?} listed twice")));
                }
            }
        }
        Ok(())
    }

    /// Checks the per-category word counts the reference splits rely on.
    pub fn check_paper_sizes(&self) -> Result<(), CorpusError> {
        for (cat, list) in &self.words {
            if list.len() != cat.expected_size() {
                return Err(CorpusError::Config(format!(
                    "category {cat} has {} words; the reference splits need {}",
                    list.len(),
                    cat.expected_size()
                )));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> impl Iterator<Item = (ModifierCategory, &[String])> {
        self.words.iter().map(|(c, w)| (*c, w.as_slice()))
    }

    pub fn words(&self, cat: ModifierCategory) -> &[String] {
        &self.words[cat.index()].1
    }

    /// Every `(category, word)` in category order.
    pub fn all(&self) -> Vec<(ModifierCategory, &str)> {
        self.words
            .iter()
            .flat_map(|(c, ws)| ws.iter().map(move |w| (*c, w.as_str())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|(_, w)| w.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

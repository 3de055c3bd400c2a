use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::render_prompt;
use super::{CorpusError, ModifierCategory, ModifierSet, ProfessionRecord};
use crate::metrics::{factual_shares, FactualShares};

/// Number of professions in the reference dataset.
pub const PAPER_PROFESSIONS: usize = 320;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CorpusError::Config(format!("unknown split {s:?}")))
    }
}

/// How many cases of each category go to each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPlan {
    /// The reference counts; needs exactly 320 professions and the
    /// reference category sizes. The reference category rows sum to
    /// 556/276/3328 while the reference totals are 555/277/3328, so one
    /// Random-Neg case moves from train to dev to honor the totals.
    Paper,
    /// The reference category rows verbatim (totals 556/276/3328).
    PaperRows,
    /// Reference per-category proportions scaled to the profession count,
    /// rounded by largest remainder.
    Proportional,
}

impl FromStr for SplitPlan {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(SplitPlan::Paper),
            "paper-rows" => Ok(SplitPlan::PaperRows),
            "proportional" => Ok(SplitPlan::Proportional),
            _ => Err(CorpusError::Config(format!("unknown split plan {s:?}"))),
        }
    }
}

/// Per-category `(train, dev, test)` counts under `plan`.
pub fn split_counts(
    plan: SplitPlan,
    n_professions: usize,
    modifiers: &ModifierSet,
) -> Result<Vec<[usize; 3]>, CorpusError> {
    match plan {
        SplitPlan::Paper | SplitPlan::PaperRows => {
            if n_professions != PAPER_PROFESSIONS {
                return Err(CorpusError::Config(format!(
                    "the paper split plan needs {PAPER_PROFESSIONS} professions, got {n_professions}"
                )));
            }
            modifiers.check_paper_sizes()?;
            let mut rows: Vec<[usize; 3]> =
                ModifierCategory::ALL.iter().map(|c| c.paper_counts()).collect();
            if plan == SplitPlan::Paper {
                let r = &mut rows[ModifierCategory::RandomNeg.index()];
                r[0] -= 1;
                r[1] += 1;
            }
            Ok(rows)
        }
        SplitPlan::Proportional => Ok(modifiers
            .categories()
            .map(|(cat, words)| largest_remainder(cat.paper_counts(), n_professions * words.len()))
            .collect()),
    }
}

/// Scales `weights` to integers summing to `total`; leftover units go to
/// the largest fractional parts, earlier entries winning ties.
fn largest_remainder(weights: [usize; 3], total: usize) -> [usize; 3] {
    let denom: usize = weights.iter().sum();
    let mut out = [0; 3];
    let mut rems = [(0usize, 0usize); 3];
    for i in 0..3 {
        let num = weights[i] * total;
        out[i] = num / denom;
        rems[i] = (num % denom, i);
    }
    let mut left = total - out.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCase {
    pub id: usize,
    pub profession: ProfessionRecord,
    pub modifier: String,
    pub category: ModifierCategory,
    pub split: Split,
    pub prompt: String,
    pub shares: FactualShares,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseLine {
    id: usize,
    profession: String,
    modifier: String,
    category: ModifierCategory,
    split: Split,
    prompt: String,
    f_score: f64,
    s_score: f64,
}

impl PromptCase {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&CaseLine {
            id: self.id,
            profession: self.profession.name.clone(),
            modifier: self.modifier.clone(),
            category: self.category,
            split: self.split,
            prompt: self.prompt.clone(),
            f_score: self.profession.f_score,
            s_score: self.profession.s_score,
        })
        .expect("case serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, CorpusError> {
        let c: CaseLine =
            serde_json::from_str(line).map_err(|e| CorpusError::Format(e.to_string()))?;
        let profession = ProfessionRecord::new(&c.profession, c.f_score, c.s_score)
            .map_err(CorpusError::Format)?;
        let shares = factual_shares(c.f_score).map_err(|e| CorpusError::Format(e.to_string()))?;
        Ok(PromptCase {
            id: c.id,
            profession,
            modifier: c.modifier,
            category: c.category,
            split: c.split,
            prompt: c.prompt,
            shares,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cases: Vec<PromptCase>,
}

/// Renders every `(profession, modifier)` pair and assigns splits: within
/// each category the cases are shuffled under `seed` and cut at the
/// planned counts.
pub fn generate_dataset(
    professions: &[ProfessionRecord],
    modifiers: &ModifierSet,
    plan: SplitPlan,
    seed: u64,
) -> Result<Dataset, CorpusError> {
    if professions.is_empty() {
        return Err(CorpusError::Config("no professions given".into()));
    }
    let counts = split_counts(plan, professions.len(), modifiers)?;
    let mut cases = Vec::with_capacity(professions.len() * modifiers.len());
    for p in professions {
        let shares = factual_shares(p.f_score).map_err(|e| CorpusError::Config(e.to_string()))?;
        for (category, word) in modifiers.all() {
            cases.push(PromptCase {
                id: cases.len(),
                profession: p.clone(),
                modifier: word.to_string(),
                category,
                split: Split::Test,
                prompt: render_prompt(p, word),
                shares,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (ci, cat) in ModifierCategory::ALL.into_iter().enumerate() {
        let mut ids: Vec<usize> = cases
            .iter()
            .filter(|c| c.category == cat)
            .map(|c| c.id)
            .collect();
        ids.shuffle(&mut rng);
        let [train, dev, _] = counts[ci];
        for (k, id) in ids.into_iter().enumerate() {
            cases[id].split = if k < train {
                Split::Train
            } else if k < train + dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
    }
    Ok(Dataset { cases })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<PromptCase> {
        self.cases.iter().filter(|c| c.split == split).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// `[category][split]` case counts.
    pub fn count_table(&self) -> [[usize; 3]; 5] {
        let mut t = [[0; 3]; 5];
        for c in &self.cases {
            t[c.category.index()][c.split as usize] += 1;
        }
        t
    }

    /// The count table as aligned text with a Total row.
    pub fn format_count_table(&self) -> String {
        let t = self.count_table();
        let mut s = format!("{:<16} {:>6} {:>6} {:>6}\n", "Category", "Train", "Dev", "Test");
        let mut total = [0; 3];
        for cat in ModifierCategory::ALL {
            let row = t[cat.index()];
            for i in 0..3 {
                total[i] += row[i];
            }
            s.push_str(&format!(
                "{:<16} {:>6} {:>6} {:>6}\n",
                cat.name(),
                row[0],
                row[1],
                row[2]
            ));
        }
        s.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6}\n",
            "Total", total[0], total[1], total[2]
        ));
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            s.push_str(&c.to_json_line());
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut cases = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            cases.push(PromptCase::from_json_line(line).map_err(|e| match e {
                CorpusError::Format(m) => CorpusError::Format(format!("line {}: {m}", i + 1)),
                other => other,
            })?);
        }
        Ok(Dataset { cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn professions(n: usize) -> Vec<ProfessionRecord> {
        (0..n)
            .map(|i| ProfessionRecord::new(&format!("job{i}"), (i % 21) as f64 / 10.0 - 1.0, 0.0).unwrap())
            .collect()
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder([132, 66, 762], 96), [13, 7, 76]);
        assert_eq!(largest_remainder([132, 66, 762], 960), [132, 66, 762]);
        for total in 0..200 {
            assert_eq!(largest_remainder([85, 42, 513], total).iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn paper_plan_counts() {
        let d = generate_dataset(&professions(320), &ModifierSet::semantic(), SplitPlan::Paper, 0).unwrap();
        assert_eq!(d.len(), 4160);
        let t = d.count_table();
        assert_eq!(t[ModifierCategory::RobertaNeg.index()], [132, 66, 762]);
        assert_eq!(t[ModifierCategory::RandomPos.index()], [125, 62, 773]);
        let totals: Vec<usize> = (0..3).map(|s| t.iter().map(|r| r[s]).sum()).collect();
        assert_eq!(totals, vec![555, 277, 3328]);
        assert_eq!(t[ModifierCategory::RandomNeg.index()], [130, 66, 764]);

        let rows = generate_dataset(&professions(320), &ModifierSet::semantic(), SplitPlan::PaperRows, 0).unwrap();
        let t = rows.count_table();
        for cat in ModifierCategory::ALL {
            assert_eq!(t[cat.index()], cat.paper_counts());
        }
    }

    #[test]
    fn paper_plan_preconditions() {
        let m = ModifierSet::semantic();
        assert!(generate_dataset(&professions(32), &m, SplitPlan::Paper, 0).is_err());
        let t = ModifierSet::from_toml(super::super::modifiers::TABLE_MODIFIERS).unwrap();
        assert!(generate_dataset(&professions(320), &t, SplitPlan::Paper, 0).is_err());
        assert!(generate_dataset(&[], &m, SplitPlan::Proportional, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let d = generate_dataset(&professions(5), &ModifierSet::semantic(), SplitPlan::Proportional, 3).unwrap();
        assert_eq!(Dataset::from_jsonl(&d.to_jsonl()).unwrap(), d);
        assert!(Dataset::from_jsonl("{\"id\":1}").is_err());
    }
}

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::LocateError;
use crate::model::{Depth, ParameterAddress};

/// The five editing granularities, coarsest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Full,
    Layer,
    Module,
    Row,
    Neuron,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Full,
        Granularity::Layer,
        Granularity::Module,
        Granularity::Row,
        Granularity::Neuron,
    ];

    /// Address depth of mask entries at this level; `None` for full.
    pub fn depth(self) -> Option<Depth> {
        match self {
            Granularity::Full => None,
            Granularity::Layer => Some(Depth::Layer),
            Granularity::Module => Some(Depth::Module),
            Granularity::Row => Some(Depth::Row),
            Granularity::Neuron => Some(Depth::Neuron),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Full => "full",
            Granularity::Layer => "layer",
            Granularity::Module => "module",
            Granularity::Row => "row",
            Granularity::Neuron => "neuron",
        }
    }

    /// The level directly above, whose selection this one refines.
    pub fn parent(self) -> Option<Granularity> {
        match self {
            Granularity::Full | Granularity::Layer => None,
            Granularity::Module => Some(Granularity::Layer),
            Granularity::Row => Some(Granularity::Module),
            Granularity::Neuron => Some(Granularity::Row),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = LocateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| LocateError::Contract(format!("unknown granularity {s:?}")))
    }
}

/// The set of parameters an edit may touch. `Full` carries no addresses and
/// means every parameter of the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityMask {
    level: Granularity,
    addresses: BTreeSet<ParameterAddress>,
    /// Architecture hash of the model the mask was located on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_hash: Option<String>,
    /// Hash of the locator reports the mask was built from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl GranularityMask {
    pub fn full() -> Self {
        GranularityMask {
            level: Granularity::Full,
            addresses: BTreeSet::new(),
            arch_hash: None,
            provenance: None,
        }
    }

    pub fn new(
        level: Granularity,
        addresses: impl IntoIterator<Item = ParameterAddress>,
    ) -> Result<Self, LocateError> {
        let mask = GranularityMask {
            level,
            addresses: addresses.into_iter().collect(),
            arch_hash: None,
            provenance: None,
        };
        mask.validate()?;
        Ok(mask)
    }

    /// A mask with no entries; only useful for querying the model's
    /// parameter views, it cannot drive an edit.
    pub fn empty(level: Granularity) -> Self {
        GranularityMask {
            level,
            addresses: BTreeSet::new(),
            arch_hash: None,
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<(), LocateError> {
        match self.level.depth() {
            None => {
                if !self.addresses.is_empty() {
                    return Err(LocateError::Contract(
                        "a full mask carries no addresses".into(),
                    ));
                }
            }
            Some(depth) => {
                if self.addresses.is_empty() {
                    return Err(LocateError::Contract(format!(
                        "{} mask must not be empty",
                        self.level
                    )));
                }
                for a in &self.addresses {
                    let d = a.depth().map_err(|e| LocateError::Contract(e.to_string()))?;
                    if d != depth {
                        return Err(LocateError::Contract(format!(
                            "address {a} is not at {} depth",
                            self.level
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn level(&self) -> Granularity {
        self.level
    }

    pub fn is_full(&self) -> bool {
        self.level == Granularity::Full
    }

    pub fn addresses(&self) -> &BTreeSet<ParameterAddress> {
        &self.addresses
    }

    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    /// Checks that every entry lies inside an entry of `parent`, the mask
    /// one level up.
    pub fn check_nested_in(&self, parent: &GranularityMask) -> Result<(), LocateError> {
        if self.level.parent() != Some(parent.level) {
            return Err(LocateError::Contract(format!(
                "{} mask cannot nest in a {} mask",
                self.level, parent.level
            )));
        }
        for a in &self.addresses {
            let up = a.parent().expect("non-layer addresses have parents");
            if !parent.addresses.contains(&up) {
                return Err(LocateError::Nesting(format!(
                    "{a} lies outside the selected {} set",
                    parent.level
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LocateError> {
        let m: GranularityMask =
            serde_json::from_str(s).map_err(|e| LocateError::Format(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

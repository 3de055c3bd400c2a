//! Hierarchical parameter addresses: layer → module → row → neuron.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

/// The six editable sub-layer modules of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    QProj,
    KProj,
    VProj,
    OProj,
    FcIn,
    FcOut,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::QProj,
        ModuleKind::KProj,
        ModuleKind::VProj,
        ModuleKind::OProj,
        ModuleKind::FcIn,
        ModuleKind::FcOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::QProj => "attn.q_proj",
            ModuleKind::KProj => "attn.k_proj",
            ModuleKind::VProj => "attn.v_proj",
            ModuleKind::OProj => "attn.o_proj",
            ModuleKind::FcIn => "mlp.fc_in",
            ModuleKind::FcOut => "mlp.fc_out",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, ModuleKind::FcIn | ModuleKind::FcOut)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModuleKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ModelError::Address(format!("unknown module {s:?}")))
    }
}

/// Depth of an address in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Layer,
    Module,
    Row,
    Neuron,
}

/// Names a layer, a module inside it, a row of that module's weight, or a
/// single weight entry. Canonical text forms: `3`, `3.mlp.fc_out`,
/// `3.mlp.fc_out[12]`, `3.mlp.fc_out[12,7]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParameterAddress {
    pub layer: usize,
    pub module: Option<ModuleKind>,
    pub row: Option<usize>,
    pub column: Option<usize>,
}

impl ParameterAddress {
    pub fn layer(layer: usize) -> Self {
        ParameterAddress {
            layer,
            module: None,
            row: None,
            column: None,
        }
    }

    pub fn module(layer: usize, module: ModuleKind) -> Self {
        ParameterAddress {
            module: Some(module),
            ..Self::layer(layer)
        }
    }

    pub fn row(layer: usize, module: ModuleKind, row: usize) -> Self {
        ParameterAddress {
            row: Some(row),
            ..Self::module(layer, module)
        }
    }

    pub fn neuron(layer: usize, module: ModuleKind, row: usize, column: usize) -> Self {
        ParameterAddress {
            column: Some(column),
            ..Self::row(layer, module, row)
        }
    }

    /// Fails when the nesting rule column ⇒ row ⇒ module is broken.
    pub fn depth(&self) -> Result<Depth, ModelError> {
        match (self.module, self.row, self.column) {
            (None, None, None) => Ok(Depth::Layer),
            (Some(_), None, None) => Ok(Depth::Module),
            (Some(_), Some(_), None) => Ok(Depth::Row),
            (Some(_), Some(_), Some(_)) => Ok(Depth::Neuron),
            _ => Err(ModelError::Address(format!(
                "address {self:?} breaks the layer/module/row/column nesting"
            ))),
        }
    }

    /// The enclosing address one level up, if any.
    pub fn parent(&self) -> Option<ParameterAddress> {
        if self.column.is_some() {
            Some(ParameterAddress {
                column: None,
                ..*self
            })
        } else if self.row.is_some() {
            Some(ParameterAddress { row: None, ..*self })
        } else if self.module.is_some() {
            Some(ParameterAddress::layer(self.layer))
        } else {
            None
        }
    }

    /// True when `other` lies inside (or equals) `self`.
    pub fn contains(&self, other: &ParameterAddress) -> bool {
        self.layer == other.layer
            && (self.module.is_none() || self.module == other.module)
            && (self.row.is_none() || self.row == other.row)
            && (self.column.is_none() || self.column == other.column)
    }
}

impl fmt::Display for ParameterAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.layer)?;
        if let Some(m) = self.module {
            write!(f, ".{m}")?;
        }
        match (self.row, self.column) {
            (Some(r), Some(c)) => write!(f, "[{r},{c}]"),
            (Some(r), None) => write!(f, "[{r}]"),
            _ => Ok(()),
        }
    }
}

impl FromStr for ParameterAddress {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::Address(format!("malformed address {s:?}"));
        let (head, index) = match s.find('[') {
            Some(i) => {
                let inner = s[i + 1..].strip_suffix(']').ok_or_else(bad)?;
                (&s[..i], Some(inner))
            }
            None => (s, None),
        };
        let (layer, module) = match head.split_once('.') {
            Some((l, m)) => (l, Some(m.parse::<ModuleKind>()?)),
            None => (head, None),
        };
        let layer = layer.parse::<usize>().map_err(|_| bad())?;
        let mut addr = ParameterAddress {
            layer,
            module,
            row: None,
            column: None,
        };
        if let Some(inner) = index {
            if module.is_none() {
                return Err(bad());
            }
            let mut parts = inner.split(',');
            addr.row = Some(parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?);
            if let Some(c) = parts.next() {
                addr.column = Some(c.trim().parse().map_err(|_| bad())?);
            }
            if parts.next().is_some() {
                return Err(bad());
            }
        }
        Ok(addr)
    }
}

impl Serialize for ModuleKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModuleKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for ParameterAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParameterAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_strings() {
        assert_eq!(ParameterAddress::layer(3).to_string(), "3");
        assert_eq!(
            ParameterAddress::module(3, ModuleKind::FcOut).to_string(),
            "3.mlp.fc_out"
        );
        assert_eq!(
            ParameterAddress::neuron(0, ModuleKind::FcOut, 3, 7).to_string(),
            "0.mlp.fc_out[3,7]"
        );
        assert!("3.mlp.bogus".parse::<ParameterAddress>().is_err());
        assert!("3[1]".parse::<ParameterAddress>().is_err());
        assert!("x".parse::<ParameterAddress>().is_err());
    }

    #[test]
    fn nesting() {
        let n = ParameterAddress::neuron(1, ModuleKind::QProj, 2, 3);
        assert_eq!(n.depth().unwrap(), Depth::Neuron);
        let r = n.parent().unwrap();
        assert_eq!(r, ParameterAddress::row(1, ModuleKind::QProj, 2));
        assert!(ParameterAddress::layer(1).contains(&n));
        assert!(r.contains(&n));
        assert!(!ParameterAddress::layer(0).contains(&n));
        let broken = ParameterAddress {
            layer: 0,
            module: None,
            row: Some(1),
            column: None,
        };
        assert!(broken.depth().is_err());
    }

    fn arb_address() -> impl Strategy<Value = ParameterAddress> {
        (0usize..8, proptest::option::of(0usize..6), 0usize..300, 0usize..300, 0u8..3).prop_map(
            |(l, m, r, c, depth)| match m {
                None => ParameterAddress::layer(l),
                Some(m) => {
                    let m = ModuleKind::ALL[m];
                    match depth {
                        0 => ParameterAddress::module(l, m),
                        1 => ParameterAddress::row(l, m, r),
                        _ => ParameterAddress::neuron(l, m, r, c),
                    }
                }
            },
        )
    }

    proptest! {
        #[test]
        fn text_form_round_trips(a in arb_address()) {
            let s = a.to_string();
            prop_assert_eq!(s.parse::<ParameterAddress>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            prop_assert_eq!(serde_json::from_str::<ParameterAddress>(&json).unwrap(), a);
        }
    }
}

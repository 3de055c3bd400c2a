//! Word-level tokenizer over code-like text.
//!
//! Pre-tokenization splits text into alphanumeric words, operators and
//! punctuation, and whitespace runs. A single space directly before a word or
//! symbol is folded into that piece (`" nurse"`), any other whitespace run is
//! its own piece (`"\n    "`). Decoding is plain concatenation, so
//! `decode(encode(s)) == s` for every in-vocabulary `s`.

use std::collections::{BTreeSet, HashMap};

use super::ModelError;

pub const UNK: &str = "<unk>";
pub const HE: &str = "he";
pub const SHE: &str = "she";

const OPERATORS: [&str; 8] = ["==", "!=", "<=", ">=", "+=", "-=", "->", "**"];

/// Splits `text` into pieces; see the module docs for the rules.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = text[i..].chars().next().expect("in bounds");
        if c.is_whitespace() {
            let mut j = i;
            while j < bytes.len() {
                let cj = text[j..].chars().next().expect("in bounds");
                if !cj.is_whitespace() {
                    break;
                }
                j += cj.len_utf8();
            }
            if j - i == 1 && bytes[i] == b' ' && j < bytes.len() {
                // fold the single space into the following piece
                i = j;
                let end = piece_end(text, i);
                pieces.push(&text[start..end]);
                i = end;
            } else {
                pieces.push(&text[start..j]);
                i = j;
            }
            continue;
        }
        let end = piece_end(text, i);
        pieces.push(&text[start..end]);
        i = end;
    }
    pieces
}

fn piece_end(text: &str, i: usize) -> usize {
    let rest = &text[i..];
    let c = rest.chars().next().expect("in bounds");
    if c.is_ascii_alphanumeric() {
        i + rest
            .find(|ch: char| !ch.is_ascii_alphanumeric())
            .unwrap_or(rest.len())
    } else if let Some(op) = OPERATORS.iter().find(|op| rest.starts_with(**op)) {
        i + op.len()
    } else {
        i + c.len_utf8()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Reserved tokens always come first, in this order.
    pub const RESERVED: [&'static str; 3] = [UNK, HE, SHE];

    pub fn from_pieces(pieces: Vec<String>) -> Result<Self, ModelError> {
        for (i, r) in Self::RESERVED.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*r) {
                return Err(ModelError::Format(format!(
                    "vocabulary must start with the reserved tokens {:?}",
                    Self::RESERVED
                )));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(ModelError::Format(format!("duplicate vocabulary entry {p:?}")));
            }
        }
        Ok(Tokenizer { pieces, index })
    }

    /// Builds a vocabulary from every piece occurring in `texts`, sorted
    /// after the reserved tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for p in pre_tokenize(t) {
                set.insert(p);
            }
        }
        let mut pieces: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(
            set.into_iter()
                .filter(|p| !Self::RESERVED.contains(p))
                .map(str::to_string),
        );
        Self::from_pieces(pieces).expect("built vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn he(&self) -> u32 {
        1
    }

    pub fn she(&self) -> u32 {
        2
    }

    /// Strict encoding: any out-of-vocabulary piece is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        pre_tokenize(text)
            .into_iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| ModelError::Tokenize(format!("piece {p:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Encoding that maps unknown pieces to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .into_iter()
            .map(|p| self.id(p).unwrap_or(0))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.pieces.get(i as usize).map(String::as_str).unwrap_or(UNK))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.pieces).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let pieces: Vec<String> =
            serde_json::from_str(s).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_pieces(pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pieces_of_code_line() {
        let p = pre_tokenize("    return [nurse for nurse in nurses if nurse.x == \"");
        assert_eq!(
            p,
            vec![
                "    ", "return", " [", "nurse", " for", " nurse", " in", " nurses", " if",
                " nurse", ".", "x", " ==", " \""
            ]
        );
        assert_eq!(
            pre_tokenize("def find_best_nurses(nurses, personal_pronoun):\n"),
            vec![
                "def", " find", "_", "best", "_", "nurses", "(", "nurses", ",", " personal", "_",
                "pronoun", ")", ":", "\n"
            ]
        );
    }

    #[test]
    fn he_and_she_are_single_distinct_tokens() {
        let tok = Tokenizer::build(["x == \"he\"", "x == \"she\""]);
        assert_eq!(tok.encode("he").unwrap(), vec![tok.he()]);
        assert_eq!(tok.encode("she").unwrap(), vec![tok.she()]);
        assert_ne!(tok.he(), tok.she());
        assert_eq!(tok.encode("\"he").unwrap().len(), 2);
    }

    #[test]
    fn unknown_pieces() {
        let tok = Tokenizer::build(["a b"]);
        assert!(tok.encode("a zebra").is_err());
        assert_eq!(tok.encode_lossy("a zebra"), vec![tok.id("a").unwrap(), 0]);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let tok = Tokenizer::build(["def f(x):\n    return x"]);
        let back = Tokenizer::from_json(&tok.to_json()).unwrap();
        assert_eq!(back.pieces(), tok.pieces());
        assert!(Tokenizer::from_pieces(vec!["x".into()]).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "[a-z_ (),.:=\"\n]{0,60}") {
            let tok = Tokenizer::build([s.as_str()]);
            let ids = tok.encode(&s).unwrap();
            prop_assert_eq!(tok.decode(&ids), s);
        }
    }
}

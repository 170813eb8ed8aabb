//! Word-level tokenizer with reserved specials for document separators and
//! aspect tags.
//!
//! Text is lowercased and split into runs of letters/digits, single
//! punctuation characters and literal special strings (`<population>`,
//! `<doc>`, ...). Specials occupy the fixed indices `0..=12`:
//!
//! | id | token |
//! |----|-------|
//! | 0 | `<pad>` |
//! | 1 | `<bos>` |
//! | 2 | `<eos>` |
//! | 3 | `<unk>` |
//! | 4 | `<doc>` |
//! | 5, 6 | `<population>`, `</population>` |
//! | 7, 8 | `<interventions>`, `</interventions>` |
//! | 9, 10 | `<outcomes>`, `</outcomes>` |
//! | 11, 12 | `<punchline>`, `</punchline>` |

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::aspect::{Aspect, NUM_ASPECTS};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const DOC_SEP: TokenId = 4;
pub const NUM_SPECIALS: usize = 5 + 2 * NUM_ASPECTS;

const SPECIAL_STRINGS: [&str; NUM_SPECIALS] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<doc>",
    "<population>",
    "</population>",
    "<interventions>",
    "</interventions>",
    "<outcomes>",
    "</outcomes>",
    "<punchline>",
    "</punchline>",
];

pub fn open_tag(aspect: Aspect) -> TokenId {
    5 + 2 * aspect.index() as TokenId
}

pub fn close_tag(aspect: Aspect) -> TokenId {
    open_tag(aspect) + 1
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Which aspect a tag token opens or closes, if it is a tag.
pub fn tag_aspect(id: TokenId) -> Option<(Aspect, bool)> {
    if !(5..NUM_SPECIALS as TokenId).contains(&id) {
        return None;
    }
    let offset = (id - 5) as usize;
    Aspect::from_index(offset / 2).map(|a| (a, offset % 2 == 0))
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} is out of range for a vocabulary of {size}")]
    OutOfRange { id: TokenId, size: usize },
    #[error("serialized vocabulary is invalid: {0}")]
    Invalid(String),
}

fn splitter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"</?(?:population|interventions|outcomes|punchline)>|<(?:pad|bos|eos|unk|doc)>|[\p{L}\p{N}]+|[^\s\p{L}\p{N}]",
        )
        .expect("static regex")
    })
}

/// Lowercased token strings of `text`.
pub fn split(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    splitter()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Lowercased tokens of `text` with special and tag strings removed.
pub fn content_words(text: &str) -> Vec<String> {
    split(text)
        .into_iter()
        .filter(|t| !(t.len() > 1 && t.starts_with('<')))
        .collect()
}

/// Canonical form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split(text).join(" ")
}

/// Token <-> id bijection; immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, TokenizerError> {
        Self::build_with_min_freq(corpus, 1)
    }

    pub fn build_with_min_freq<S: AsRef<str>>(
        corpus: &[S],
        min_freq: usize,
    ) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in split(text.as_ref()) {
                if !SPECIAL_STRINGS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let tokens = SPECIAL_STRINGS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < NUM_SPECIALS {
            return Err(TokenizerError::Invalid("missing reserved specials".into()));
        }
        for (i, s) in SPECIAL_STRINGS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(TokenizerError::Invalid(format!(
                    "index {i} must hold `{s}`, found `{}`",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::Invalid(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::OutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let parts = ids
            .iter()
            .map(|&id| self.token(id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.join(" "))
    }

    /// Decodes, dropping every special token.
    pub fn decode_plain(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let content: Vec<TokenId> = ids.iter().copied().filter(|&id| !is_special(id)).collect();
        self.decode(&content)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("string list serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> =
            serde_json::from_str(json).map_err(|e| TokenizerError::Invalid(e.to_string()))?;
        Self::from_tokens(tokens)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(deserializer)?;
        Vocabulary::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::build(&["x"]).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<doc>"), Some(DOC_SEP));
        for a in Aspect::ALL {
            assert_eq!(v.id(a.open_tag()), Some(open_tag(a)));
            assert_eq!(v.id(a.close_tag()), Some(close_tag(a)));
            assert_eq!(tag_aspect(open_tag(a)), Some((a, true)));
            assert_eq!(tag_aspect(close_tag(a)), Some((a, false)));
        }
        assert_eq!(open_tag(Aspect::Punchline), 11);
        assert_eq!(close_tag(Aspect::Punchline), 12);
        assert_eq!(tag_aspect(DOC_SEP), None);
        assert_eq!(tag_aspect(13), None);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = Vocabulary::build(&["a b", "a"]).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS + 2);
        assert_eq!(v.id("a"), Some(NUM_SPECIALS as TokenId));
        assert_eq!(v.id("b"), Some(NUM_SPECIALS as TokenId + 1));

        let v = Vocabulary::build(&["zeta alpha", "beta"]).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], ["alpha", "beta", "zeta"]);
    }

    #[test]
    fn min_frequency_filters() {
        let v = Vocabulary::build_with_min_freq(&["a a b"], 2).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIALS..], ["a"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert_eq!(Vocabulary::build(&empty), Err(TokenizerError::EmptyCorpus));
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = Vocabulary::build(&["statins reduce stroke"]).unwrap();
        assert_eq!(v.encode("statins prevent"), vec![v.id("statins").unwrap(), UNK]);
    }

    #[test]
    fn punctuation_and_tags_split() {
        assert_eq!(
            split("<Population>Adults, aged 40+</population>."),
            vec!["<population>", "adults", ",", "aged", "40", "+", "</population>", "."]
        );
        let v = Vocabulary::build(&["adults"]).unwrap();
        let ids = v.encode("<population> adults </population> <doc>");
        assert_eq!(
            ids,
            vec![open_tag(Aspect::Population), v.id("adults").unwrap(), close_tag(Aspect::Population), DOC_SEP]
        );
        assert_eq!(v.decode(&ids).unwrap(), "<population> adults </population> <doc>");
        assert_eq!(v.decode_plain(&ids).unwrap(), "adults");
    }

    #[test]
    fn decode_out_of_range_fails() {
        let v = Vocabulary::build(&["a"]).unwrap();
        assert_eq!(
            v.decode(&[1, 99]),
            Err(TokenizerError::OutOfRange { id: 99, size: NUM_SPECIALS + 1 })
        );
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = Vocabulary::build(&["b a a"]).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_json(r#"["<pad>"]"#).is_err());
        let mut toks = v.tokens().to_vec();
        toks.push("a".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_over_closed_language(words in proptest::collection::vec("[a-z]{1,6}|[.,;]", 1..20)) {
            let text = words.join(" ");
            let v = Vocabulary::build(&[text.as_str()]).unwrap();
            let norm = normalize(&text);
            prop_assert_eq!(v.decode(&v.encode(&norm)).unwrap(), norm);
        }

        #[test]
        fn specials_stable_for_any_corpus(text in "[a-zA-Z ,.]{1,60}") {
            let v = Vocabulary::build(&[text.as_str()]).unwrap();
            for (i, s) in SPECIAL_STRINGS.iter().enumerate() {
                prop_assert_eq!(v.id(s), Some(i as TokenId));
            }
        }
    }
}

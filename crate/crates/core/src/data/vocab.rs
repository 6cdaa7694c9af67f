use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const IMG: &str = "<img>";
pub const RET: &str = "[RET]";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Word-level vocabulary.
///
/// Layout: `PAD, BOS, EOS, UNK, IMG`, then corpus words ordered by
/// (count desc, token asc), then `RET` as the largest id. Everything below the
/// RET id is the "base" vocabulary owned by the frozen decoder; the RET row
/// belongs to the trainable bridge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const IMG: u32 = 4;

    /// Builds a vocabulary from the ordered list of base words (no specials).
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK, IMG].iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        tokens.push(RET.to_owned());
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Size of the vocabulary without the RET token.
    pub fn base_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn ret(&self) -> u32 {
        (self.tokens.len() - 1) as u32
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id <= Self::IMG || id == self.ret()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `BOS words EOS [RET]`, unknown words mapped to UNK.
    pub fn tokenize(&self, text: &str, append_ret: bool) -> TokenSequence {
        let mut ids = vec![Self::BOS];
        ids.extend(
            normalize_words(text)
                .iter()
                .map(|w| self.id(w).filter(|&i| !self.is_special(i)).unwrap_or(Self::UNK)),
        );
        ids.push(Self::EOS);
        if append_ret {
            ids.push(self.ret());
        }
        TokenSequence { ids }
    }

    /// Joins the non-special tokens with single spaces. UNK renders as `<unk>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i == Self::UNK || !self.is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids for one decoder input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, context_len: usize) -> Result<()> {
        if let Some(bad) = self.ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        if self.ids.len() > context_len {
            return Err(Error::ContextOverflow {
                len: self.ids.len(),
                context: context_len,
            });
        }
        Ok(())
    }
}

pub fn build_vocabulary(manifest: &DatasetManifest, min_count: usize) -> Result<Vocabulary> {
    build_from_captions(manifest.records.iter().flat_map(|r| r.captions.iter()), min_count)
}

pub(crate) fn build_from_captions<'a, I>(captions: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_captions = 0usize;
    for c in captions {
        n_captions += 1;
        for w in normalize_words(c) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if n_captions == 0 {
        return Err(Error::InvalidArgument("empty caption corpus".into()));
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count.max(1)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_words(words.into_iter().map(|(w, _)| w)))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn corpus(captions: &[&str], min_count: usize) -> Result<Vocabulary> {
        let owned: Vec<String> = captions.iter().map(|s| s.to_string()).collect();
        build_from_captions(owned.iter(), min_count)
    }

    #[test]
    fn sizes_by_min_count() {
        assert_eq!(corpus(&["a a b"], 1).unwrap().len(), 8);
        assert_eq!(corpus(&["a a b"], 2).unwrap().len(), 7);
        assert!(corpus(&[], 1).is_err());
    }

    #[test]
    fn specials_are_distinct_and_ret_is_last() {
        let v = corpus(&["b a a c"], 1).unwrap();
        let specials = [
            Vocabulary::PAD,
            Vocabulary::BOS,
            Vocabulary::EOS,
            Vocabulary::UNK,
            Vocabulary::IMG,
            v.ret(),
        ];
        let unique: std::collections::HashSet<_> = specials.iter().collect();
        assert_eq!(unique.len(), 6);
        assert_eq!(v.ret() as usize, v.len() - 1);
        // count desc, then token asc
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.id("c"), Some(7));
    }

    #[test]
    fn tokenize_cases() {
        let v = corpus(&["a a b"], 1).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(v.tokenize("", false).ids, vec![Vocabulary::BOS, Vocabulary::EOS]);
        assert_eq!(
            v.tokenize("a b", true).ids,
            vec![Vocabulary::BOS, a, b, Vocabulary::EOS, v.ret()]
        );
        assert_eq!(
            v.tokenize("a zzz", false).ids,
            vec![Vocabulary::BOS, a, Vocabulary::UNK, Vocabulary::EOS]
        );
        // special strings in text are not treated as specials
        assert_eq!(v.tokenize("[RET]", false).ids[1], Vocabulary::UNK);
    }

    #[test]
    fn json_round_trip() {
        let v = corpus(&["x y z y"], 1).unwrap();
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn sequence_validation() {
        let s = TokenSequence::new(vec![1, 2, 9]);
        assert!(s.validate(9, 10).is_err());
        assert!(matches!(s.validate(10, 2), Err(Error::ContextOverflow { .. })));
        assert!(s.validate(10, 3).is_ok());
    }

    const WORDS: &[&str] = &["water", "forest", "two", "red", "objects", "the", "scene"];

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(
            picks in proptest::collection::vec((0..WORDS.len(), any::<bool>(), 0..4usize), 0..12)
        ) {
            let vocab = corpus(&[&WORDS.join(" ")], 1).unwrap();
            let text: String = picks
                .iter()
                .map(|&(i, upper, punct)| {
                    let w = if upper { WORDS[i].to_uppercase() } else { WORDS[i].to_owned() };
                    format!("{w}{}", [" ", ", ", ". ", "! "][punct])
                })
                .collect();
            let normalized = normalize_words(&text).join(" ");
            prop_assert_eq!(vocab.detokenize(&vocab.tokenize(&text, false).ids), normalized);
        }

        #[test]
        fn vocabulary_is_deterministic(seed_words in proptest::collection::vec(0..WORDS.len(), 1..30)) {
            let text = seed_words.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
            let a = corpus(&[&text], 1).unwrap();
            let b = corpus(&[&text], 1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

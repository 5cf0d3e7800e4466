//! Phonetic tokens, table-driven lexica, and the shared token vocabulary.
//!
//! Articulatory units are kept apart from suprasegmental modifiers (length,
//! aspiration, tone digits) and from stress marks, all in one embedding space.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_TOKEN: &str = "<P>";
pub const FILLER_TOKEN: &str = "<F>";
pub const EOS_PERIOD: &str = ".";
pub const EOS_SPACE: &str = " ";
/// Word boundary emitted between lexicon entries.
pub const WORD_BOUNDARY: &str = "|";

pub const PROMPT_ID: usize = 0;
pub const FILLER_ID: usize = 1;
pub const EOS_PERIOD_ID: usize = 2;
pub const EOS_SPACE_ID: usize = 3;
pub const RESERVED_COUNT: usize = 4;

const MODIFIER_CHARS: &[char] = &[
    'ː', 'ʰ', 'ˑ', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9',
];
const STRESS_CHARS: &[char] = &['ˈ', 'ˌ'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Articulatory,
    Modifier,
    Stress,
    Punctuation,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhoneticToken {
    #[serde(rename = "unit")]
    pub text: String,
    pub kind: TokenKind,
}

impl PhoneticToken {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Self {
        Self {
            text: text.into(),
            kind,
        }
    }

    fn check(&self) -> Result<()> {
        let has_mod = self.text.chars().any(|c| MODIFIER_CHARS.contains(&c));
        let has_stress = self.text.chars().any(|c| STRESS_CHARS.contains(&c));
        let ok = match self.kind {
            TokenKind::Articulatory => !has_mod && !has_stress && !self.text.is_empty(),
            TokenKind::Modifier => has_mod && !has_stress && self.text.chars().count() == 1,
            TokenKind::Stress => has_stress && self.text.chars().count() == 1,
            TokenKind::Punctuation | TokenKind::Special => !self.text.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "unit {:?} inconsistent with kind {:?}",
                self.text, self.kind
            )))
        }
    }
}

/// Closed-vocabulary pronunciation table for one toy language. Entries may
/// span several words ("see you").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<PhoneticToken>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<PhoneticToken>>) -> Result<Self> {
        for (word, units) in &entries {
            if word.trim().is_empty() || units.is_empty() {
                return Err(Error::Format(format!("empty lexicon entry {word:?}")));
            }
            for u in units {
                u.check()?;
                if matches!(u.kind, TokenKind::Special) {
                    return Err(Error::Format(format!("reserved kind in entry {word:?}")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, Vec<PhoneticToken>> = serde_json::from_str(text)?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word) || self.entries.contains_key(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every distinct unit in the table, plus the word boundary.
    pub fn inventory(&self) -> BTreeSet<PhoneticToken> {
        let mut inv: BTreeSet<PhoneticToken> = self.entries.values().flatten().cloned().collect();
        inv.insert(PhoneticToken::new(WORD_BOUNDARY, TokenKind::Punctuation));
        inv
    }

    /// Number of words in `text` matched by the same greedy phrase lookup
    /// that `tokenize` uses; unmatched words are skipped.
    pub fn coverage(&self, text: &str) -> usize {
        let words: Vec<&str> = text.split_whitespace().collect();
        let longest = self.max_phrase_words();
        let (mut i, mut covered) = (0, 0);
        while i < words.len() {
            let hit = (1..=longest.min(words.len() - i))
                .rev()
                .find(|&n| self.lookup(&words[i..i + n].join(" ")).is_some());
            match hit {
                Some(n) => {
                    covered += n;
                    i += n;
                }
                None => i += 1,
            }
        }
        covered
    }

    fn lookup(&self, phrase: &str) -> Option<&Vec<PhoneticToken>> {
        self.entries
            .get(phrase)
            .or_else(|| self.entries.get(&phrase.to_lowercase()))
    }

    fn max_phrase_words(&self) -> usize {
        self.entries
            .keys()
            .map(|k| k.split_whitespace().count())
            .max()
            .unwrap_or(1)
    }
}

/// Greedy longest-phrase lookup over whitespace-separated words.
pub fn tokenize(lexicon: &Lexicon, text: &str) -> Result<Vec<PhoneticToken>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let longest = lexicon.max_phrase_words();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut matched = None;
        for n in (1..=longest.min(words.len() - i)).rev() {
            let phrase = words[i..i + n].join(" ");
            if let Some(units) = lexicon.lookup(&phrase) {
                matched = Some((n, units));
                break;
            }
        }
        let (n, units) = matched.ok_or_else(|| Error::UnknownWord(words[i].to_string()))?;
        if !out.is_empty() {
            out.push(PhoneticToken::new(WORD_BOUNDARY, TokenKind::Punctuation));
        }
        out.extend(units.iter().cloned());
        i += n;
    }
    Ok(out)
}

/// Reserved entries first (`<P>`, `<F>`, `.`, ` `), then every lexicon unit
/// in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<PhoneticToken>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_lexica<'a>(lexica: impl IntoIterator<Item = &'a Lexicon>) -> Result<Self> {
        let mut units = BTreeSet::new();
        for lex in lexica {
            units.extend(lex.inventory());
        }
        let mut tokens = reserved_tokens();
        tokens.extend(units);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<PhoneticToken>) -> Result<Self> {
        if tokens.len() < RESERVED_COUNT || tokens[..RESERVED_COUNT] != reserved_tokens()[..] {
            return Err(Error::Format(
                "vocabulary must start with the reserved entries".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.text.clone(), i).is_some() {
                return Err(Error::Format(format!(
                    "duplicate vocabulary entry {:?}",
                    t.text
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[PhoneticToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, text: &str) -> Result<usize> {
        self.index
            .get(text)
            .copied()
            .ok_or_else(|| Error::UnknownToken(text.to_string()))
    }

    pub fn encode(&self, tokens: &[PhoneticToken]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(&t.text)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<PhoneticToken>> {
        ids.iter()
            .map(|&i| self.tokens.get(i).cloned().ok_or(Error::UnknownId(i)))
            .collect()
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED_COUNT
    }
}

fn reserved_tokens() -> Vec<PhoneticToken> {
    vec![
        PhoneticToken::new(PROMPT_TOKEN, TokenKind::Special),
        PhoneticToken::new(FILLER_TOKEN, TokenKind::Special),
        PhoneticToken::new(EOS_PERIOD, TokenKind::Special),
        PhoneticToken::new(EOS_SPACE, TokenKind::Special),
    ]
}

/// The toy lexica shipped with the crate, as `(code, lexicon)` pairs.
pub fn builtin_lexica() -> Vec<(String, Lexicon)> {
    [
        ("toyA", include_str!("../lexica/toyA.json")),
        ("toyB", include_str!("../lexica/toyB.json")),
        ("toyZh", include_str!("../lexica/toyZh.json")),
    ]
    .into_iter()
    .map(|(c, j)| {
        (
            c.to_string(),
            Lexicon::from_json(j).expect("builtin lexicon parses"),
        )
    })
    .collect()
}

pub fn builtin_lexicon(code: &str) -> Result<Lexicon> {
    builtin_lexica()
        .into_iter()
        .find(|(c, _)| c == code)
        .map(|(_, l)| l)
        .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[PhoneticToken]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn english_fixture() {
        let lex = builtin_lexicon("toyA").unwrap();
        let toks = tokenize(&lex, "See you").unwrap();
        assert_eq!(texts(&toks), ["s", "ˈ", "i", "ː", "j", "u", "ː"]);
        assert_eq!(toks[1].kind, TokenKind::Stress);
        assert_eq!(toks[3].kind, TokenKind::Modifier);
        let go = tokenize(&lex, "Go far").unwrap();
        assert_eq!(texts(&go), ["g", "oʊ", "f", "ˈ", "ɑ", "ː", "ɹ"]);
    }

    #[test]
    fn greek_stress_pair() {
        let lex = builtin_lexicon("toyB").unwrap();
        let a = tokenize(&lex, "πότε").unwrap();
        let b = tokenize(&lex, "ποτέ").unwrap();
        assert_eq!(texts(&a), ["p", "ˈ", "o", "t", "e"]);
        assert_eq!(texts(&b), ["p", "o", "t", "e", "ˈ"]);
        assert_ne!(a, b);
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn boundaries_and_errors() {
        let lex = builtin_lexicon("toyA").unwrap();
        assert!(tokenize(&lex, "").unwrap().is_empty());
        let t = tokenize(&lex, "tea net").unwrap();
        assert_eq!(texts(&t), ["t", "ˈ", "i", "ː", "|", "n", "ˈ", "e", "t"]);
        match tokenize(&lex, "tea banana") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "banana"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tone_digits_are_modifiers() {
        let lex = builtin_lexicon("toyZh").unwrap();
        let t = tokenize(&lex, "ni3 hao3").unwrap();
        assert_eq!(texts(&t), ["ni", "3", "|", "hao", "3"]);
        assert_eq!(t[1].kind, TokenKind::Modifier);
    }

    #[test]
    fn articulatory_units_never_carry_modifiers() {
        for (_, lex) in builtin_lexica() {
            for tok in lex.inventory() {
                if tok.kind == TokenKind::Articulatory {
                    assert!(!tok
                        .text
                        .chars()
                        .any(|c| MODIFIER_CHARS.contains(&c) || STRESS_CHARS.contains(&c)));
                }
            }
        }
    }

    #[test]
    fn rejects_fused_units() {
        let bad = r#"{"tea": [{"unit": "iː", "kind": "articulatory"}]}"#;
        assert!(Lexicon::from_json(bad).is_err());
    }

    #[test]
    fn vocabulary_round_trip_and_injective() {
        let lexica: Vec<Lexicon> = builtin_lexica().into_iter().map(|(_, l)| l).collect();
        let vocab = Vocabulary::from_lexica(&lexica).unwrap();
        let mut seen = BTreeMap::new();
        for lex in &lexica {
            for w in lex.words() {
                let toks = tokenize(lex, w).unwrap();
                let ids = vocab.encode(&toks).unwrap();
                assert!(ids.iter().all(|&i| !Vocabulary::is_reserved(i)));
                assert_eq!(vocab.decode(&ids).unwrap(), toks);
                for (t, i) in toks.iter().zip(&ids) {
                    if let Some(prev) = seen.insert(*i, t.text.clone()) {
                        assert_eq!(prev, t.text, "id {i} shared");
                    }
                }
            }
        }
        assert!(vocab.decode(&[vocab.len()]).is_err());
        assert!(vocab.id("zzz").is_err());
        assert_eq!(vocab.id(PROMPT_TOKEN).unwrap(), PROMPT_ID);
        assert_eq!(vocab.id(EOS_SPACE).unwrap(), EOS_SPACE_ID);
    }

    #[test]
    fn vocabulary_serde_rebuilds_index() {
        let vocab = Vocabulary::from_lexica([&builtin_lexicon("toyA").unwrap()]).unwrap();
        let json = serde_json::to_string(vocab.tokens()).unwrap();
        let tokens: Vec<PhoneticToken> = serde_json::from_str(&json).unwrap();
        let back = Vocabulary::from_tokens(tokens).unwrap();
        assert_eq!(back, vocab);
    }
}

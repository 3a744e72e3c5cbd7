//! Sentence splitting, polarity-sentence selection and keyword extraction.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("reading word list {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid word list: {0}")]
    Invalid(String),
}

/// Abbreviations whose trailing period does not end a sentence.
const ABBREVIATIONS: &[&str] = &["mr.", "mrs.", "ms.", "dr.", "vs.", "e.g.", "i.e.", "etc.", "st.", "jr.", "sr."];

pub const DEFAULT_MAX_KEYWORDS: usize = 12;

const DEFAULT_DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "no",
];
const DEFAULT_CONJUNCTIONS: &[&str] = &["and", "or", "but", "nor", "so", "yet", "for"];

fn is_punct(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Removes leading and trailing Unicode punctuation.
pub fn strip_punctuation(token: &str) -> &str {
    token.trim_matches(is_punct)
}

/// Parses a word list: one entry per line, `#` starts a comment line, blank
/// lines are ignored, entries are lowercased.
pub fn parse_word_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

fn read_word_list(path: &Path) -> Result<BTreeSet<String>, ExtractionError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExtractionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_word_list(&text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopLists {
    pub determiners: BTreeSet<String>,
    pub conjunctions: BTreeSet<String>,
}

impl Default for StopLists {
    fn default() -> Self {
        let set = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        Self {
            determiners: set(DEFAULT_DETERMINERS),
            conjunctions: set(DEFAULT_CONJUNCTIONS),
        }
    }
}

impl StopLists {
    pub fn new(determiners: BTreeSet<String>, conjunctions: BTreeSet<String>) -> Result<Self, ExtractionError> {
        let s = Self {
            determiners,
            conjunctions,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_files(determiners: &Path, conjunctions: &Path) -> Result<Self, ExtractionError> {
        Self::new(read_word_list(determiners)?, read_word_list(conjunctions)?)
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if let Some(w) = self.determiners.iter().chain(&self.conjunctions).find(|w| w.to_lowercase() != **w) {
            return Err(ExtractionError::Invalid(format!("stop word `{w}` is not lowercase")));
        }
        if let Some(w) = self.determiners.intersection(&self.conjunctions).next() {
            return Err(ExtractionError::Invalid(format!("`{w}` is both a determiner and a conjunction")));
        }
        Ok(())
    }

    pub fn contains(&self, lowercase: &str) -> bool {
        self.determiners.contains(lowercase) || self.conjunctions.contains(lowercase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolarityLexicon {
    pub positive_words: BTreeSet<String>,
    pub negative_words: BTreeSet<String>,
}

impl PolarityLexicon {
    pub fn new(positive_words: BTreeSet<String>, negative_words: BTreeSet<String>) -> Result<Self, ExtractionError> {
        if positive_words.is_empty() || negative_words.is_empty() {
            return Err(ExtractionError::Invalid("polarity word lists must be non-empty".into()));
        }
        if let Some(w) = positive_words.intersection(&negative_words).next() {
            return Err(ExtractionError::Invalid(format!("`{w}` is listed as both positive and negative")));
        }
        Ok(Self {
            positive_words,
            negative_words,
        })
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::new(
            parse_word_list(include_str!("../data/positive_words.txt")),
            parse_word_list(include_str!("../data/negative_words.txt")),
        )
        .expect("bundled lexicon is valid")
    }

    pub fn from_files(positive: &Path, negative: &Path) -> Result<Self, ExtractionError> {
        Self::new(read_word_list(positive)?, read_word_list(negative)?)
    }

    pub fn contains(&self, lowercase: &str) -> bool {
        self.positive_words.contains(lowercase) || self.negative_words.contains(lowercase)
    }

    /// Number of tokens of `sentence` found in either list.
    pub fn hits(&self, sentence: &str) -> usize {
        sentence
            .split_whitespace()
            .filter(|t| self.contains(&strip_punctuation(t).to_lowercase()))
            .count()
    }
}

fn closes_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// Splits on `.`, `!` or `?` (optionally followed by closing quotes or
/// brackets) when whitespace follows, unless the word ending there is a known
/// abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && (matches!(chars[j].1, '.' | '!' | '?') || closes_quote(chars[j].1)) {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |x| x.0);
            if j < chars.len() && chars[j].1.is_whitespace() {
                let candidate = &text[start..end];
                let last_word = candidate.split_whitespace().last().unwrap_or("").to_lowercase();
                if !ABBREVIATIONS.contains(&last_word.as_str()) {
                    let s = candidate.trim();
                    if !s.is_empty() {
                        out.push(s.to_string());
                    }
                    start = end;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Up to `max_sentences` sentences with at least `min_hits` lexicon hits,
/// highest hit counts first (earlier sentences win ties), returned in
/// document order.
pub fn select_polarity_sentences(
    review: &str,
    lexicon: &PolarityLexicon,
    min_hits: usize,
    max_sentences: usize,
) -> Vec<String> {
    let sentences = split_sentences(review);
    let mut scored: Vec<(usize, usize)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| (lexicon.hits(s), i))
        .filter(|(h, _)| *h >= min_hits.max(1))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored.into_iter().take(max_sentences).map(|(_, i)| i).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| sentences[i].clone()).collect()
}

/// Content words of `excerpts` in order of first appearance, deduplicated
/// case-insensitively and capped at `max_keywords`.
pub fn extract_keywords(excerpts: &[String], stops: &StopLists, max_keywords: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tok in excerpts.iter().flat_map(|e| e.split_whitespace()) {
        if out.len() >= max_keywords {
            break;
        }
        let word = strip_punctuation(tok);
        if word.is_empty() {
            continue;
        }
        let lower = word.to_lowercase();
        if stops.contains(&lower) || !seen.insert(lower) {
            continue;
        }
        out.push(word.to_string());
    }
    out
}

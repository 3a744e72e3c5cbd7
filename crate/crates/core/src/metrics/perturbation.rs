//! Rule-based edit-type detection.
//!
//! Tokens are aligned by longest common subsequence; maximal runs of
//! unmatched tokens form edit regions. The first matching rule wins:
//!
//! 1. no regions: `unchanged`
//! 2. a region inserts or deletes a negation word: `negation`
//! 3. a region substitutes a quantifier word or numeral: `quantifier`
//! 4. same token multiset, different order: `restructure`
//! 5. only insertions: `insertion`
//! 6. only deletions: `delete`
//! 7. one region, one token replaced by one token: `lexical`
//! 8. one region, multi-token substitution: `resemantic`
//! 9. otherwise: `unk`

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationType {
    Negation,
    Insertion,
    Delete,
    Lexical,
    Resemantic,
    Quantifier,
    Restructure,
    Unchanged,
    Unk,
}

impl PerturbationType {
    pub const ALL: [PerturbationType; 9] = [
        Self::Negation,
        Self::Insertion,
        Self::Delete,
        Self::Lexical,
        Self::Resemantic,
        Self::Quantifier,
        Self::Restructure,
        Self::Unchanged,
        Self::Unk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Negation => "negation",
            Self::Insertion => "insertion",
            Self::Delete => "delete",
            Self::Lexical => "lexical",
            Self::Resemantic => "resemantic",
            Self::Quantifier => "quantifier",
            Self::Restructure => "restructure",
            Self::Unchanged => "unchanged",
            Self::Unk => "unk",
        }
    }
}

impl fmt::Display for PerturbationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const NEGATIONS: &[&str] = &["not", "no", "never", "n't", "none", "nothing", "neither", "nobody", "nor"];
const QUANTIFIERS: &[&str] = &["all", "some", "many", "few", "every", "most", "none", "more", "less"];

fn is_negation(tok: &str) -> bool {
    let t = tok.to_lowercase();
    NEGATIONS.contains(&t.as_str()) || t.ends_with("n't") || t.ends_with("n\u{2019}t")
}

fn is_quantifier(tok: &str) -> bool {
    QUANTIFIERS.contains(&tok.to_lowercase().as_str()) || tok.chars().any(|c| c.is_ascii_digit())
}

/// A maximal run of unaligned tokens: `removed` from the original,
/// `inserted` into the edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditRegion<'a> {
    pub removed: Vec<&'a str>,
    pub inserted: Vec<&'a str>,
}

pub fn edit_regions<'a>(a: &[&'a str], b: &[&'a str]) -> Vec<EditRegion<'a>> {
    let (n, m) = (a.len(), b.len());
    // lcs[i][j] = LCS length of a[i..] and b[j..]
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut regions = Vec::new();
    let mut cur = EditRegion {
        removed: vec![],
        inserted: vec![],
    };
    let (mut i, mut j) = (0, 0);
    let mut flush = |cur: &mut EditRegion<'a>| {
        if !cur.removed.is_empty() || !cur.inserted.is_empty() {
            regions.push(std::mem::replace(
                cur,
                EditRegion {
                    removed: vec![],
                    inserted: vec![],
                },
            ));
        }
    };
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] && lcs[i][j] == lcs[i + 1][j + 1] + 1 {
            flush(&mut cur);
            i += 1;
            j += 1;
        } else if j == m || (i < n && lcs[i + 1][j] >= lcs[i][j + 1]) {
            cur.removed.push(a[i]);
            i += 1;
        } else {
            cur.inserted.push(b[j]);
            j += 1;
        }
    }
    flush(&mut cur);
    regions
}

fn multiset<'a>(toks: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in toks {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

pub fn classify_perturbation(original: &str, edited: &str) -> PerturbationType {
    let a = tokens(original);
    let b = tokens(edited);
    let regions = edit_regions(&a, &b);
    if regions.is_empty() {
        return PerturbationType::Unchanged;
    }
    let negation_changed = regions.iter().any(|r| {
        let removed = r.removed.iter().filter(|t| is_negation(t)).count();
        let inserted = r.inserted.iter().filter(|t| is_negation(t)).count();
        removed != inserted
    });
    if negation_changed {
        return PerturbationType::Negation;
    }
    let quantifier_sub = regions.iter().any(|r| {
        !r.removed.is_empty()
            && !r.inserted.is_empty()
            && r.removed.iter().chain(&r.inserted).any(|t| is_quantifier(t))
    });
    if quantifier_sub {
        return PerturbationType::Quantifier;
    }
    if multiset(&a) == multiset(&b) {
        return PerturbationType::Restructure;
    }
    if regions.iter().all(|r| r.removed.is_empty()) {
        return PerturbationType::Insertion;
    }
    if regions.iter().all(|r| r.inserted.is_empty()) {
        return PerturbationType::Delete;
    }
    if let [r] = regions.as_slice() {
        if r.removed.len() == 1 && r.inserted.len() == 1 {
            return PerturbationType::Lexical;
        }
        if !r.removed.is_empty() && !r.inserted.is_empty() {
            return PerturbationType::Resemantic;
        }
    }
    PerturbationType::Unk
}

#[cfg(test)]
mod tests {
    use super::*;
    use PerturbationType::*;

    #[test]
    fn worked_examples() {
        assert_eq!(classify_perturbation("It 's not really funny .", "It 's really funny ."), Negation);
        assert_eq!(classify_perturbation("the movie is a mess", "the movie is a triumph"), Lexical);
        assert_eq!(classify_perturbation("alice met bob", "bob met alice"), Restructure);
        assert_eq!(classify_perturbation("same text", " same   text "), Unchanged);
    }

    #[test]
    fn regions_from_alignment() {
        let a = tokens("a b c d");
        let b = tokens("a x c d e");
        let r = edit_regions(&a, &b);
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].removed.clone(), r[0].inserted.clone()), (vec!["b"], vec!["x"]));
        assert_eq!((r[1].removed.clone(), r[1].inserted.clone()), (vec![], vec!["e"]));
    }

    #[test]
    fn contractions_count_as_negation() {
        assert_eq!(classify_perturbation("I do like it", "I don't like it"), Negation);
        assert!(is_negation("isn\u{2019}t"));
    }

    #[test]
    fn serde_names_are_lowercase() {
        for t in PerturbationType::ALL {
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
    }
}

//! Token normalization and keyword-based ground-truth labeling.

use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords.txt");
const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        DEFAULT_STOPWORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

/// Lowercases `text`, strips punctuation, and drops standalone numerals and
/// stop words.
///
/// Apostrophes are removed rather than split on, so "don't" becomes "dont".
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() {
            cleaned.extend(ch.to_lowercase());
        } else {
            cleaned.push(' ');
        }
    }
    let stop = stopwords();
    cleaned
        .split_whitespace()
        .filter(|t| !t.chars().all(char::is_numeric))
        .filter(|t| !stop.contains(t))
        .map(str::to_owned)
        .collect()
}

/// A set of keyword phrases, each stored in token-normalized form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordLexicon {
    phrases: BTreeSet<Vec<String>>,
}

impl KeywordLexicon {
    /// Builds a lexicon from raw phrases. Phrases that normalize to nothing
    /// (e.g. only stop words) are dropped; an empty result is an error.
    pub fn new<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let phrases: BTreeSet<Vec<String>> = phrases
            .into_iter()
            .map(|p| tokenize(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(Error::Config("keyword lexicon is empty".into()));
        }
        Ok(Self { phrases })
    }

    /// The shipped symptom lexicon.
    pub fn default_symptoms() -> Self {
        Self::new(DEFAULT_LEXICON.lines()).expect("shipped lexicon is non-empty")
    }

    /// Reads one phrase per line. Blank lines and `#` comments are skipped.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            lines.push(line.to_owned());
        }
        Self::new(lines)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Normalized phrases joined by single spaces, in sorted order.
    pub fn phrases(&self) -> impl Iterator<Item = String> + '_ {
        self.phrases.iter().map(|p| p.join(" "))
    }

    /// Whether any phrase occurs as a contiguous run of `tokens`.
    pub fn matches(&self, tokens: &[String]) -> bool {
        self.phrases.iter().any(|p| contains_run(tokens, p))
    }

    /// The phrases occurring in `tokens`, joined by single spaces.
    pub fn matched_phrases<'a>(&'a self, tokens: &'a [String]) -> impl Iterator<Item = String> + 'a {
        self.phrases
            .iter()
            .filter(move |p| contains_run(tokens, p))
            .map(|p| p.join(" "))
    }
}

fn contains_run(tokens: &[String], phrase: &[String]) -> bool {
    phrase.len() <= tokens.len() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

//! Line-per-sentence corpora: loading, lowercasing, length filtering and
//! length statistics.
//!
//! Sentences are stored as whitespace-delimited tokens. For length counting a
//! "word" is a token containing at least one alphanumeric character, so
//! punctuation glued to a word belongs to it while a free-standing "." or "?"
//! is kept in the sentence but does not count toward its length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum sentence length (in words) kept by the default preprocessing.
pub const DEFAULT_MIN_WORDS: usize = 3;

/// One applied preprocessing step and what it did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub name: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Sentences modified in place (e.g. lowercased); not a drop.
    pub changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    sentences: Vec<Vec<String>>,
    source_name: String,
    preprocessing_log: Vec<TransformRecord>,
}

/// Inclusive word-count band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBand {
    min_words: usize,
    max_words: usize,
}

impl LengthBand {
    pub fn new(min_words: usize, max_words: usize) -> Result<Self> {
        if min_words < 1 {
            return Err(Error::Config("length band minimum must be at least 1".into()));
        }
        if min_words > max_words {
            return Err(Error::Config(format!(
                "length band [{min_words},{max_words}] has min > max"
            )));
        }
        Ok(Self {
            min_words,
            max_words,
        })
    }

    pub fn min_words(&self) -> usize {
        self.min_words
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn contains(&self, words: usize) -> bool {
        self.min_words <= words && words <= self.max_words
    }
}

/// Splits a line into whitespace-delimited tokens.
pub fn words(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// Number of tokens that count as words (contain an alphanumeric character).
pub fn word_count<S: AsRef<str>>(tokens: &[S]) -> usize {
    tokens
        .iter()
        .filter(|t| t.as_ref().chars().any(char::is_alphanumeric))
        .count()
}

impl Corpus {
    /// Builds a corpus from already-split sentences, with no preprocessing.
    pub fn from_sentences(source_name: impl Into<String>, sentences: Vec<Vec<String>>) -> Self {
        Self {
            sentences,
            source_name: source_name.into(),
            preprocessing_log: Vec::new(),
        }
    }

    /// Runs the standard preprocessing (lowercase, then drop short sentences)
    /// over in-memory lines.
    pub fn from_lines<'a, I>(
        source_name: impl Into<String>,
        lines: I,
        lowercase: bool,
        min_words: usize,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let raw: Vec<&str> = lines
            .into_iter()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .collect();
        let input = raw.len();
        let mut log = Vec::new();

        let mut changed = 0;
        let texts: Vec<String> = if lowercase {
            raw.iter()
                .map(|l| {
                    let lower = l.to_lowercase();
                    if lower != *l {
                        changed += 1;
                    }
                    lower
                })
                .collect()
        } else {
            raw.iter().map(|l| (*l).to_owned()).collect()
        };
        if lowercase {
            log.push(TransformRecord {
                name: "lowercase".into(),
                input,
                kept: input,
                dropped: 0,
                changed,
            });
        }

        let sentences: Vec<Vec<String>> = texts
            .iter()
            .map(|t| words(t))
            .filter(|w| word_count(w) >= min_words)
            .collect();
        log.push(TransformRecord {
            name: format!("min_words>={min_words}"),
            input,
            kept: sentences.len(),
            dropped: input - sentences.len(),
            changed: 0,
        });

        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            sentences,
            source_name: source_name.into(),
            preprocessing_log: log,
        })
    }

    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn preprocessing_log(&self) -> &[TransformRecord] {
        &self.preprocessing_log
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sentences joined back into single-space-separated text.
    pub fn texts(&self) -> impl Iterator<Item = String> + '_ {
        self.sentences.iter().map(|s| s.join(" "))
    }

    /// Writes the corpus back out one sentence per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in self.texts() {
            out.push_str(&t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a UTF-8 file with one sentence per line and applies the standard
/// preprocessing.
pub fn load_corpus(path: &Path, lowercase: bool, min_words: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw).map_err(|_| Error::Encoding {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line);
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Corpus::from_lines(name, lines, lowercase, min_words)
}

/// Keeps exactly the sentences whose word count lies inside `band`.
pub fn filter_by_length(corpus: &Corpus, band: LengthBand) -> Corpus {
    let input = corpus.len();
    let sentences: Vec<Vec<String>> = corpus
        .sentences
        .iter()
        .filter(|s| band.contains(word_count(s)))
        .cloned()
        .collect();
    if sentences.is_empty() {
        log::warn!(
            "length band [{},{}] removed every sentence of {}",
            band.min_words,
            band.max_words,
            corpus.source_name
        );
    }
    let mut preprocessing_log = corpus.preprocessing_log.clone();
    preprocessing_log.push(TransformRecord {
        name: format!("length_band[{},{}]", band.min_words, band.max_words),
        input,
        kept: sentences.len(),
        dropped: input - sentences.len(),
        changed: 0,
    });
    Corpus {
        sentences,
        source_name: corpus.source_name.clone(),
        preprocessing_log,
    }
}

/// Word count -> number of sentences with that count.
pub fn length_histogram(corpus: &Corpus) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for s in &corpus.sentences {
        *hist.entry(word_count(s)).or_insert(0) += 1;
    }
    hist
}

/// Renders a histogram as CSV with header `length,count`.
pub fn histogram_csv(hist: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("length,count\n");
    for (len, count) in hist {
        let _ = writeln!(out, "{len},{count}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn corpus_of(lines: &[&str]) -> Corpus {
        Corpus::from_lines("t", lines.iter().copied(), true, 1).unwrap()
    }

    #[test]
    fn short_sentence_dropped() {
        let c = Corpus::from_lines("t", ["Go up .", "the dog runs ."], true, 3).unwrap();
        assert_eq!(c.texts().collect::<Vec<_>>(), vec!["the dog runs ."]);
        let last = c.preprocessing_log().last().unwrap();
        assert_eq!((last.input, last.kept, last.dropped), (2, 1, 1));
    }

    #[test]
    fn lowercases() {
        let c = Corpus::from_lines("t", ["The Cat Sat"], true, 3).unwrap();
        assert_eq!(c.texts().next().unwrap(), "the cat sat");
        assert_eq!(c.preprocessing_log()[0].changed, 1);
    }

    #[test]
    fn empty_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_corpus(&p, true, 3), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn missing_file_is_io_error() {
        let r = load_corpus(Path::new("/nonexistent/corpus.txt"), true, 3);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn bad_utf8_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(b"the cat sat\nthe \xff dog ran\n").unwrap();
        match load_corpus(&p, true, 3) {
            Err(Error::Encoding { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn crlf_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("crlf.txt");
        std::fs::write(&p, "a b c\r\nd e f\r\n").unwrap();
        let c = load_corpus(&p, true, 3).unwrap();
        assert_eq!(c.texts().collect::<Vec<_>>(), vec!["a b c", "d e f"]);
    }

    #[test]
    fn band_boundaries() {
        let c = corpus_of(&["a b c d", "a b c d e", "a b c d e f g h i j", "a b c d e f g h i j k"]);
        let band = LengthBand::new(5, 10).unwrap();
        let f = filter_by_length(&c, band);
        let lens: Vec<usize> = f.sentences().iter().map(|s| word_count(s)).collect();
        assert_eq!(lens, vec![5, 10]);
        let all = filter_by_length(&c, LengthBand::new(1, 1_000_000_000).unwrap());
        assert_eq!(all.sentences(), c.sentences());
    }

    #[test]
    fn invalid_bands() {
        assert!(LengthBand::new(0, 3).is_err());
        assert!(LengthBand::new(4, 3).is_err());
    }

    #[test]
    fn histogram_examples() {
        let c = corpus_of(&["a b c", "a b c d"]);
        let h = length_histogram(&c);
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(3, 1), (4, 1)]);

        let empty = Corpus::from_sentences("e", vec![]);
        assert!(length_histogram(&empty).is_empty());

        let lines = vec!["one two three four five"; 100];
        let c = corpus_of(&lines);
        let h = length_histogram(&c);
        assert_eq!(h.get(&5), Some(&100));
        assert_eq!(histogram_csv(&h), "length,count\n5,100\n");
    }

    fn arb_lines() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec("[A-Za-z]{1,6}", 1..12).prop_map(|w| w.join(" ")),
            1..40,
        )
    }

    proptest! {
        #[test]
        fn load_is_idempotent(lines in arb_lines()) {
            if let Ok(c) = Corpus::from_lines("p", lines.iter().map(String::as_str), true, 3) {
                let texts: Vec<String> = c.texts().collect();
                let again = Corpus::from_lines("p", texts.iter().map(String::as_str), true, 3).unwrap();
                prop_assert_eq!(again.sentences(), c.sentences());
                for s in c.sentences() {
                    prop_assert!(word_count(s) >= 3);
                    prop_assert!(s.iter().all(|w| !w.chars().any(char::is_uppercase)));
                }
                for rec in c.preprocessing_log() {
                    prop_assert_eq!(rec.kept + rec.dropped, rec.input);
                }
            }
        }

        #[test]
        fn filter_is_subsequence(lines in arb_lines(), lo in 1usize..6, span in 0usize..6) {
            let c = corpus_of(&lines.iter().map(String::as_str).collect::<Vec<_>>());
            let f = filter_by_length(&c, LengthBand::new(lo, lo + span).unwrap());
            let mut it = c.sentences().iter();
            for s in f.sentences() {
                prop_assert!(it.any(|x| x == s));
            }
        }

        #[test]
        fn histogram_total_matches(lines in arb_lines()) {
            let c = corpus_of(&lines.iter().map(String::as_str).collect::<Vec<_>>());
            let total: usize = length_histogram(&c).values().sum();
            prop_assert_eq!(total, c.len());
        }
    }
}

//! Word-level and byte-pair vocabularies with reversible encoding.
//!
//! Special tokens always occupy the lowest ids: `<bos>`=0, `<unk>`=1,
//! `<eos>`=2, `<pad>`=3. Learned tokens follow in frequency order
//! (ties broken lexicographically), so training is deterministic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const PAD: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

const SPECIAL_STRINGS: [&str; NUM_SPECIALS] = ["<bos>", "<unk>", "<eos>", "<pad>"];
const END_OF_WORD: &str = "</w>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    #[serde(rename = "word")]
    WordLevel,
    BytePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub pad: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        Self {
            bos: BOS,
            eos: EOS,
            unk: UNK,
            pad: PAD,
        }
    }
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.unk || id == self.pad
    }

    /// Ids that carry no sentence content (unk is content: it stands for a word).
    pub fn structural(&self) -> [u32; 3] {
        [self.bos, self.eos, self.pad]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    specials: SpecialIds,
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    /// Byte-pair merges in rank order; empty for word-level.
    merges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    mode: TokenizerMode,
    specials: SpecialIds,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    merges: Vec<(String, String)>,
}

fn sorted_by_frequency(counts: HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

pub fn train_tokenizer(corpus: &Corpus, vocab_size: usize, mode: TokenizerMode) -> Result<Tokenizer> {
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} leaves no room beyond the {NUM_SPECIALS} special tokens"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for s in corpus.sentences() {
        for w in s {
            *word_counts.entry(w.clone()).or_insert(0) += 1;
        }
    }
    let budget = vocab_size - NUM_SPECIALS;
    let (learned, merges) = match mode {
        TokenizerMode::WordLevel => {
            let learned = sorted_by_frequency(word_counts)
                .into_iter()
                .take(budget)
                .map(|(w, _)| w)
                .collect();
            (learned, Vec::new())
        }
        TokenizerMode::BytePair => learn_merges(&word_counts, budget),
    };
    Ok(Tokenizer::from_parts(mode, learned, merges))
}

fn split_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn learn_merges(word_counts: &HashMap<String, usize>, budget: usize) -> (Vec<String>, Vec<(String, String)>) {
    // Deterministic iteration order over words.
    let mut words: Vec<(Vec<String>, usize)> = {
        let mut w: Vec<(&String, &usize)> = word_counts.iter().collect();
        w.sort();
        w.into_iter().map(|(w, c)| (split_symbols(w), *c)).collect()
    };

    let mut symbol_counts: HashMap<String, usize> = HashMap::new();
    for (syms, c) in &words {
        for s in syms {
            *symbol_counts.entry(s.clone()).or_insert(0) += c;
        }
    }
    let mut learned: Vec<String> = sorted_by_frequency(symbol_counts)
        .into_iter()
        .take(budget)
        .map(|(s, _)| s)
        .collect();
    let mut known: std::collections::HashSet<String> = learned.iter().cloned().collect();
    let mut merges = Vec::new();

    while learned.len() < budget {
        let mut pairs: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for pair in syms.windows(2) {
                if known.contains(&pair[0]) && known.contains(&pair[1]) {
                    *pairs.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += c;
                }
            }
        }
        // Highest count wins; BTreeMap order gives the lexicographic tie-break.
        let Some((best, _)) = pairs
            .into_iter()
            .fold(None, |acc: Option<((String, String), usize)>, (p, c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            })
        else {
            break;
        };
        let merged = format!("{}{}", best.0, best.1);
        for (syms, _) in words.iter_mut() {
            *syms = apply_merge(syms, &best.0, &best.1, &merged);
        }
        if known.insert(merged.clone()) {
            learned.push(merged);
        }
        merges.push(best);
    }
    (learned, merges)
}

fn apply_merge(syms: &[String], a: &str, b: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(merged.to_owned());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

impl Tokenizer {
    fn from_parts(mode: TokenizerMode, learned: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let tokens: Vec<String> = SPECIAL_STRINGS
            .iter()
            .map(|s| (*s).to_owned())
            .chain(learned)
            .collect();
        let vocab = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            mode,
            specials: SpecialIds::default(),
            tokens,
            vocab,
            merges,
        }
    }

    /// A word-level tokenizer over an explicit word list, ids assigned in order
    /// after the specials.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        Self::from_parts(
            TokenizerMode::WordLevel,
            words.iter().map(|w| w.as_ref().to_owned()).collect(),
            Vec::new(),
        )
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        match self.mode {
            TokenizerMode::WordLevel => out.push(self.id(word).unwrap_or(self.specials.unk)),
            TokenizerMode::BytePair => {
                let mut syms = split_symbols(word);
                for (a, b) in &self.merges {
                    if syms.len() < 2 {
                        break;
                    }
                    let merged = format!("{a}{b}");
                    syms = apply_merge(&syms, a, b, &merged);
                }
                out.extend(syms.iter().map(|s| self.id(s).unwrap_or(self.specials.unk)));
            }
        }
    }

    /// Encodes whitespace-separated text; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str, add_bos: bool) -> Vec<u32> {
        let mut out = Vec::new();
        if add_bos {
            out.push(self.specials.bos);
        }
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// `<bos> words… <eos>`, the layout used for both training and scoring.
    pub fn encode_sentence<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut out = vec![self.specials.bos];
        for w in words {
            self.encode_word(w.as_ref(), &mut out);
        }
        out.push(self.specials.eos);
        out
    }

    /// Decodes ids, dropping special tokens. Byte-pair output re-inserts a
    /// space at every end-of-word marker.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut pieces: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Decode {
                id,
                size: self.vocab_size(),
            })?;
            if (id as usize) < NUM_SPECIALS && id != self.specials.unk {
                continue;
            }
            pieces.push(tok);
        }
        Ok(match self.mode {
            TokenizerMode::WordLevel => pieces.join(" "),
            TokenizerMode::BytePair => {
                let joined: String = pieces.concat();
                joined
                    .replace(END_OF_WORD, " ")
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            mode: self.mode,
            specials: self.specials,
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        let s = file.specials;
        let ids = [s.bos, s.unk, s.eos, s.pad];
        let mut sorted = ids;
        sorted.sort_unstable();
        if sorted != [0, 1, 2, 3] {
            return Err(Error::Config(format!("special ids {ids:?} must be exactly 0..4")));
        }
        if file.tokens.len() < NUM_SPECIALS || file.tokens[NUM_SPECIALS..].iter().any(String::is_empty) {
            return Err(Error::Config("tokenizer file has empty or missing tokens".into()));
        }
        let vocab: HashMap<String, u32> = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if vocab.len() != file.tokens.len() {
            return Err(Error::Config("tokenizer file has duplicate tokens".into()));
        }
        Ok(Self {
            mode: file.mode,
            specials: file.specials,
            tokens: file.tokens,
            vocab,
            merges: file.merges,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

//! Corpus ingestion, vocabulary construction, BPE subword segmentation and
//! inversion, and synthetic toy corpora for desk-scale experiments.
//!
//! All corpus files are flat UTF-8 text, one sentence per line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Reserved token ids shared by every vocabulary.
pub const EOS_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const RESERVED: usize = 3;

pub const EOS_TOKEN: &str = "<eos>";
pub const BOS_TOKEN: &str = "<bos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Marker appended to every non-final subword unit.
pub const BPE_MARKER: &str = "@@";
/// End-of-word symbol used internally while learning merges.
const END_OF_WORD: &str = "</w>";

/// Whitespace tokenization. Empty lines yield empty sequences; rejecting
/// them is the caller's job.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Token ↔ id maps with three reserved ids: 0 = end-of-sentence,
/// 1 = beginning-of-sentence, 2 = unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<String>) -> Self {
        let mut id_to_token = vec![
            EOS_TOKEN.to_owned(),
            BOS_TOKEN.to_owned(),
            UNK_TOKEN.to_owned(),
        ];
        id_to_token.extend(entries);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved ids are always present
    }

    /// Maps a token to its id, or the unknown id when absent.
    pub fn to_id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn to_token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Vocabulary(format!(
                    "id {id} out of range for vocabulary of size {}",
                    self.id_to_token.len()
                ))
            })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.to_id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.to_token(id).map(str::to_owned))
            .collect()
    }

    /// One non-reserved token per line; line number = id − 3.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for token in &self.id_to_token[RESERVED..] {
            let _ = writeln!(out, "{token}");
        }
        out
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let token = line.trim();
            if token.is_empty() {
                return Err(Error::Vocabulary(format!(
                    "empty token on vocabulary line {}",
                    i + 1
                )));
            }
            entries.push(token.to_owned());
        }
        let vocab = Vocabulary::from_entries(entries);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(Error::Vocabulary("duplicate token in vocabulary".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_text(&std::fs::read_to_string(path)?)
    }
}

/// Keeps the `cap − 3` most frequent tokens (ties broken lexicographically);
/// everything else maps to the unknown id.
pub fn build_vocab<'a, I>(lines: I, cap: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if cap < RESERVED + 1 {
        return Err(Error::Contract(format!(
            "vocabulary cap must be at least {}, got {cap}",
            RESERVED + 1
        )));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut any = false;
    for line in lines {
        any = true;
        for token in line {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    // Highest count first; lexicographic order inside a tie (the BTreeMap
    // already yields keys sorted, and the sort is stable).
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let entries = ranked
        .into_iter()
        .take(cap - RESERVED)
        .map(|(t, _)| t.to_owned())
        .collect();
    Ok(Vocabulary::from_entries(entries))
}

// ── byte pair encoding ──────────────────────────────────────────────────

/// Ordered list of symbol-pair merges learned from a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeMerges {
    merges: Vec<(String, String)>,
}

impl BpeMerges {
    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// One merge per line, two space-separated symbols, in learned order.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()));
                }
                _ => {
                    return Err(Error::Format(format!(
                        "merges line {} must contain exactly two symbols",
                        i + 1
                    )))
                }
            }
        }
        Ok(BpeMerges { merges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_text(&std::fs::read_to_string(path)?)
    }
}

/// Splits a word into learnable symbols: one per character, with the
/// end-of-word marker glued to the final character.
fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Replaces every adjacent occurrence of `pair` in `symbols`, left to right.
fn apply_merge(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns up to `n_merges` merges by greedily picking the most frequent
/// adjacent symbol pair, breaking ties lexicographically.
pub fn learn_bpe<'a, I>(lines: I, n_merges: usize) -> Result<BpeMerges>
where
    I: IntoIterator<Item = &'a [String]>,
{
    // Collapse the corpus into word frequencies; merges never cross words.
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for line in lines {
        for token in line {
            *word_freq.entry(token.clone()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (word_symbols(&w), f))
        .collect();

    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, freq) in &words {
            for window in symbols.windows(2) {
                *pair_counts
                    .entry((window[0].clone(), window[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // Most frequent pair, ties broken by the lexicographically smaller
        // pair (reversed pair order makes the smaller pair compare greater).
        let Some(best) = pair_counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            break;
        };
        let pair = best.0;
        for (symbols, _) in &mut words {
            apply_merge(symbols, &pair);
        }
        merges.push(pair);
    }
    Ok(BpeMerges { merges })
}

/// Segments tokens into subword units. Non-final units carry the `@@`
/// marker; characters never seen during learning pass through as
/// singletons.
pub fn apply_bpe(merges: &BpeMerges, tokens: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for token in tokens {
        let mut symbols = word_symbols(token);
        for pair in &merges.merges {
            if symbols.len() < 2 {
                break;
            }
            apply_merge(&mut symbols, pair);
        }
        let last = symbols.len() - 1;
        for (i, mut symbol) in symbols.into_iter().enumerate() {
            if i == last {
                symbol.truncate(symbol.len() - END_OF_WORD.len());
            } else {
                symbol.push_str(BPE_MARKER);
            }
            out.push(symbol);
        }
    }
    out
}

/// Rejoins `@@`-marked units with their successors. The output stays
/// tokenized. A trailing marker at the end of the line is stripped with a
/// warning, since there is nothing left to join.
pub fn unbpe(subwords: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut pending: Option<String> = None;
    for unit in subwords {
        let (body, continues) = match unit.strip_suffix(BPE_MARKER) {
            Some(body) => (body, true),
            None => (unit.as_str(), false),
        };
        let mut word = pending.take().unwrap_or_default();
        word.push_str(body);
        if continues {
            pending = Some(word);
        } else {
            out.push(word);
        }
    }
    if let Some(word) = pending {
        eprintln!("warning: trailing '{BPE_MARKER}' at end of line; marker stripped");
        out.push(word);
    }
    out
}

// ── parallel corpora ────────────────────────────────────────────────────

/// Aligned source/target token sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads a source and a target file with one sentence per line. Line
    /// counts must agree and no side may be empty.
    pub fn from_files(src: &Path, tgt: &Path) -> Result<Self> {
        let src_text = std::fs::read_to_string(src)?;
        let tgt_text = std::fs::read_to_string(tgt)?;
        Self::from_texts(&src_text, &tgt_text)
    }

    pub fn from_texts(src: &str, tgt: &str) -> Result<Self> {
        let src_lines: Vec<&str> = src.lines().collect();
        let tgt_lines: Vec<&str> = tgt.lines().collect();
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Data(format!(
                "source has {} lines but target has {}",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src_lines.len());
        for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
            let s_tokens = tokenize(s);
            let t_tokens = tokenize(t);
            if s_tokens.is_empty() || t_tokens.is_empty() {
                return Err(Error::Data(format!("empty sentence on line {}", i + 1)));
            }
            pairs.push((s_tokens, t_tokens));
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn source_lines(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(s, _)| s.as_slice())
    }

    pub fn target_lines(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(_, t)| t.as_slice())
    }
}

/// Synthetic task family for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    /// Target equals the source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Each source symbol maps to one of two target symbols, chosen by the
    /// parity of its position — signal that dimension-wise attention can
    /// exploit.
    Polysemy,
}

impl ToyTask {
    pub fn as_str(self) -> &'static str {
        match self {
            ToyTask::Copy => "copy",
            ToyTask::Reverse => "reverse",
            ToyTask::Polysemy => "polysemy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reverse" => Ok(ToyTask::Reverse),
            "polysemy" => Ok(ToyTask::Polysemy),
            other => Err(Error::Format(format!(
                "unknown toy task '{other}' (expected copy, reverse or polysemy)"
            ))),
        }
    }
}

/// Generates a reproducible toy corpus of `n_pairs` sentences over symbols
/// `s0..s{vocab_size-1}` with lengths in `1..=max_len`.
pub fn toy_corpus(
    task: ToyTask,
    n_pairs: usize,
    vocab_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size < 4 {
        return Err(Error::Contract(format!(
            "toy vocabulary needs at least 4 symbols, got {vocab_size}"
        )));
    }
    if max_len == 0 || max_len > 50 {
        return Err(Error::Contract(format!(
            "toy max_len must lie in 1..=50, got {max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.random_range(1..=max_len);
        let source: Vec<String> = (0..len)
            .map(|_| format!("s{}", rng.random_range(0..vocab_size)))
            .collect();
        let target = match task {
            ToyTask::Copy => source.clone(),
            ToyTask::Reverse => source.iter().rev().cloned().collect(),
            ToyTask::Polysemy => source
                .iter()
                .enumerate()
                .map(|(pos, s)| {
                    let suffix = if pos % 2 == 0 { "a" } else { "b" };
                    format!("t{}{}", &s[1..], suffix)
                })
                .collect(),
        };
        pairs.push((source, target));
    }
    Ok(ParallelCorpus { pairs })
}

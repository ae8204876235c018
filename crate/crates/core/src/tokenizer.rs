//! Byte-pair-merge subword vocabulary with reserved special and sentinel ids.
//!
//! Layout of the id space:
//!
//! ```text
//! 0 <pad> | 1 </s> | 2 <unk> | ▁ | single characters | merged pieces | sentinels
//! ```
//!
//! Text is split on whitespace and every word starts with the boundary marker
//! `▁`, so decoding can restore single spaces between words.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_SPECIALS: usize = 3;
pub const DEFAULT_VOCAB_SIZE: usize = 8_000;
pub const DEFAULT_NUM_SENTINELS: usize = 100;
pub const WORD_MARKER: char = '\u{2581}';

const SPECIAL_PIECES: [&str; NUM_SPECIALS] = ["<pad>", "</s>", "<unk>"];
const FORMAT_HEADER: &str = "bpevocab v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocabulary size {requested} is below the minimum {minimum} for this corpus")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus supports only {reached} pieces, {requested} requested")]
    MergesExhausted { reached: usize, requested: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    num_sentinels: usize,
    piece_ids: HashMap<String, u32>,
    merge_ranks: HashMap<(String, String), usize>,
}

impl Vocabulary {
    fn assemble(pieces: Vec<String>, merges: Vec<(String, String)>, num_sentinels: usize) -> Self {
        let first_sentinel = pieces.len() - num_sentinels;
        let piece_ids = pieces
            .iter()
            .enumerate()
            .take(first_sentinel)
            .skip(NUM_SPECIALS)
            .map(|(i, p)| (p.clone(), i as u32))
            .rev() // earliest id wins on duplicate strings
            .collect();
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        Vocabulary {
            pieces,
            merges,
            num_sentinels,
            piece_ids,
            merge_ranks,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn sentinel(&self, k: usize) -> u32 {
        assert!(k < self.num_sentinels, "sentinel {k} out of range");
        (self.pieces.len() - self.num_sentinels + k) as u32
    }

    /// Returns `k` when `id` is the k-th sentinel.
    pub fn sentinel_index(&self, id: u32) -> Option<usize> {
        let first = self.pieces.len() - self.num_sentinels;
        let id = id as usize;
        (id >= first && id < self.pieces.len()).then(|| id - first)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let symbols = self.merge_word(word_symbols(word));
            ids.extend(
                symbols
                    .iter()
                    .map(|s| self.piece_ids.get(s).copied().unwrap_or(UNK)),
            );
        }
        ids
    }

    fn merge_word(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .copied()
                })
                .min();
            let Some(rank) = best else {
                return symbols;
            };
            let (left, right) = &self.merges[rank];
            symbols = apply_merge(&symbols, left, right);
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            if id as usize >= self.pieces.len() {
                return Err(TokenizerError::IdOutOfRange {
                    id,
                    vocab_size: self.pieces.len(),
                });
            }
            if self.is_special(id) {
                continue;
            }
            if let Some(k) = self.sentinel_index(id) {
                let _ = write!(out, " <extra_id_{k}>");
                continue;
            }
            for c in self.pieces[id as usize].chars() {
                out.push(if c == WORD_MARKER { ' ' } else { c });
            }
        }
        Ok(out.trim_start().to_string())
    }

    /// Serializes to the versioned text format.
    pub fn to_file(&self) -> String {
        let mut out = format!(
            "{FORMAT_HEADER} {} {}\n",
            self.pieces.len(),
            self.num_sentinels
        );
        for piece in &self.pieces {
            out.push_str(piece);
            out.push('\n');
        }
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, reason: &str| TokenizerError::Format {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let rest = header
            .strip_prefix(FORMAT_HEADER)
            .ok_or_else(|| err(1, "unknown header"))?;
        let fields: Vec<usize> = rest
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err(1, "bad header numbers"))?;
        let [vocab_size, num_sentinels] = fields[..] else {
            return Err(err(1, "header needs vocab size and sentinel count"));
        };
        if vocab_size < NUM_SPECIALS + num_sentinels {
            return Err(err(1, "vocab size smaller than reserved ids"));
        }
        let mut pieces = Vec::with_capacity(vocab_size);
        for i in 0..vocab_size {
            let piece = lines.next().ok_or_else(|| err(i + 2, "missing piece"))?;
            if piece.is_empty() {
                return Err(err(i + 2, "empty piece"));
            }
            pieces.push(piece.to_string());
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| err(vocab_size + i + 2, "merge needs two pieces"))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Self::assemble(pieces, merges, num_sentinels))
    }

    /// SHA-256 over the serialized file.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_file().as_bytes()).into()
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_MARKER)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

fn apply_merge(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Smallest admissible vocabulary for a corpus: specials, marker, alphabet
/// and sentinels with zero merges.
pub fn minimum_vocab_size<S: AsRef<str>>(corpus: &[S], num_sentinels: usize) -> usize {
    NUM_SPECIALS + 1 + alphabet(corpus).len() + num_sentinels
}

fn alphabet<S: AsRef<str>>(corpus: &[S]) -> BTreeSet<char> {
    corpus
        .iter()
        .flat_map(|line| line.as_ref().chars())
        .filter(|c| !c.is_whitespace() && *c != WORD_MARKER)
        .collect()
}

/// Learns merges greedily: the most frequent adjacent pair is merged until
/// `vocab_size - num_sentinels` pieces exist. Ties go to the
/// lexicographically smallest pair.
pub fn train_vocabulary<S: AsRef<str>>(
    corpus: &[S],
    vocab_size: usize,
    num_sentinels: usize,
) -> Result<Vocabulary, TokenizerError> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for word in line.as_ref().split_whitespace() {
            *word_counts.entry(word).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let minimum = minimum_vocab_size(corpus, num_sentinels);
    if vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.push(WORD_MARKER.to_string());
    pieces.extend(alphabet(corpus).into_iter().map(String::from));
    let mut known: BTreeSet<String> = pieces[NUM_SPECIALS..].iter().cloned().collect();

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, n)| (word_symbols(w), n))
        .collect();
    let target = vocab_size - num_sentinels;
    let mut merges = Vec::new();

    while pieces.len() < target {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iterates pairs in ascending order; keep the first maximum.
        let best = pair_counts
            .into_iter()
            .fold(None::<((&str, &str), usize)>, |best, (pair, n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((pair, n)),
            });
        let Some(((left, right), _)) = best else {
            return Err(TokenizerError::MergesExhausted {
                reached: pieces.len() + num_sentinels,
                requested: vocab_size,
            });
        };
        let (left, right) = (left.to_string(), right.to_string());
        for (symbols, _) in &mut words {
            if symbols.len() > 1 {
                *symbols = apply_merge(symbols, &left, &right);
            }
        }
        let merged = format!("{left}{right}");
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
        merges.push((left, right));
    }

    pieces.extend((0..num_sentinels).map(|k| format!("<extra_id_{k}>")));
    Ok(Vocabulary::assemble(pieces, merges, num_sentinels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_corpus() -> Vec<String> {
        [
            "public void foo ( int bar ) { bar = 0 ; }",
            "return VAR_1 + VAR_2 ;",
            "returns the sum of two numbers",
            "if ( a == null ) return null ;",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = ["aaab", "aab"];
        // pieces: 3 specials + marker + {a, b} = 6; one merge allowed.
        let v = train_vocabulary(&corpus, 7, 0).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(v.piece(6), Some("aa"));
    }

    #[test]
    fn minimum_size_is_character_level() {
        let corpus = small_corpus();
        let min = minimum_vocab_size(&corpus, 5);
        let v = train_vocabulary(&corpus, min, 5).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), min);
        assert_eq!(
            train_vocabulary(&corpus, min - 1, 5),
            Err(TokenizerError::VocabTooSmall {
                requested: min - 1,
                minimum: min
            })
        );
    }

    #[test]
    fn sentinels_occupy_top_ids() {
        let corpus = small_corpus();
        let size = minimum_vocab_size(&corpus, 100) + 20;
        let v = train_vocabulary(&corpus, size, 100).unwrap();
        assert_eq!(v.len(), size);
        for k in 0..100 {
            let id = (size - 100 + k) as u32;
            assert_eq!(v.sentinel(k), id);
            assert_eq!(v.decode(&[id]).unwrap(), format!("<extra_id_{k}>"));
        }
        assert_eq!(v.decode(&[v.sentinel(0)]).unwrap(), "<extra_id_0>");
    }

    #[test]
    fn specials_and_empty() {
        let v = train_vocabulary(&small_corpus(), 80, 4).unwrap();
        assert_eq!(v.encode(""), Vec::<u32>::new());
        assert_eq!(v.encode("   "), Vec::<u32>::new());
        assert_eq!(v.decode(&[PAD, EOS]).unwrap(), "");
        assert_eq!(
            v.decode(&[80]),
            Err(TokenizerError::IdOutOfRange {
                id: 80,
                vocab_size: 80
            })
        );
    }

    #[test]
    fn unseen_character_is_unk() {
        let v = train_vocabulary(&small_corpus(), 80, 4).unwrap();
        let ids = v.encode("§");
        assert_eq!(ids.last(), Some(&UNK));
        assert!(ids.iter().all(|&id| id == UNK || v.piece(id) == Some("▁")));
    }

    #[test]
    fn errors_on_empty_corpus() {
        let empty: [&str; 0] = [];
        assert_eq!(
            train_vocabulary(&empty, 500, 0),
            Err(TokenizerError::EmptyCorpus)
        );
        assert_eq!(
            train_vocabulary(&["  "], 500, 0),
            Err(TokenizerError::EmptyCorpus)
        );
    }

    #[test]
    fn exhausted_merges_are_reported() {
        assert!(matches!(
            train_vocabulary(&["ab"], 1000, 0),
            Err(TokenizerError::MergesExhausted { .. })
        ));
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = train_vocabulary(&small_corpus(), 90, 10).unwrap();
        let text = v.to_file();
        assert!(text.starts_with("bpevocab v1 90 10\n"));
        let back = Vocabulary::parse_file(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        let other = train_vocabulary(&small_corpus(), 91, 10).unwrap();
        assert_ne!(other.content_hash(), v.content_hash());
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_vocabulary(&small_corpus(), 100, 10).unwrap();
        let b = train_vocabulary(&small_corpus(), 100, 10).unwrap();
        assert_eq!(a.to_file(), b.to_file());
    }

    fn normalize(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn corpus_lines_round_trip(
            lines in prop::collection::vec("[a-e(){};= ]{0,30}", 1..12),
            extra in 0usize..40,
        ) {
            prop_assume!(lines.iter().any(|l| !l.trim().is_empty()));
            let size = minimum_vocab_size(&lines, 3) + extra;
            let v = match train_vocabulary(&lines, size, 3) {
                Ok(v) => v,
                Err(TokenizerError::MergesExhausted { .. }) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            prop_assert_eq!(v.len(), size);
            for line in &lines {
                let ids = v.encode(line);
                prop_assert!(ids.iter().all(|&id| (id as usize) < v.len() && id != UNK));
                prop_assert_eq!(v.decode(&ids).unwrap(), normalize(line));
                prop_assert_eq!(v.encode(&v.decode(&ids).unwrap()), ids);
            }
        }
    }
}

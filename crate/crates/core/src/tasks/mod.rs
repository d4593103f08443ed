//! Synthetic sequence-to-sequence tasks, vocabulary and dataset files.

mod bleu;
mod vocab;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::TokenId;

pub use bleu::{corpus_bleu, sequence_accuracy};
pub use vocab::{Vocab, BOS, CONTENT_CLASS, FUNCTION_CLASS, NUM_RESERVED, PAD, RESERVED_CLASS, SLOT, STOP};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: unknown token `{token}`")]
    UnknownToken { line: usize, token: String },
    #[error("line {line}: empty target")]
    EmptyTarget { line: usize },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    MapShuffle,
    Branching,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Sort,
        TaskKind::MapShuffle,
        TaskKind::Branching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::MapShuffle => "map_shuffle",
            TaskKind::Branching => "branching",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            format!("unknown task `{s}` (expected one of: {})", names.join(", "))
        })
    }
}

/// Separator emitted between content tokens of the branching task.
pub const SEPARATOR: &str = ",";
/// Terminator emitted after the last content token of the branching task.
pub const TERMINATOR: &str = ".";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of content tokens.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

pub type Pair = (Vec<TokenId>, Vec<TokenId>);

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        assert!(vocab_size >= 1 && min_len >= 1 && min_len <= max_len);
        Self {
            kind,
            vocab_size,
            min_len,
            max_len,
            seed,
        }
    }

    /// Content tokens are the decimal strings `1..=vocab_size` in id order,
    /// so sorting ids sorts them numerically. The branching task adds the
    /// function-class separator and terminator.
    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        for i in 1..=self.vocab_size {
            v.add(&i.to_string(), CONTENT_CLASS);
        }
        if self.kind == TaskKind::Branching {
            v.add(SEPARATOR, FUNCTION_CLASS);
            v.add(TERMINATOR, FUNCTION_CLASS);
        }
        v
    }

    fn content_id(&self, k: usize) -> TokenId {
        (NUM_RESERVED + k) as TokenId
    }

    /// Fixed content-token bijection of the map_shuffle task.
    fn bijection(&self) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d61_705f_7368_7566);
        let mut ids: Vec<TokenId> = (0..self.vocab_size).map(|k| self.content_id(k)).collect();
        ids.shuffle(&mut rng);
        ids
    }

    /// The pair at `index`; a pure function of `(spec, index)`.
    pub fn pair(&self, index: u64) -> Pair {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let src: Vec<TokenId> = (0..len)
            .map(|_| self.content_id(rng.gen_range(0..self.vocab_size)))
            .collect();
        let tgt = self.target_for(&src);
        (src, tgt)
    }

    pub fn target_for(&self, src: &[TokenId]) -> Vec<TokenId> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.to_vec();
                t.sort_unstable();
                t
            }
            TaskKind::MapShuffle => {
                let map = self.bijection();
                let mut t: Vec<TokenId> = src.iter().map(|&s| map[s as usize - NUM_RESERVED]).collect();
                for pair in t.chunks_mut(2) {
                    pair.reverse();
                }
                t
            }
            TaskKind::Branching => {
                let sep = self.content_id(self.vocab_size);
                let term = sep + 1;
                let mut t = Vec::with_capacity(2 * src.len());
                for (i, &j) in center_out_order(src.len()).iter().enumerate() {
                    if i > 0 {
                        t.push(sep);
                    }
                    t.push(src[j]);
                }
                t.push(term);
                t
            }
        }
    }
}

/// Source positions in center-outward order: the middle element, then
/// alternately one step left and one step right.
pub fn center_out_order(n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let c = (n - 1) / 2;
    let mut out = vec![c];
    for step in 1..n {
        if step <= c {
            out.push(c - step);
        }
        if c + step < n {
            out.push(c + step);
        }
    }
    out
}

/// Fraction of consecutive content tokens in the branching target whose
/// source positions increase, pooled over lengths.
pub fn monotone_fraction(lengths: impl IntoIterator<Item = usize>) -> f64 {
    let (mut up, mut steps) = (0usize, 0usize);
    for n in lengths {
        let order = center_out_order(n);
        up += order.windows(2).filter(|w| w[1] > w[0]).count();
        steps += order.len().saturating_sub(1);
    }
    if steps == 0 {
        1.0
    } else {
        up as f64 / steps as f64
    }
}

/// `n` pairs starting at index `start`.
pub fn generate_range(spec: &TaskSpec, start: u64, n: usize) -> Vec<Pair> {
    (start..start + n as u64).map(|i| spec.pair(i)).collect()
}

pub fn generate(spec: &TaskSpec, n: usize) -> Vec<Pair> {
    generate_range(spec, 0, n)
}

/// One pair per line: source tokens, TAB, target tokens.
pub fn format_tsv(pairs: &[Pair], vocab: &Vocab) -> String {
    pairs
        .iter()
        .map(|(s, t)| format!("{}\t{}\n", vocab.decode(s), vocab.decode(t)))
        .collect()
}

pub fn parse_tsv(text: &str, vocab: &Vocab) -> Result<Vec<Pair>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let (src, tgt) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
            line: line_no,
            msg: "expected `source<TAB>target`".into(),
        })?;
        if tgt.contains('\t') {
            return Err(DataError::Malformed {
                line: line_no,
                msg: "more than two columns".into(),
            });
        }
        let enc = |s: &str| {
            vocab
                .encode(s)
                .map_err(|token| DataError::UnknownToken { line: line_no, token })
        };
        let (src, tgt) = (enc(src)?, enc(tgt)?);
        if tgt.is_empty() {
            return Err(DataError::EmptyTarget { line: line_no });
        }
        out.push((src, tgt));
    }
    Ok(out)
}

pub fn write_tsv(path: &Path, pairs: &[Pair], vocab: &Vocab) -> Result<(), DataError> {
    fs::write(path, format_tsv(pairs, vocab)).map_err(|e| DataError::io(path, e))
}

pub fn read_tsv(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>, DataError> {
    parse_tsv(&fs::read_to_string(path).map_err(|e| DataError::io(path, e))?, vocab)
}

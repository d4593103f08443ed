//! Generation-order statistics over decoded insertion trajectories.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::tasks::Vocab;
use crate::trajectory::{InsertionEvent, TokenId, Trajectory, TrajectoryError};

pub const BINS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: TrajectoryError,
    },
    #[error("line {line}: expected `tokens<TAB>trajectory<TAB>score`")]
    Fields { line: usize },
    #[error("token id {0} has no class in the vocabulary")]
    MissingClass(TokenId),
}

/// Trajectories read from a decode file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decodes {
    pub trajectories: Vec<Trajectory>,
    /// Lines whose path never emitted `EOS`.
    pub truncated: usize,
}

/// Parses decode lines (`tokens TAB trajectory TAB score`).
pub fn read_decodes(text: &str, vocab: &Vocab) -> Result<Decodes, AnalysisError> {
    let mut out = Decodes::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(AnalysisError::Fields { line: i + 1 });
        }
        if fields[1].split_whitespace().last() != Some("EOS") {
            out.truncated += 1;
            continue;
        }
        let traj = Trajectory::parse_line_with(fields[1], |t| vocab.id(t))
            .map_err(|source| AnalysisError::Malformed { line: i + 1, source })?;
        out.trajectories.push(traj);
    }
    Ok(out)
}

/// Relative generation index of every inserted token: the insertion's rank
/// among the trajectory's insertions divided by `insertions − 1`, with 0 for
/// a single insertion. The `EOS` step is not counted.
pub fn relative_indices(traj: &Trajectory) -> Vec<(TokenId, f64)> {
    let n = traj.insertions();
    traj.events()
        .iter()
        .enumerate()
        .filter_map(|(k, ev)| match *ev {
            InsertionEvent::Insert { token, .. } => Some((token, if n <= 1 { 0.0 } else { k as f64 / (n - 1) as f64 })),
            InsertionEvent::Eos => None,
        })
        .collect()
}

/// Histogram bin of a relative index: width 0.1, with 1.0 in the last bin.
pub fn bin_of(rel: f64) -> usize {
    ((rel * BINS as f64).floor() as usize).min(BINS - 1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub counts: [usize; BINS],
    pub tokens: usize,
    pub sum: f64,
}

impl ClassStats {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            f64::NAN
        } else {
            self.sum / self.tokens as f64
        }
    }
}

/// Per-class histograms of relative generation index.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OrderStats {
    pub classes: BTreeMap<String, ClassStats>,
}

impl OrderStats {
    pub fn mean(&self, class: &str) -> Option<f64> {
        self.classes.get(class).map(ClassStats::mean)
    }

    /// `class,bin,count` with `bin` the lower edge of the interval.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("class,bin,count\n");
        for (class, st) in &self.classes {
            for (b, c) in st.counts.iter().enumerate() {
                s.push_str(&format!("{class},{:.1},{c}\n", b as f64 / BINS as f64));
            }
        }
        s
    }

    /// `class,tokens,mean_relative_index`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("class,tokens,mean_relative_index\n");
        for (class, st) in &self.classes {
            s.push_str(&format!("{class},{},{:.6}\n", st.tokens, st.mean()));
        }
        s
    }
}

pub fn relative_order_stats(trajs: &[Trajectory], vocab: &Vocab) -> Result<OrderStats, AnalysisError> {
    let mut stats = OrderStats::default();
    for t in trajs {
        for (token, rel) in relative_indices(t) {
            if token as usize >= vocab.len() {
                return Err(AnalysisError::MissingClass(token));
            }
            let st = stats.classes.entry(vocab.class(token).to_string()).or_default();
            st.counts[bin_of(rel)] += 1;
            st.tokens += 1;
            st.sum += rel;
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    L2r,
    R2l,
    Mixed,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::L2r => "l2r",
            Direction::R2l => "r2l",
            Direction::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `l2r` if every insertion appends, else `r2l` if every insertion
/// prepends, else `mixed`. Outputs of at most one token count as `l2r`.
pub fn direction(traj: &Trajectory) -> Direction {
    let mut append = true;
    let mut prepend = true;
    let mut len = 0;
    for ev in traj.events() {
        if let InsertionEvent::Insert { pos, .. } = *ev {
            append &= pos == len;
            prepend &= pos == 0;
            len += 1;
        }
    }
    if append {
        Direction::L2r
    } else if prepend {
        Direction::R2l
    } else {
        Direction::Mixed
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DirectionProfile {
    pub l2r: usize,
    pub r2l: usize,
    pub mixed: usize,
}

impl DirectionProfile {
    pub fn total(&self) -> usize {
        self.l2r + self.r2l + self.mixed
    }

    pub fn to_csv(&self) -> String {
        format!(
            "direction,count\nl2r,{}\nr2l,{}\nmixed,{}\n",
            self.l2r, self.r2l, self.mixed
        )
    }
}

pub fn order_direction_profile(trajs: &[Trajectory]) -> DirectionProfile {
    let mut p = DirectionProfile::default();
    for t in trajs {
        match direction(t) {
            Direction::L2r => p.l2r += 1,
            Direction::R2l => p.r2l += 1,
            Direction::Mixed => p.mixed += 1,
        }
    }
    p
}

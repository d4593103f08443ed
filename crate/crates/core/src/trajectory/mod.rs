//! Insertion trajectories: applying insertions, the set of insertions that
//! stay on a path to a target, trajectory samplers and exact oracles over the
//! trajectory graph.

mod distribution;
mod exact;
pub mod stub;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub use distribution::{InsertionDistribution, StepModel};
pub use exact::{
    enumerate_trajectories, exact_bounds, exact_log_marginal, exact_marginal, trajectory_log_prob, Bounds,
    MAX_BOUNDS_LEN, MAX_ENUMERATE_LEN, MAX_MARGINAL_LEN,
};

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("insert position {pos} out of range for partial of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("partial output {partial:?} is not a subsequence of the target")]
    NotSubsequence { partial: Vec<TokenId> },
    #[error("target length {len} exceeds the limit {max} for {op}")]
    TooLong { op: &'static str, len: usize, max: usize },
    #[error("target must be non-empty")]
    EmptyTarget,
    #[error("model puts zero mass on every correct insertion at partial {partial:?}")]
    DegenerateModel { partial: Vec<TokenId> },
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("step model failed: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// One decoding action. The derived order (inserts by position then token,
/// `Eos` last) is the canonical event order used for tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InsertionEvent {
    /// Insert `token` before the current element at `pos`; `pos == len` appends.
    Insert {
        pos: usize,
        token: TokenId,
    },
    Eos,
}

impl InsertionEvent {
    pub fn insert(pos: usize, token: TokenId) -> Self {
        Self::Insert { pos, token }
    }
}

/// Result of applying one event to a partial output.
pub fn apply_insertion(partial: &[TokenId], ev: InsertionEvent) -> Result<Vec<TokenId>> {
    match ev {
        InsertionEvent::Eos => Ok(partial.to_vec()),
        InsertionEvent::Insert { pos, token } => {
            if pos > partial.len() {
                return Err(TrajectoryError::PositionOutOfRange {
                    pos,
                    len: partial.len(),
                });
            }
            let mut out = Vec::with_capacity(partial.len() + 1);
            out.extend_from_slice(&partial[..pos]);
            out.push(token);
            out.extend_from_slice(&partial[pos..]);
            Ok(out)
        }
    }
}

pub fn is_subsequence(short: &[TokenId], long: &[TokenId]) -> bool {
    let mut it = long.iter();
    short.iter().all(|t| it.any(|x| x == t))
}

/// Every event that keeps `partial` on a path to `y`: inserts whose result is
/// still a subsequence of `y`, or `{Eos}` once `partial == y`. Sorted in
/// canonical event order.
pub fn correct_insertions(y: &[TokenId], partial: &[TokenId]) -> Result<Vec<InsertionEvent>> {
    let (n, len) = (y.len(), partial.len());
    // earliest[p]: length of the shortest prefix of y containing partial[..p].
    let mut earliest = vec![0; len + 1];
    let mut j = 0;
    for (i, t) in partial.iter().enumerate() {
        while j < n && y[j] != *t {
            j += 1;
        }
        if j == n {
            return Err(TrajectoryError::NotSubsequence {
                partial: partial.to_vec(),
            });
        }
        j += 1;
        earliest[i + 1] = j;
    }
    if len == n {
        return Ok(vec![InsertionEvent::Eos]);
    }
    // latest[p]: largest start s with partial[p..] a subsequence of y[s..].
    let mut latest = vec![n; len + 1];
    let mut j = n;
    for i in (0..len).rev() {
        j -= 1;
        while y[j] != partial[i] {
            j -= 1;
        }
        latest[i] = j;
    }
    let mut out = Vec::new();
    for pos in 0..=len {
        let mut tokens: Vec<TokenId> = y[earliest[pos]..latest[pos]].to_vec();
        tokens.sort_unstable();
        tokens.dedup();
        out.extend(tokens.into_iter().map(|token| InsertionEvent::Insert { pos, token }));
    }
    Ok(out)
}

/// Ordered event list ending with exactly one `Eos`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Trajectory {
    events: Vec<InsertionEvent>,
}

impl Trajectory {
    pub fn new(events: Vec<InsertionEvent>) -> Result<Self> {
        match events.iter().position(|e| *e == InsertionEvent::Eos) {
            Some(i) if i + 1 == events.len() => {}
            _ => return Err(TrajectoryError::Malformed("a trajectory ends with its only EOS".into())),
        }
        let t = Self { events };
        t.apply()?;
        Ok(t)
    }

    pub fn events(&self) -> &[InsertionEvent] {
        &self.events
    }

    /// Number of insert events.
    pub fn insertions(&self) -> usize {
        self.events.len() - 1
    }

    /// The sequence built from the empty sequence.
    pub fn apply(&self) -> Result<Vec<TokenId>> {
        self.events
            .iter()
            .try_fold(Vec::new(), |acc, &ev| apply_insertion(&acc, ev))
    }

    /// Partial outputs seen before each event: `partials()[t]` is the state
    /// the `t`-th event is applied to.
    pub fn partials(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut cur = Vec::new();
        for &ev in &self.events {
            let next = apply_insertion(&cur, ev).expect("validated on construction");
            out.push(std::mem::replace(&mut cur, next));
        }
        out
    }

    pub fn leads_to(&self, y: &[TokenId]) -> bool {
        self.apply().is_ok_and(|r| r == y)
    }

    /// `pos:token` pairs then `EOS`, space separated.
    pub fn to_line_with(&self, token: impl Fn(TokenId) -> String) -> String {
        self.events
            .iter()
            .map(|ev| match *ev {
                InsertionEvent::Insert { pos, token: t } => format!("{pos}:{}", token(t)),
                InsertionEvent::Eos => "EOS".to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_line_with(line: &str, token: impl Fn(&str) -> Option<TokenId>) -> Result<Self> {
        let events = line
            .split_whitespace()
            .map(|field| {
                if field == "EOS" {
                    return Ok(InsertionEvent::Eos);
                }
                let (pos, tok) = field
                    .split_once(':')
                    .ok_or_else(|| TrajectoryError::Malformed(format!("expected pos:token, got `{field}`")))?;
                let pos = pos
                    .parse()
                    .map_err(|_| TrajectoryError::Malformed(format!("bad position in `{field}`")))?;
                let token = token(tok).ok_or_else(|| TrajectoryError::Malformed(format!("unknown token `{tok}`")))?;
                Ok(InsertionEvent::Insert { pos, token })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(events)
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line_with(|t| t.to_string()))
    }
}

impl std::str::FromStr for Trajectory {
    type Err = TrajectoryError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_line_with(s, |t| t.parse().ok())
    }
}

pub fn left_to_right_trajectory(y: &[TokenId]) -> Trajectory {
    let mut events: Vec<_> = y
        .iter()
        .enumerate()
        .map(|(pos, &token)| InsertionEvent::Insert { pos, token })
        .collect();
    events.push(InsertionEvent::Eos);
    Trajectory { events }
}

/// Converts an order over target positions into an insertion stream: each
/// event's position counts the already-inserted target positions to its left.
pub fn trajectory_from_order(y: &[TokenId], order: &[usize]) -> Trajectory {
    let mut placed = vec![false; y.len()];
    let mut events = Vec::with_capacity(order.len() + 1);
    for &i in order {
        let pos = placed[..i].iter().filter(|&&p| p).count();
        placed[i] = true;
        events.push(InsertionEvent::Insert { pos, token: y[i] });
    }
    events.push(InsertionEvent::Eos);
    Trajectory { events }
}

/// Uniformly random permutation of target positions turned into a trajectory.
pub fn sample_trajectory_uniform<R: Rng + ?Sized>(y: &[TokenId], rng: &mut R) -> Result<Trajectory> {
    if y.is_empty() {
        return Err(TrajectoryError::EmptyTarget);
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.shuffle(rng);
    Ok(trajectory_from_order(y, &order))
}

/// Draws one of `candidates` with probability proportional to
/// `exp(log_probs[i])`. Returns the index and its renormalized probability,
/// or `None` when every candidate has zero mass.
pub fn sample_renormalized<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> Option<(usize, f64)> {
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = log_probs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut pick = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            pick = i;
            break;
        }
        u -= w;
    }
    // Round-off can leave `u` past the end; never land on a zero-weight event.
    while weights[pick] == 0.0 {
        pick -= 1;
    }
    Some((pick, weights[pick] / total))
}

/// Samples a trajectory in T*(y) by restricting the model's step distribution
/// to the correct insertions and renormalizing. Also returns the renormalized
/// probability of every chosen event.
pub fn sample_trajectory_from_model<M, R>(
    y: &[TokenId],
    src: &[TokenId],
    model: &M,
    rng: &mut R,
) -> Result<(Trajectory, Vec<f64>)>
where
    M: StepModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut partial = Vec::new();
    let mut events = Vec::with_capacity(y.len() + 1);
    let mut probs = Vec::with_capacity(y.len() + 1);
    loop {
        let correct = correct_insertions(y, &partial)?;
        let dist = model.distribution(src, &partial)?;
        let lps: Vec<f64> = correct.iter().map(|&e| dist.log_prob(e)).collect();
        let (i, p) = sample_renormalized(&lps, rng).ok_or_else(|| TrajectoryError::DegenerateModel {
            partial: partial.clone(),
        })?;
        let ev = correct[i];
        events.push(ev);
        probs.push(p);
        if ev == InsertionEvent::Eos {
            break;
        }
        partial = apply_insertion(&partial, ev)?;
    }
    Ok((Trajectory { events }, probs))
}

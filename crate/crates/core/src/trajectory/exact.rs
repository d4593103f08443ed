use std::collections::BTreeMap;

use crate::tensor::log_sum_exp;

use super::{
    apply_insertion, correct_insertions, InsertionDistribution, InsertionEvent, Result, StepModel, TokenId, Trajectory,
    TrajectoryError,
};

pub const MAX_ENUMERATE_LEN: usize = 8;
pub const MAX_MARGINAL_LEN: usize = 16;
pub const MAX_BOUNDS_LEN: usize = 6;

fn guard(op: &'static str, y: &[TokenId], max: usize) -> Result<()> {
    if y.len() > max {
        return Err(TrajectoryError::TooLong { op, len: y.len(), max });
    }
    Ok(())
}

/// Every distinct event stream leading from the empty sequence to `y`.
pub fn enumerate_trajectories(y: &[TokenId]) -> Result<Vec<Trajectory>> {
    guard("enumerate_trajectories", y, MAX_ENUMERATE_LEN)?;
    let mut out = Vec::new();
    let mut events = Vec::with_capacity(y.len() + 1);
    walk(y, &mut Vec::new(), &mut events, &mut out)?;
    Ok(out)
}

fn walk(
    y: &[TokenId],
    partial: &mut Vec<TokenId>,
    events: &mut Vec<InsertionEvent>,
    out: &mut Vec<Trajectory>,
) -> Result<()> {
    for ev in correct_insertions(y, partial)? {
        events.push(ev);
        match ev {
            InsertionEvent::Eos => out.push(Trajectory { events: events.clone() }),
            InsertionEvent::Insert { pos, token } => {
                partial.insert(pos, token);
                walk(y, partial, events, out)?;
                partial.remove(pos);
            }
        }
        events.pop();
    }
    Ok(())
}

/// `Σ_t log p(τ_t | partial_t)` under a step model.
pub fn trajectory_log_prob<M: StepModel + ?Sized>(src: &[TokenId], traj: &Trajectory, model: &M) -> Result<f64> {
    let mut total = 0.0;
    for (partial, &ev) in traj.partials().iter().zip(traj.events()) {
        total += model.distribution(src, partial)?.log_prob(ev);
    }
    Ok(total)
}

/// `log p(y | src)` summed over every trajectory in T*(y), by dynamic
/// programming over the distinct subsequences of `y`.
pub fn exact_log_marginal<M: StepModel + ?Sized>(y: &[TokenId], src: &[TokenId], model: &M) -> Result<f64> {
    guard("exact_marginal", y, MAX_MARGINAL_LEN)?;
    // States of one length, keyed by token content; values are log-mass.
    let mut layer: BTreeMap<Vec<TokenId>, f64> = BTreeMap::from([(Vec::new(), 0.0)]);
    for _ in 0..y.len() {
        let mut next: BTreeMap<Vec<TokenId>, Vec<f64>> = BTreeMap::new();
        for (state, mass) in &layer {
            let dist = model.distribution(src, state)?;
            for ev in correct_insertions(y, state)? {
                let child = apply_insertion(state, ev)?;
                next.entry(child).or_default().push(mass + dist.log_prob(ev));
            }
        }
        layer = next
            .into_iter()
            .map(|(s, parts)| (s, log_sum_exp(parts.iter().copied())))
            .collect();
    }
    let mass = layer.get(y).copied().unwrap_or(f64::NEG_INFINITY);
    let eos = model.distribution(src, y)?.eos_log_prob();
    Ok(mass + eos)
}

/// `p(y | src)`; see [`exact_log_marginal`].
pub fn exact_marginal<M: StepModel + ?Sized>(y: &[TokenId], src: &[TokenId], model: &M) -> Result<f64> {
    exact_log_marginal(y, src, model).map(f64::exp)
}

/// The log-marginal and its two lower bounds, computed by full enumeration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    /// `log Σ_τ p(τ)`.
    pub marginal_logp: f64,
    /// `max_τ log p(τ)`.
    pub max_traj_logp: f64,
    /// `E_q[log p(τ)]` with `q` the stepwise-renormalized sampler of
    /// [`super::sample_trajectory_from_model`].
    pub expected_logp: f64,
}

pub fn exact_bounds<M: StepModel + ?Sized>(y: &[TokenId], src: &[TokenId], model: &M) -> Result<Bounds> {
    guard("exact_bounds", y, MAX_BOUNDS_LEN)?;
    let mut cache: BTreeMap<Vec<TokenId>, InsertionDistribution> = BTreeMap::new();
    let mut logps = Vec::new();
    let mut expected = 0.0;
    for traj in enumerate_trajectories(y)? {
        let (mut logp, mut logq) = (0.0, 0.0);
        for (partial, &ev) in traj.partials().iter().zip(traj.events()) {
            if !cache.contains_key(partial) {
                cache.insert(partial.clone(), model.distribution(src, partial)?);
            }
            let dist = &cache[partial];
            let correct: Vec<f64> = correct_insertions(y, partial)?
                .into_iter()
                .map(|e| dist.log_prob(e))
                .collect();
            let lp = dist.log_prob(ev);
            logp += lp;
            logq += lp - log_sum_exp(correct.iter().copied());
        }
        let q = logq.exp();
        if q > 0.0 {
            expected += q * logp;
        }
        logps.push(logp);
    }
    Ok(Bounds {
        marginal_logp: log_sum_exp(logps.iter().copied()),
        max_traj_logp: logps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        expected_logp: expected,
    })
}

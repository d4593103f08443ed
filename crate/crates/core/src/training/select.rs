//! Choosing the trajectory each training example is scored along.

use std::cmp::Ordering;

use rand::Rng;

use crate::model::{EncodedSources, InsertionModel};
use crate::trajectory::{
    apply_insertion, correct_insertions, sample_renormalized, InsertionDistribution, InsertionEvent, Result, StepModel,
    TokenId, Trajectory, TrajectoryError,
};

/// Step distributions for a batch of `(example index, partial output)`.
pub trait BatchScorer {
    fn score(&self, queries: &[(usize, &[TokenId])]) -> Result<Vec<InsertionDistribution>>;
}

/// Evaluation-mode neural scorer over pre-encoded sources.
pub struct NeuralScorer<'a> {
    pub model: &'a InsertionModel,
    pub enc: EncodedSources,
}

impl<'a> NeuralScorer<'a> {
    pub fn new(model: &'a InsertionModel, sources: &[&[TokenId]]) -> Result<Self> {
        let enc = model
            .encode_sources(sources)
            .map_err(|e| TrajectoryError::Model(e.to_string()))?;
        Ok(Self { model, enc })
    }
}

impl BatchScorer for NeuralScorer<'_> {
    fn score(&self, queries: &[(usize, &[TokenId])]) -> Result<Vec<InsertionDistribution>> {
        self.model
            .distributions(&self.enc, queries)
            .map_err(|e| TrajectoryError::Model(e.to_string()))
    }
}

/// Adapts any [`StepModel`] by scoring queries one at a time.
pub struct StepScorer<'a, M: ?Sized> {
    pub model: &'a M,
    pub sources: Vec<&'a [TokenId]>,
}

impl<M: StepModel + ?Sized> BatchScorer for StepScorer<'_, M> {
    fn score(&self, queries: &[(usize, &[TokenId])]) -> Result<Vec<InsertionDistribution>> {
        queries
            .iter()
            .map(|&(i, partial)| self.model.distribution(self.sources[i], partial))
            .collect()
    }
}

/// Samples one trajectory in T*(y) per target from the scorer's step
/// distributions restricted to the correct insertions. All targets advance
/// together, one batched scorer call per step.
pub fn sample_trajectories<S, R>(scorer: &S, targets: &[&[TokenId]], rng: &mut R) -> Result<Vec<Trajectory>>
where
    S: BatchScorer + ?Sized,
    R: Rng + ?Sized,
{
    let mut partials: Vec<Vec<TokenId>> = vec![Vec::new(); targets.len()];
    let mut events: Vec<Vec<InsertionEvent>> = vec![Vec::new(); targets.len()];
    let mut live: Vec<usize> = (0..targets.len()).collect();
    while !live.is_empty() {
        let queries: Vec<(usize, &[TokenId])> = live.iter().map(|&i| (i, partials[i].as_slice())).collect();
        let dists = scorer.score(&queries)?;
        let mut next = Vec::with_capacity(live.len());
        for (&i, d) in live.iter().zip(&dists) {
            let correct = correct_insertions(targets[i], &partials[i])?;
            let lps: Vec<f64> = correct.iter().map(|&e| d.log_prob(e)).collect();
            let (k, _) = sample_renormalized(&lps, rng).ok_or_else(|| TrajectoryError::DegenerateModel {
                partial: partials[i].clone(),
            })?;
            let ev = correct[k];
            events[i].push(ev);
            if ev != InsertionEvent::Eos {
                partials[i] = apply_insertion(&partials[i], ev)?;
                next.push(i);
            }
        }
        live = next;
    }
    events.into_iter().map(Trajectory::new).collect()
}

#[derive(Clone)]
struct Hyp {
    partial: Vec<TokenId>,
    events: Vec<InsertionEvent>,
    logp: f64,
}

/// Beam search over T*(y) for every target: only correct insertions are
/// expanded, hypotheses are ranked by cumulative log-probability, and the
/// best complete trajectory is returned.
pub fn argmax_trajectories<S>(scorer: &S, targets: &[&[TokenId]], beam: usize) -> Result<Vec<Trajectory>>
where
    S: BatchScorer + ?Sized,
{
    let beam = beam.max(1);
    let start = Hyp {
        partial: Vec::new(),
        events: Vec::new(),
        logp: 0.0,
    };
    let mut beams: Vec<Vec<Hyp>> = vec![vec![start]; targets.len()];
    let mut best: Vec<Option<Hyp>> = vec![None; targets.len()];
    loop {
        let queries: Vec<(usize, &[TokenId])> = beams
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.iter().map(move |h| (i, h.partial.as_slice())))
            .collect();
        if queries.is_empty() {
            break;
        }
        let dists = scorer.score(&queries)?;
        let mut cursor = 0;
        for (i, b) in beams.iter_mut().enumerate() {
            let mut cands: Vec<(f64, usize, InsertionEvent)> = Vec::new();
            for (rank, h) in b.iter().enumerate() {
                let d = &dists[cursor + rank];
                for ev in correct_insertions(targets[i], &h.partial)? {
                    let lp = h.logp + d.log_prob(ev);
                    if lp > f64::NEG_INFINITY {
                        cands.push((lp, rank, ev));
                    }
                }
            }
            cursor += b.len();
            if cands.is_empty() && !b.is_empty() && best[i].is_none() {
                return Err(TrajectoryError::DegenerateModel {
                    partial: b[0].partial.clone(),
                });
            }
            cands.sort_by(|x, y| {
                y.0.partial_cmp(&x.0)
                    .unwrap_or(Ordering::Equal)
                    .then(x.1.cmp(&y.1))
                    .then(x.2.cmp(&y.2))
            });
            let mut next = Vec::with_capacity(beam);
            for (lp, rank, ev) in cands {
                let parent = &b[rank];
                let mut events = parent.events.clone();
                events.push(ev);
                if ev == InsertionEvent::Eos {
                    if best[i].as_ref().is_none_or(|h| lp > h.logp) {
                        best[i] = Some(Hyp {
                            partial: parent.partial.clone(),
                            events,
                            logp: lp,
                        });
                    }
                } else if next.len() < beam {
                    next.push(Hyp {
                        partial: apply_insertion(&parent.partial, ev)?,
                        events,
                        logp: lp,
                    });
                }
            }
            *b = next;
        }
    }
    best.into_iter()
        .map(|h| Trajectory::new(h.expect("every target finishes").events))
        .collect()
}

/// Single-example form of [`argmax_trajectories`].
pub fn argmax_trajectory<M: StepModel + ?Sized>(
    model: &M,
    src: &[TokenId],
    y: &[TokenId],
    beam: usize,
) -> Result<Trajectory> {
    let scorer = StepScorer {
        model,
        sources: vec![src],
    };
    Ok(argmax_trajectories(&scorer, &[y], beam)?.remove(0))
}

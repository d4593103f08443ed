//! Greedy and beam decoding over insertion events, for both the insertion
//! model and the left-to-right baseline.

mod bench;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{BaselineModel, BaselineState, EncodedSources, InsertionModel, KvCache, Model, Result};
use crate::tasks::{Vocab, STOP};
use crate::trajectory::{apply_insertion, InsertionDistribution, InsertionEvent, StepModel, TokenId, Trajectory};

pub use bench::{bench_decode, fit_log_log_slope, BenchRow, BenchSummary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    Off,
    /// Divide by the number of insertions (at least one).
    #[default]
    Steps,
}

impl LengthNorm {
    pub fn score(self, logp: f64, steps: usize) -> f64 {
        match self {
            LengthNorm::Off => logp,
            LengthNorm::Steps => logp / steps.max(1) as f64,
        }
    }

    /// Upper bound on the final score of a hypothesis with log-probability
    /// `logp` that may still grow to at most `max_steps` insertions.
    fn optimistic(self, logp: f64, max_steps: usize) -> f64 {
        match self {
            LengthNorm::Off => logp,
            LengthNorm::Steps if logp < 0.0 => logp / max_steps.max(1) as f64,
            LengthNorm::Steps => 0.0,
        }
    }
}

impl fmt::Display for LengthNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthNorm::Off => "off",
            LengthNorm::Steps => "steps",
        })
    }
}

impl FromStr for LengthNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(LengthNorm::Off),
            "steps" => Ok(LengthNorm::Steps),
            _ => Err(format!("unknown length normalization `{s}` (expected off or steps)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Bound on decoding events, `Eos` included.
    pub max_steps: usize,
    pub length_norm: LengthNorm,
    /// Forces exactly this many insertions before `Eos`.
    pub force_insertions: Option<usize>,
}

impl DecodeConfig {
    pub fn new(beam: usize, max_steps: usize) -> Self {
        Self {
            beam,
            max_steps,
            length_norm: LengthNorm::Steps,
            force_insertions: None,
        }
    }

    /// Beam `beam` with the default step bound of twice the model's length limit.
    pub fn for_model<M: Model>(model: &M, beam: usize) -> Self {
        Self::new(beam, 2 * model.config().max_len)
    }
}

/// A partial or finished decoding path.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub partial: Vec<TokenId>,
    pub events: Vec<InsertionEvent>,
    pub logp: f64,
    pub finished: bool,
    /// Insertions so far.
    pub steps: usize,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            partial: Vec::new(),
            events: Vec::new(),
            logp: 0.0,
            finished: false,
            steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub events: Vec<InsertionEvent>,
    pub logp: f64,
    pub score: f64,
    /// No hypothesis emitted `Eos` within the step bound.
    pub truncated: bool,
}

impl Decoded {
    fn from_hyp(h: &Hypothesis, norm: LengthNorm, truncated: bool) -> Self {
        Self {
            tokens: h.partial.clone(),
            events: h.events.clone(),
            logp: h.logp,
            score: norm.score(h.logp, h.steps),
            truncated,
        }
    }

    pub fn trajectory(&self) -> Option<Trajectory> {
        Trajectory::new(self.events.clone()).ok()
    }

    /// `tokens TAB trajectory TAB score`; a truncated path has no `EOS`.
    pub fn to_line(&self, vocab: &Vocab) -> String {
        let traj = self
            .events
            .iter()
            .map(|ev| match *ev {
                InsertionEvent::Insert { pos, token } => format!("{pos}:{}", vocab.token(token)),
                InsertionEvent::Eos => "EOS".into(),
            })
            .collect::<Vec<_>>()
            .join(" ");
        format!("{}\t{}\t{}", vocab.decode(&self.tokens), traj, self.score)
    }
}

/// Scored events of one state and the data needed to build its children.
pub type Expansion<A> = (Vec<(InsertionEvent, f64)>, A);

/// A decoder state space: each state exposes its partial output and the
/// log-probabilities of its next events.
pub trait Expand {
    type State: Clone;
    type Aux;

    fn initial(&self) -> Self::State;
    /// Per state, every event with finite log-probability in canonical
    /// order, plus data needed to build children.
    fn expand(&self, states: &[&Self::State]) -> Result<Vec<Expansion<Self::Aux>>>;
    fn child(&self, state: &Self::State, aux: &Self::Aux, ev: InsertionEvent) -> Self::State;
    /// Longest partial that may still receive an insertion.
    fn max_insert_len(&self) -> usize;
}

fn finite_events(
    dist: &InsertionDistribution,
    partial_len: usize,
    max_insert_len: usize,
) -> Vec<(InsertionEvent, f64)> {
    dist.events()
        .filter(|&(ev, lp)| lp.is_finite() && (ev == InsertionEvent::Eos || partial_len <= max_insert_len))
        .collect()
}

/// Any per-partial [`StepModel`] with a fixed source.
pub struct StepModelExpand<'a, M: ?Sized> {
    pub model: &'a M,
    pub src: &'a [TokenId],
    pub max_insert_len: usize,
}

impl<M: StepModel + ?Sized> Expand for StepModelExpand<'_, M> {
    type State = Vec<TokenId>;
    type Aux = ();

    fn initial(&self) -> Vec<TokenId> {
        Vec::new()
    }

    fn expand(&self, states: &[&Vec<TokenId>]) -> Result<Vec<(Vec<(InsertionEvent, f64)>, ())>> {
        states
            .iter()
            .map(|p| {
                let d = self.model.distribution(self.src, p)?;
                Ok((finite_events(&d, p.len(), self.max_insert_len), ()))
            })
            .collect()
    }

    fn child(&self, state: &Vec<TokenId>, _: &(), ev: InsertionEvent) -> Vec<TokenId> {
        apply_insertion(state, ev).expect("expanded events are in range")
    }

    fn max_insert_len(&self) -> usize {
        self.max_insert_len
    }
}

/// The insertion model with cached encoder outputs for one source; all
/// states of a beam step are scored in one batch.
pub struct InsertionExpand<'a> {
    model: &'a InsertionModel,
    enc: EncodedSources,
}

impl<'a> InsertionExpand<'a> {
    pub fn new(model: &'a InsertionModel, src: &[TokenId]) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.encode_sources(&[src])?,
        })
    }
}

impl Expand for InsertionExpand<'_> {
    type State = Vec<TokenId>;
    type Aux = ();

    fn initial(&self) -> Vec<TokenId> {
        Vec::new()
    }

    fn expand(&self, states: &[&Vec<TokenId>]) -> Result<Vec<(Vec<(InsertionEvent, f64)>, ())>> {
        let queries: Vec<(usize, &[TokenId])> = states.iter().map(|p| (0, p.as_slice())).collect();
        let dists = self.model.distributions(&self.enc, &queries)?;
        Ok(dists
            .iter()
            .zip(states)
            .map(|(d, p)| (finite_events(d, p.len(), self.max_insert_len()), ()))
            .collect())
    }

    fn child(&self, state: &Vec<TokenId>, _: &(), ev: InsertionEvent) -> Vec<TokenId> {
        apply_insertion(state, ev).expect("expanded events are in range")
    }

    fn max_insert_len(&self) -> usize {
        self.model.config().max_len - 2
    }
}

/// The left-to-right baseline: every insert appends, the stop token is `Eos`.
pub struct BaselineExpand<'a> {
    model: &'a BaselineModel,
    enc: EncodedSources,
}

impl<'a> BaselineExpand<'a> {
    pub fn new(model: &'a BaselineModel, src: &[TokenId]) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.encode_sources(&[src])?,
        })
    }
}

fn baseline_events(log_probs: &[f64], len: usize, can_insert: bool) -> Vec<(InsertionEvent, f64)> {
    let mut out: Vec<(InsertionEvent, f64)> = if can_insert {
        log_probs
            .iter()
            .enumerate()
            .filter(|&(t, lp)| t != STOP as usize && lp.is_finite())
            .map(|(t, &lp)| (InsertionEvent::insert(len, t as TokenId), lp))
            .collect()
    } else {
        Vec::new()
    };
    out.push((InsertionEvent::Eos, log_probs[STOP as usize]));
    out
}

impl Expand for BaselineExpand<'_> {
    type State = BaselineState;
    type Aux = KvCache;

    fn initial(&self) -> BaselineState {
        self.model.start_state()
    }

    fn expand(&self, states: &[&BaselineState]) -> Result<Vec<(Vec<(InsertionEvent, f64)>, KvCache)>> {
        let batch: Vec<(usize, &BaselineState)> = states.iter().map(|s| (0, *s)).collect();
        let steps = self.model.step(&self.enc, &batch)?;
        Ok(steps
            .into_iter()
            .zip(states)
            .map(|(st, s)| {
                let len = s.output.len();
                (
                    baseline_events(&st.log_probs, len, len <= self.max_insert_len()),
                    st.cache,
                )
            })
            .collect())
    }

    fn child(&self, state: &BaselineState, aux: &KvCache, ev: InsertionEvent) -> BaselineState {
        match ev {
            InsertionEvent::Insert { token, .. } => state.extend(aux, token),
            InsertionEvent::Eos => state.clone(),
        }
    }

    fn max_insert_len(&self) -> usize {
        self.model.config().max_len - 2
    }
}

/// Result of a beam search: the winner and every finished hypothesis, best
/// first.
#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Decoded,
    pub finished: Vec<Decoded>,
}

struct Finished {
    hyp: Hypothesis,
    score: f64,
    finish_step: usize,
}

fn finished_order(a: &Finished, b: &Finished) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.finish_step.cmp(&b.finish_step))
        .then_with(|| a.hyp.events.cmp(&b.hyp.events))
}

/// Beam search over insertion events. Every step ranks all one-event
/// extensions of the beam by cumulative log-probability (ties: parent rank,
/// then canonical event order) and keeps the best `beam`. Extensions ending
/// in `Eos` leave the beam and are ranked by their normalized score (ties:
/// earlier finish, then the smaller trajectory).
pub fn beam_search<E: Expand>(expander: &E, cfg: &DecodeConfig) -> Result<BeamResult> {
    assert!(cfg.beam >= 1, "beam must be positive");
    let mut beam = vec![(expander.initial(), Hypothesis::root())];
    let mut finished: Vec<Finished> = Vec::new();
    let max_insertions = match cfg.force_insertions {
        Some(n) => n,
        None => cfg.max_steps.saturating_sub(1),
    };
    for step in 0..cfg.max_steps {
        let states: Vec<&E::State> = beam.iter().map(|(s, _)| s).collect();
        let expanded = expander.expand(&states)?;
        let mut cands: Vec<(f64, usize, InsertionEvent)> = Vec::new();
        for (rank, ((events, _), (_, hyp))) in expanded.iter().zip(&beam).enumerate() {
            for &(ev, lp) in events {
                let allowed = match (cfg.force_insertions, ev) {
                    (Some(n), InsertionEvent::Eos) => hyp.steps == n,
                    (Some(n), InsertionEvent::Insert { .. }) => hyp.steps < n,
                    (None, _) => true,
                };
                if allowed {
                    cands.push((hyp.logp + lp, rank, ev));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (logp, rank, ev) in cands {
            let (state, parent) = &beam[rank];
            let mut hyp = parent.clone();
            hyp.logp = logp;
            hyp.events.push(ev);
            if ev == InsertionEvent::Eos {
                hyp.finished = true;
                let score = cfg.length_norm.score(logp, hyp.steps);
                finished.push(Finished {
                    hyp,
                    score,
                    finish_step: step,
                });
            } else {
                hyp.partial = apply_insertion(&hyp.partial, ev)?;
                hyp.steps += 1;
                next.push((expander.child(state, &expanded[rank].1, ev), hyp));
            }
        }
        beam = next;
        if beam.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|f| f.score).fold(f64::NEG_INFINITY, f64::max);
        let best_open = beam
            .iter()
            .map(|(_, h)| cfg.length_norm.optimistic(h.logp, max_insertions))
            .fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_open {
            break;
        }
    }
    if finished.is_empty() {
        let (_, best) = beam
            .iter()
            .max_by(|a, b| a.1.logp.total_cmp(&b.1.logp).then_with(|| b.1.events.cmp(&a.1.events)))
            .expect("beam search without finished hypotheses keeps a beam");
        let d = Decoded::from_hyp(best, cfg.length_norm, true);
        return Ok(BeamResult {
            best: d.clone(),
            finished: Vec::new(),
        });
    }
    finished.sort_by(finished_order);
    let finished: Vec<Decoded> = finished
        .iter()
        .map(|f| Decoded::from_hyp(&f.hyp, cfg.length_norm, false))
        .collect();
    Ok(BeamResult {
        best: finished[0].clone(),
        finished,
    })
}

pub fn beam_decode(model: &InsertionModel, src: &[TokenId], cfg: &DecodeConfig) -> Result<Decoded> {
    Ok(beam_search(&InsertionExpand::new(model, src)?, cfg)?.best)
}

pub fn baseline_beam_decode(model: &BaselineModel, src: &[TokenId], cfg: &DecodeConfig) -> Result<Decoded> {
    Ok(beam_search(&BaselineExpand::new(model, src)?, cfg)?.best)
}

/// Repeatedly applies the most probable event until `Eos` or `max_steps`.
pub fn greedy_decode<M: StepModel + ?Sized>(
    model: &M,
    src: &[TokenId],
    max_steps: usize,
    max_insert_len: usize,
) -> Result<Decoded> {
    let mut hyp = Hypothesis::root();
    for _ in 0..max_steps {
        let dist = model.distribution(src, &hyp.partial)?;
        let (ev, lp) = if hyp.partial.len() <= max_insert_len {
            dist.argmax()
        } else {
            (InsertionEvent::Eos, dist.eos_log_prob())
        };
        debug_assert!(dist
            .events()
            .all(|(_, other)| other <= lp || hyp.partial.len() > max_insert_len));
        hyp.logp += lp;
        hyp.events.push(ev);
        if ev == InsertionEvent::Eos {
            hyp.finished = true;
            return Ok(Decoded::from_hyp(&hyp, LengthNorm::Steps, false));
        }
        hyp.partial = apply_insertion(&hyp.partial, ev)?;
        hyp.steps += 1;
    }
    Ok(Decoded::from_hyp(&hyp, LengthNorm::Steps, true))
}

/// Greedy decoding of many sources at once, one batched forward per step.
pub fn greedy_decode_batch(model: &InsertionModel, sources: &[&[TokenId]], max_steps: usize) -> Result<Vec<Decoded>> {
    let enc = model.encode_sources(sources)?;
    let max_insert_len = model.config().max_len - 2;
    let mut hyps: Vec<Hypothesis> = sources.iter().map(|_| Hypothesis::root()).collect();
    for _ in 0..max_steps {
        let open: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].finished).collect();
        if open.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[TokenId])> = open.iter().map(|&i| (i, hyps[i].partial.as_slice())).collect();
        let dists = model.distributions(&enc, &queries)?;
        for (&i, dist) in open.iter().zip(&dists) {
            let h = &mut hyps[i];
            let (ev, lp) = if h.partial.len() <= max_insert_len {
                dist.argmax()
            } else {
                (InsertionEvent::Eos, dist.eos_log_prob())
            };
            h.logp += lp;
            h.events.push(ev);
            if ev == InsertionEvent::Eos {
                h.finished = true;
            } else {
                h.partial = apply_insertion(&h.partial, ev)?;
                h.steps += 1;
            }
        }
    }
    Ok(hyps
        .iter()
        .map(|h| Decoded::from_hyp(h, LengthNorm::Steps, !h.finished))
        .collect())
}

/// Greedy left-to-right decoding of many sources with incremental caches.
pub fn baseline_greedy_decode_batch(
    model: &BaselineModel,
    sources: &[&[TokenId]],
    max_steps: usize,
) -> Result<Vec<Decoded>> {
    let enc = model.encode_sources(sources)?;
    let max_insert_len = model.config().max_len - 2;
    let mut hyps: Vec<Hypothesis> = sources.iter().map(|_| Hypothesis::root()).collect();
    let mut states: Vec<BaselineState> = sources.iter().map(|_| model.start_state()).collect();
    for _ in 0..max_steps {
        let open: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].finished).collect();
        if open.is_empty() {
            break;
        }
        let batch: Vec<(usize, &BaselineState)> = open.iter().map(|&i| (i, &states[i])).collect();
        let steps = model.step(&enc, &batch)?;
        for (&i, st) in open.iter().zip(steps) {
            let h = &mut hyps[i];
            let len = h.partial.len();
            let events = baseline_events(&st.log_probs, len, len <= max_insert_len);
            let (ev, lp) = events
                .iter()
                .copied()
                .fold(None, |best: Option<(InsertionEvent, f64)>, c| match best {
                    Some(b) if b.1 >= c.1 => Some(b),
                    _ => Some(c),
                })
                .expect("stop is always available");
            h.logp += lp;
            h.events.push(ev);
            match ev {
                InsertionEvent::Eos => h.finished = true,
                InsertionEvent::Insert { token, .. } => {
                    h.partial.push(token);
                    h.steps += 1;
                    states[i] = states[i].extend(&st.cache, token);
                }
            }
        }
    }
    Ok(hyps
        .iter()
        .map(|h| Decoded::from_hyp(h, LengthNorm::Steps, !h.finished))
        .collect())
}

/// Either decoder behind one interface.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Insertion(InsertionModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = crate::tensor::Checkpoint::load(path)?;
        Ok(match crate::model::checkpoint_kind(&ckpt)? {
            crate::model::ModelKind::Insertion => AnyModel::Insertion(InsertionModel::from_checkpoint(&ckpt)?),
            crate::model::ModelKind::Baseline => AnyModel::Baseline(BaselineModel::from_checkpoint(&ckpt)?),
        })
    }

    pub fn config(&self) -> &crate::model::ModelConfig {
        match self {
            AnyModel::Insertion(m) => m.config(),
            AnyModel::Baseline(m) => m.config(),
        }
    }

    pub fn decode(&self, src: &[TokenId], cfg: &DecodeConfig) -> Result<Decoded> {
        match self {
            AnyModel::Insertion(m) => beam_decode(m, src, cfg),
            AnyModel::Baseline(m) => baseline_beam_decode(m, src, cfg),
        }
    }

    pub fn beam(&self, src: &[TokenId], cfg: &DecodeConfig) -> Result<BeamResult> {
        match self {
            AnyModel::Insertion(m) => beam_search(&InsertionExpand::new(m, src)?, cfg),
            AnyModel::Baseline(m) => beam_search(&BaselineExpand::new(m, src)?, cfg),
        }
    }

    pub fn greedy_batch(&self, sources: &[&[TokenId]], max_steps: usize) -> Result<Vec<Decoded>> {
        match self {
            AnyModel::Insertion(m) => greedy_decode_batch(m, sources, max_steps),
            AnyModel::Baseline(m) => baseline_greedy_decode_batch(m, sources, max_steps),
        }
    }
}

/// Decodes every source, splitting the inputs over `workers` threads. The
/// output order follows the input order.
pub fn decode_all(
    model: &AnyModel,
    sources: &[Vec<TokenId>],
    cfg: &DecodeConfig,
    workers: usize,
) -> Result<Vec<Decoded>> {
    let workers = workers.max(1).min(sources.len().max(1));
    let chunk = sources.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Decoded>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|src| model.decode(src, cfg))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// How often distinct finished trajectories in one beam produce the same
/// output sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DuplicateAudit {
    pub sentences: usize,
    pub sentences_with_duplicates: usize,
    pub duplicate_pairs: usize,
}

impl DuplicateAudit {
    pub fn add(&mut self, finished: &[Decoded]) {
        self.sentences += 1;
        let mut seen = BTreeSet::new();
        let mut dups = 0;
        for d in finished {
            if !seen.insert(d.tokens.clone()) {
                dups += 1;
            }
        }
        if dups > 0 {
            self.sentences_with_duplicates += 1;
        }
        self.duplicate_pairs += dups;
    }
}

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tasks::{SLOT, STOP};
use crate::tensor::{AttnSegment, Bound, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var, MASKED_LOG_PROB};
use crate::trajectory::{InsertionDistribution, InsertionEvent, StepModel, TokenId, Trajectory, TrajectoryError};

use super::layers::{Decoder, DecoderBatch, Dropout, EncodedBatch, Encoder, Init};
use super::{check_len, check_tokens, checkpoint_kind, Model, ModelConfig, ModelError, ModelKind, Result};

/// Token mask of the insertion head: reserved tokens are never inserted, and
/// the stop token is only allowed in the last slot of each segment.
pub fn insertion_token_mask(segments: &[Range<usize>], vocab: usize) -> Vec<bool> {
    let rows = segments.last().map_or(0, |s| s.end);
    let mut mask = vec![false; rows * vocab];
    for seg in segments {
        for r in seg.clone() {
            for t in crate::tasks::NUM_RESERVED..vocab {
                mask[r * vocab + t] = true;
            }
        }
        mask[(seg.end - 1) * vocab + STOP as usize] = true;
    }
    mask
}

/// Factored head: `log p(pos) + log p(token | pos)` for every slot row of `h`.
/// Positions are normalized within each segment, tokens within each row.
pub fn insertion_head(
    tape: &mut Tape<'_>,
    h: Var,
    w_loc: Var,
    w_tok: Var,
    segments: Vec<Range<usize>>,
    mask: Vec<bool>,
) -> crate::tensor::Result<Var> {
    let rows = tape.value(h).shape()[0];
    let d = tape.value(w_loc).numel();
    let w = tape.reshape(w_loc, vec![d, 1])?;
    let pos = tape.matmul(h, w)?;
    let pos = tape.reshape(pos, vec![rows])?;
    let pos = tape.segment_log_softmax(pos, segments)?;
    let tok = tape.matmul(h, w_tok)?;
    let tok = tape.masked_log_softmax(tok, mask)?;
    tape.add_col_vector(tok, pos)
}

/// Joint log-probability grid for a batch of partial outputs.
#[derive(Clone, Debug)]
pub struct InsertionOutput {
    /// `[rows, vocab]`; query `q` owns rows `segments[q]`, one per slot.
    pub joint: Var,
    pub segments: Vec<Range<usize>>,
    pub vocab: usize,
}

impl InsertionOutput {
    /// Flat index into `joint` of an event of query `q`, or `None` if the
    /// event is impossible.
    pub fn event_index(&self, q: usize, ev: InsertionEvent) -> Option<usize> {
        let seg = &self.segments[q];
        match ev {
            InsertionEvent::Eos => Some((seg.end - 1) * self.vocab + STOP as usize),
            InsertionEvent::Insert { pos, token } => {
                let t = token as usize;
                (pos < seg.len() && t < self.vocab && t >= crate::tasks::NUM_RESERVED)
                    .then(|| (seg.start + pos) * self.vocab + t)
            }
        }
    }

    pub fn distribution(&self, tape: &Tape<'_>, q: usize) -> InsertionDistribution {
        let seg = self.segments[q].clone();
        let data = tape.value(self.joint).data();
        let v = self.vocab;
        let eos = data[(seg.end - 1) * v + STOP as usize];
        let grid = data[seg.start * v..seg.end * v]
            .iter()
            .enumerate()
            .map(|(i, &lp)| {
                if i % v == STOP as usize || lp <= MASKED_LOG_PROB {
                    f64::NEG_INFINITY
                } else {
                    lp
                }
            })
            .collect();
        InsertionDistribution::new(seg.len(), v, grid, eos)
    }
}

/// Encoder-side cross-attention keys and values of a batch of sources,
/// computed once and reused across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedSources {
    pub ranges: Vec<Range<usize>>,
    pub cross: Vec<(Tensor, Tensor)>,
}

impl EncodedSources {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub(crate) fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<(Var, Var)> {
        self.cross
            .iter()
            .map(|(k, v)| (tape.constant_ref(k), tape.constant_ref(v)))
            .collect()
    }
}

pub(crate) fn encode_sources(
    cfg: &ModelConfig,
    params: &ParamStore,
    encoder: &Encoder,
    decoder: &Decoder,
    sources: &[&[TokenId]],
) -> Result<EncodedSources> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let enc = encode_checked(cfg, encoder, &mut tape, &p, sources, &mut None)?;
    let cross = decoder.cross_kv(&mut tape, &p, enc.memory)?;
    Ok(EncodedSources {
        ranges: enc.ranges,
        cross: cross
            .into_iter()
            .map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
            .collect(),
    })
}

pub(crate) fn encode_checked(
    cfg: &ModelConfig,
    encoder: &Encoder,
    tape: &mut Tape<'_>,
    p: &Bound,
    sources: &[&[TokenId]],
    drop: &mut Option<Dropout<'_>>,
) -> Result<EncodedBatch> {
    let mut ids = Vec::with_capacity(sources.len());
    for src in sources {
        check_len("source", src.len(), cfg.max_len)?;
        check_tokens(src, cfg.vocab_size)?;
        ids.push(src.iter().map(|&t| t as usize).collect::<Vec<_>>());
    }
    let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    encoder.forward(tape, p, &refs, drop)
}

pub(crate) fn check_data_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    check_tokens(tokens, vocab)?;
    match tokens.iter().find(|&&t| crate::tasks::Vocab::is_reserved(t)) {
        Some(&t) => Err(ModelError::Config(format!(
            "reserved token id {t} in a target sequence"
        ))),
        None => Ok(()),
    }
}

/// Encoder plus non-causal insertion decoder with the factored head.
#[derive(Clone, Debug)]
pub struct InsertionModel {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    w_loc: ParamId,
    w_tok: ParamId,
}

impl Model for InsertionModel {
    const KIND: ModelKind = ModelKind::Insertion;

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl InsertionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let encoder = Encoder::new(&mut init, &cfg);
        let decoder = Decoder::new(&mut init, &cfg);
        let d = cfg.d_model;
        let loc_scale = (6.0 / (d + 1) as f64).sqrt();
        let w_loc = Tensor::uniform(&[d], loc_scale, init.rng);
        let w_loc = init.store.add("head.w_loc", w_loc);
        let w_tok = init.xavier("head.w_tok".into(), d, cfg.vocab_size);
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            w_loc,
            w_tok,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if checkpoint_kind(ckpt)? != ModelKind::Insertion {
            return Err(ModelError::Config("checkpoint holds a baseline model".into()));
        }
        let mut m = Self::new(ModelConfig::from_meta(ckpt)?, 0)?;
        ckpt.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn w_loc(&self) -> ParamId {
        self.w_loc
    }

    pub fn w_tok(&self) -> ParamId {
        self.w_tok
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        sources: &[&[TokenId]],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<EncodedBatch> {
        encode_checked(&self.cfg, &self.encoder, tape, p, sources, drop)
    }

    pub fn cross_kv(&self, tape: &mut Tape<'_>, p: &Bound, memory: Var) -> Result<Vec<(Var, Var)>> {
        self.decoder.cross_kv(tape, p, memory)
    }

    /// Joint grids for `queries`, each a source index into `sources` and a
    /// partial output. Each partial is decoded with a trailing slot sentinel
    /// and freshly computed positions.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        sources: &[Range<usize>],
        cross: &[(Var, Var)],
        queries: &[(usize, &[TokenId])],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<InsertionOutput> {
        let mut batch = DecoderBatch::default();
        let mut segments = Vec::with_capacity(queries.len());
        for &(s, partial) in queries {
            check_len("partial output", partial.len() + 1, self.cfg.max_len)?;
            check_tokens(partial, self.cfg.vocab_size)?;
            let start = batch.ids.len();
            batch.ids.extend(partial.iter().map(|&t| t as usize));
            batch.ids.push(SLOT as usize);
            batch.positions.extend(0..=partial.len());
            let rows = start..batch.ids.len();
            batch.self_segments.push(AttnSegment {
                queries: rows.clone(),
                keys: rows.clone(),
                causal: false,
            });
            batch.cross_segments.push(AttnSegment {
                queries: rows.clone(),
                keys: sources[s].clone(),
                causal: false,
            });
            segments.push(rows);
        }
        let h = self.decoder.forward(tape, p, &batch, cross, drop)?;
        let mask = insertion_token_mask(&segments, self.cfg.vocab_size);
        let joint = insertion_head(tape, h, p.var(self.w_loc), p.var(self.w_tok), segments.clone(), mask)?;
        Ok(InsertionOutput {
            joint,
            segments,
            vocab: self.cfg.vocab_size,
        })
    }

    pub fn encode_sources(&self, sources: &[&[TokenId]]) -> Result<EncodedSources> {
        encode_sources(&self.cfg, &self.params, &self.encoder, &self.decoder, sources)
    }

    /// Evaluation-mode distributions for a batch of partial outputs.
    pub fn distributions(
        &self,
        enc: &EncodedSources,
        queries: &[(usize, &[TokenId])],
    ) -> Result<Vec<InsertionDistribution>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let cross = enc.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &enc.ranges, &cross, queries, &mut None)?;
        Ok((0..queries.len()).map(|q| out.distribution(&tape, q)).collect())
    }

    pub fn insertion_distribution(&self, src: &[TokenId], partial: &[TokenId]) -> Result<InsertionDistribution> {
        let enc = self.encode_sources(&[src])?;
        Ok(self.distributions(&enc, &[(0, partial)])?.remove(0))
    }

    /// Differentiable `Σ_t log p(τ_t | partial_t)`, all steps in one batch.
    pub fn trajectory_log_prob(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        src: &[TokenId],
        traj: &Trajectory,
    ) -> Result<Var> {
        let enc = self.encode(tape, p, &[src], &mut None)?;
        let cross = self.cross_kv(tape, p, enc.memory)?;
        let partials = traj.partials();
        let queries: Vec<(usize, &[TokenId])> = partials.iter().map(|x| (0, x.as_slice())).collect();
        let out = self.forward(tape, p, &enc.ranges, &cross, &queries, &mut None)?;
        let mut picks = Vec::with_capacity(queries.len());
        for (q, &ev) in traj.events().iter().enumerate() {
            if let InsertionEvent::Insert { token, .. } = ev {
                check_data_tokens(&[token], self.cfg.vocab_size)?;
            }
            let idx = out
                .event_index(q, ev)
                .ok_or(TrajectoryError::Malformed(format!("impossible event {ev:?}")))?;
            picks.push(vec![idx]);
        }
        let steps = tape.log_sum_exp_groups(out.joint, picks)?;
        Ok(tape.sum(steps)?)
    }

    pub fn trajectory_log_prob_value(&self, src: &[TokenId], traj: &Trajectory) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let lp = self.trajectory_log_prob(&mut tape, &p, src, traj)?;
        Ok(tape.value(lp).item())
    }
}

impl StepModel for InsertionModel {
    fn distribution(&self, src: &[TokenId], partial: &[TokenId]) -> crate::trajectory::Result<InsertionDistribution> {
        self.insertion_distribution(src, partial)
            .map_err(|e| TrajectoryError::Model(e.to_string()))
    }
}

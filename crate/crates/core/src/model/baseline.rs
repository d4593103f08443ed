use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tasks::{BOS, NUM_RESERVED, STOP};
use crate::tensor::{AttnSegment, Bound, Checkpoint, ParamId, ParamStore, Tape, Var, MASKED_LOG_PROB};
use crate::trajectory::TokenId;

use super::insertion::{check_data_tokens, encode_checked, encode_sources, EncodedSources};
use super::layers::{Decoder, DecoderBatch, Dropout, EncodedBatch, Encoder, Init, KvCache};
use super::{check_len, checkpoint_kind, Model, ModelConfig, ModelError, ModelKind, Result};

/// Standard encoder-decoder that emits the target left to right and ends
/// with the stop token.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    w_out: ParamId,
}

/// Teacher-forced next-token log-probabilities of a batch.
#[derive(Clone, Debug)]
pub struct BaselineOutput {
    /// `[rows, vocab]`; row `segments[q].start + i` predicts token `i` of
    /// target `q`, the last row of a segment predicts the stop token.
    pub log_probs: Var,
    pub segments: Vec<Range<usize>>,
    pub vocab: usize,
}

/// A left-to-right prefix under incremental decoding.
#[derive(Clone, Debug)]
pub struct BaselineState {
    cache: KvCache,
    pub output: Vec<TokenId>,
}

impl BaselineState {
    fn next_input(&self) -> TokenId {
        self.output.last().copied().unwrap_or(BOS)
    }

    /// Extends the prefix by `token` using the cache produced when scoring it.
    pub fn extend(&self, cache: &KvCache, token: TokenId) -> Self {
        let mut output = self.output.clone();
        output.push(token);
        Self {
            cache: cache.clone(),
            output,
        }
    }
}

/// Next-token log-probabilities of one prefix and the cache that includes
/// the prefix's last token.
#[derive(Clone, Debug)]
pub struct BaselineStep {
    pub log_probs: Vec<f64>,
    pub cache: KvCache,
}

fn output_mask(rows: usize, vocab: usize) -> Vec<bool> {
    (0..rows * vocab)
        .map(|i| {
            let t = i % vocab;
            t >= NUM_RESERVED || t == STOP as usize
        })
        .collect()
}

impl Model for BaselineModel {
    const KIND: ModelKind = ModelKind::Baseline;

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

impl BaselineModel {
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
        let w_out = init.xavier("head.w_out".into(), cfg.d_model, cfg.vocab_size);
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            w_out,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if checkpoint_kind(ckpt)? != ModelKind::Baseline {
            return Err(ModelError::Config("checkpoint holds an insertion model".into()));
        }
        let mut m = Self::new(ModelConfig::from_meta(ckpt)?, 0)?;
        ckpt.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
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

    pub fn encode_sources(&self, sources: &[&[TokenId]]) -> Result<EncodedSources> {
        encode_sources(&self.cfg, &self.params, &self.encoder, &self.decoder, sources)
    }

    /// Causal teacher-forced pass over `BOS y` for every target.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        sources: &[Range<usize>],
        cross: &[(Var, Var)],
        targets: &[(usize, &[TokenId])],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<BaselineOutput> {
        let mut batch = DecoderBatch::default();
        let mut segments = Vec::with_capacity(targets.len());
        for &(s, y) in targets {
            check_len("target", y.len() + 1, self.cfg.max_len)?;
            check_data_tokens(y, self.cfg.vocab_size)?;
            let start = batch.ids.len();
            batch.ids.push(BOS as usize);
            batch.ids.extend(y.iter().map(|&t| t as usize));
            batch.positions.extend(0..=y.len());
            let rows = start..batch.ids.len();
            batch.self_segments.push(AttnSegment {
                queries: rows.clone(),
                keys: rows.clone(),
                causal: true,
            });
            batch.cross_segments.push(AttnSegment {
                queries: rows.clone(),
                keys: sources[s].clone(),
                causal: false,
            });
            segments.push(rows);
        }
        let h = self.decoder.forward(tape, p, &batch, cross, drop)?;
        let logits = tape.matmul(h, p.var(self.w_out))?;
        let rows = batch.ids.len();
        let log_probs = tape.masked_log_softmax(logits, output_mask(rows, self.cfg.vocab_size))?;
        Ok(BaselineOutput {
            log_probs,
            segments,
            vocab: self.cfg.vocab_size,
        })
    }

    /// Flat indices into `log_probs` of the target tokens then the stop token.
    pub fn target_indices(out: &BaselineOutput, q: usize, y: &[TokenId]) -> Vec<usize> {
        let seg = &out.segments[q];
        y.iter()
            .chain(std::iter::once(&STOP))
            .enumerate()
            .map(|(i, &t)| (seg.start + i) * out.vocab + t as usize)
            .collect()
    }

    /// Differentiable `log p(y STOP | src)` under left-to-right factorization.
    pub fn log_prob(&self, tape: &mut Tape<'_>, p: &Bound, src: &[TokenId], y: &[TokenId]) -> Result<Var> {
        let enc = self.encode(tape, p, &[src], &mut None)?;
        let cross = self.cross_kv(tape, p, enc.memory)?;
        let out = self.forward(tape, p, &enc.ranges, &cross, &[(0, y)], &mut None)?;
        let mut weights = vec![0.0; tape.value(out.log_probs).numel()];
        for i in Self::target_indices(&out, 0, y) {
            weights[i] = -1.0;
        }
        Ok(tape.cross_entropy_from_log_probs(out.log_probs, weights)?)
    }

    pub fn log_prob_value(&self, src: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let lp = self.log_prob(&mut tape, &p, src, y)?;
        Ok(tape.value(lp).item())
    }

    /// Teacher-forced next-token distribution after each prefix of `y`,
    /// including the empty prefix: `y.len() + 1` rows.
    pub fn prefix_log_probs(&self, src: &[TokenId], y: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode_sources(&[src])?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let cross = enc.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &enc.ranges, &cross, &[(0, y)], &mut None)?;
        let t = tape.value(out.log_probs);
        Ok(out.segments[0].clone().map(|r| unmask(t.row(r))).collect())
    }

    pub fn start_state(&self) -> BaselineState {
        BaselineState {
            cache: self.decoder.empty_cache(),
            output: Vec::new(),
        }
    }

    /// One incremental decoding step for each `(source index, prefix)`.
    pub fn step(&self, enc: &EncodedSources, states: &[(usize, &BaselineState)]) -> Result<Vec<BaselineStep>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut tokens = Vec::with_capacity(states.len());
        let mut caches = Vec::with_capacity(states.len());
        let mut cross_segments = Vec::with_capacity(states.len());
        for (i, &(s, st)) in states.iter().enumerate() {
            check_len("target", st.cache.len + 1, self.cfg.max_len)?;
            tokens.push(st.next_input() as usize);
            caches.push(&st.cache);
            cross_segments.push(AttnSegment {
                queries: i..i + 1,
                keys: enc.ranges[s].clone(),
                causal: false,
            });
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let cross = enc.bind(&mut tape);
        let (h, new_caches) = self
            .decoder
            .step(&mut tape, &p, &tokens, &caches, cross_segments, &cross)?;
        let logits = tape.matmul(h, p.var(self.w_out))?;
        let lp = tape.masked_log_softmax(logits, output_mask(states.len(), self.cfg.vocab_size))?;
        let t = tape.value(lp);
        Ok(new_caches
            .into_iter()
            .enumerate()
            .map(|(i, cache)| BaselineStep {
                log_probs: unmask(t.row(i)),
                cache,
            })
            .collect())
    }
}

fn unmask(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&l| if l <= MASKED_LOG_PROB { f64::NEG_INFINITY } else { l })
        .collect()
}

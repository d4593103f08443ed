//! Pre-norm transformer blocks over ragged batches.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AttnSegment, Bound, ParamId, ParamStore, Tape, Tensor, Var};

use super::{ModelConfig, Result};

/// Inverted dropout applied while training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub(crate) fn dropout(tape: &mut Tape<'_>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(d) = drop.as_mut() else {
        return Ok(x);
    };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.rate;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Sinusoidal absolute position encodings for the given positions.
pub fn positional_encoding(positions: &[usize], d: usize) -> Tensor {
    let freqs: Vec<f64> = (0..d)
        .map(|i| 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64))
        .collect();
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for (i, freq) in freqs.iter().enumerate() {
            let angle = p as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("sized above")
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], scale, self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    /// Embedding rows with variance `1/d`, so `sqrt(d)`-scaled rows have unit variance.
    pub fn embedding(&mut self, name: String, vocab: usize, d: usize) -> ParamId {
        let t = Tensor::uniform(&[vocab, d], (3.0 / d as f64).sqrt(), self.rng);
        self.store.add(name, t)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.xavier(format!("{name}.w"), fan_in, fan_out),
            b: init.constant(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add_row_vector(y, p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        Self {
            gain: init.constant(format!("{name}.gain"), &[d], 1.0),
            bias: init.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gain), p.var(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl MultiHead {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// Attention of `x_q` rows over already projected keys and values.
    pub fn attend(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        x_q: Var,
        (k, v): (Var, Var),
        segments: Vec<AttnSegment>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, x_q)?;
        let a = tape.attention(q, k, v, self.heads, segments)?;
        self.o.forward(tape, p, a)
    }

    pub fn project_kv(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(tape, p, x)?, self.v.forward(tape, p, x)?))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, ffn: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.l1"), d, ffn),
            l2: Linear::new(init, &format!("{name}.l2"), ffn, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, p, h)
    }
}

fn residual(tape: &mut Tape<'_>, x: Var, delta: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let delta = dropout(tape, delta, drop)?;
    Ok(tape.add(x, delta)?)
}

/// Token embedding scaled by `sqrt(d)` plus position encodings.
pub(crate) fn embed(
    tape: &mut Tape<'_>,
    p: &Bound,
    table: ParamId,
    ids: &[usize],
    positions: &[usize],
    d: usize,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let e = tape.embedding_lookup(p.var(table), ids)?;
    let e = tape.scale(e, (d as f64).sqrt())?;
    let pe = tape.constant(positional_encoding(positions, d));
    let x = tape.add(e, pe)?;
    dropout(tape, x, drop)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: MultiHead,
    norm2: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    embed: ParamId,
    layers: Vec<EncoderLayer>,
    norm: Norm,
    d: usize,
}

/// Encoder output for a batch of sources, rows concatenated.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub memory: Var,
    pub ranges: Vec<Range<usize>>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.num_encoder_layers)
            .map(|i| {
                let n = format!("encoder.layers.{i}");
                EncoderLayer {
                    norm1: Norm::new(init, &format!("{n}.norm1"), d),
                    attn: MultiHead::new(init, &format!("{n}.self_attn"), d, cfg.num_heads),
                    norm2: Norm::new(init, &format!("{n}.norm2"), d),
                    ffn: FeedForward::new(init, &format!("{n}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        Self {
            embed: init.embedding("encoder.embed".into(), cfg.vocab_size, d),
            layers,
            norm: Norm::new(init, "encoder.norm", d),
            d,
        }
    }

    /// Encodes each source independently; an empty source becomes a single
    /// begin sentinel.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        sources: &[&[usize]],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<EncodedBatch> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut ranges = Vec::with_capacity(sources.len());
        for src in sources {
            let start = ids.len();
            if src.is_empty() {
                ids.push(crate::tasks::BOS as usize);
            } else {
                ids.extend_from_slice(src);
            }
            positions.extend(0..ids.len() - start);
            ranges.push(start..ids.len());
        }
        let segments: Vec<AttnSegment> = ranges
            .iter()
            .map(|r| AttnSegment {
                queries: r.clone(),
                keys: r.clone(),
                causal: false,
            })
            .collect();
        let mut x = embed(tape, p, self.embed, &ids, &positions, self.d, drop)?;
        for layer in &self.layers {
            let h = layer.norm1.forward(tape, p, x)?;
            let kv = layer.attn.project_kv(tape, p, h)?;
            let a = layer.attn.attend(tape, p, h, kv, segments.clone())?;
            x = residual(tape, x, a, drop)?;
            let h = layer.norm2.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, h)?;
            x = residual(tape, x, f, drop)?;
        }
        let memory = self.norm.forward(tape, p, x)?;
        Ok(EncodedBatch { memory, ranges })
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: MultiHead,
    norm2: Norm,
    cross_attn: MultiHead,
    norm3: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    norm: Norm,
    d: usize,
}

/// Ragged decoder batch: rows of all queries concatenated.
#[derive(Clone, Debug, Default)]
pub(crate) struct DecoderBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub self_segments: Vec<AttnSegment>,
    /// Which encoder rows each query block attends to.
    pub cross_segments: Vec<AttnSegment>,
}

/// Projected self-attention keys and values of every earlier position, one
/// pair per decoder layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub layers: Vec<(Tensor, Tensor)>,
    pub len: usize,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.num_decoder_layers)
            .map(|i| {
                let n = format!("decoder.layers.{i}");
                DecoderLayer {
                    norm1: Norm::new(init, &format!("{n}.norm1"), d),
                    self_attn: MultiHead::new(init, &format!("{n}.self_attn"), d, cfg.num_heads),
                    norm2: Norm::new(init, &format!("{n}.norm2"), d),
                    cross_attn: MultiHead::new(init, &format!("{n}.cross_attn"), d, cfg.num_heads),
                    norm3: Norm::new(init, &format!("{n}.norm3"), d),
                    ffn: FeedForward::new(init, &format!("{n}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        Self {
            embed: init.embedding("decoder.embed".into(), cfg.vocab_size, d),
            layers,
            norm: Norm::new(init, "decoder.norm", d),
            d,
        }
    }

    /// Cross-attention keys and values of the encoder memory, per layer.
    pub fn cross_kv(&self, tape: &mut Tape<'_>, p: &Bound, memory: Var) -> Result<Vec<(Var, Var)>> {
        self.layers
            .iter()
            .map(|l| l.cross_attn.project_kv(tape, p, memory))
            .collect()
    }

    /// Final-normalized decoder states for every row of `batch`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        batch: &DecoderBatch,
        cross: &[(Var, Var)],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = embed(tape, p, self.embed, &batch.ids, &batch.positions, self.d, drop)?;
        for (layer, &ckv) in self.layers.iter().zip(cross) {
            let h = layer.norm1.forward(tape, p, x)?;
            let kv = layer.self_attn.project_kv(tape, p, h)?;
            let a = layer.self_attn.attend(tape, p, h, kv, batch.self_segments.clone())?;
            x = residual(tape, x, a, drop)?;
            let h = layer.norm2.forward(tape, p, x)?;
            let c = layer.cross_attn.attend(tape, p, h, ckv, batch.cross_segments.clone())?;
            x = residual(tape, x, c, drop)?;
            let h = layer.norm3.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, h)?;
            x = residual(tape, x, f, drop)?;
        }
        self.norm.forward(tape, p, x)
    }

    /// One incremental step: row `b` of the batch is the next input token of
    /// a sequence whose earlier positions are in `caches[b]`. Returns the
    /// final states and the extended caches.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        tokens: &[usize],
        caches: &[&KvCache],
        cross_segments: Vec<AttnSegment>,
        cross: &[(Var, Var)],
    ) -> Result<(Var, Vec<KvCache>)> {
        let b = tokens.len();
        let positions: Vec<usize> = caches.iter().map(|c| c.len).collect();
        let mut x = embed(tape, p, self.embed, tokens, &positions, self.d, &mut None)?;
        // Row order after gathering: cache rows of sequence 0, its new row,
        // cache rows of sequence 1, ...
        let cached_rows: usize = positions.iter().sum();
        let mut order = Vec::with_capacity(cached_rows + b);
        let mut segments = Vec::with_capacity(b);
        let mut offset = 0;
        for (i, &len) in positions.iter().enumerate() {
            let start = order.len();
            order.extend(offset..offset + len);
            order.push(cached_rows + i);
            offset += len;
            segments.push(AttnSegment {
                queries: i..i + 1,
                keys: start..order.len(),
                causal: false,
            });
        }
        let mut new_layers: Vec<Vec<(Tensor, Tensor)>> = vec![Vec::new(); b];
        for (li, (layer, &ckv)) in self.layers.iter().zip(cross).enumerate() {
            let h = layer.norm1.forward(tape, p, x)?;
            let (k_new, v_new) = layer.self_attn.project_kv(tape, p, h)?;
            let mut full = Vec::with_capacity(2);
            for (which, new) in [(0, k_new), (1, v_new)] {
                let all = if cached_rows > 0 {
                    let mut data = Vec::with_capacity(cached_rows * self.d);
                    for c in caches {
                        let t = if which == 0 { &c.layers[li].0 } else { &c.layers[li].1 };
                        data.extend_from_slice(t.data());
                    }
                    let old = tape.constant(Tensor::new(vec![cached_rows, self.d], data)?);
                    tape.concat_rows(&[old, new])?
                } else {
                    new
                };
                full.push(tape.gather_rows(all, &order)?);
            }
            for (i, seg) in segments.iter().enumerate() {
                let rows = seg.keys.clone();
                let pick = |v: Var| -> Tensor {
                    let t = tape.value(v);
                    let data = rows.clone().flat_map(|r| t.row(r).iter().copied()).collect();
                    Tensor::new(vec![rows.len(), self.d], data).expect("row slice")
                };
                new_layers[i].push((pick(full[0]), pick(full[1])));
            }
            let a = layer
                .self_attn
                .attend(tape, p, h, (full[0], full[1]), segments.clone())?;
            x = tape.add(x, a)?;
            let h = layer.norm2.forward(tape, p, x)?;
            let c = layer.cross_attn.attend(tape, p, h, ckv, cross_segments.clone())?;
            x = tape.add(x, c)?;
            let h = layer.norm3.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, h)?;
            x = tape.add(x, f)?;
        }
        let out = self.norm.forward(tape, p, x)?;
        let caches = new_layers
            .into_iter()
            .zip(positions)
            .map(|(layers, len)| KvCache { layers, len: len + 1 })
            .collect();
        Ok((out, caches))
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache {
            layers: self
                .layers
                .iter()
                .map(|_| (Tensor::zeros(&[0, self.d]), Tensor::zeros(&[0, self.d])))
                .collect(),
            len: 0,
        }
    }
}

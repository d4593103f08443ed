//! Training of the insertion model under its lower-bound objectives, and of
//! the left-to-right baseline under teacher forcing.

mod optim;
mod select;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{adam_update, clip_global_norm, transformer_lr, AdamConfig, AdamState};
pub use select::{argmax_trajectories, argmax_trajectory, sample_trajectories, BatchScorer, NeuralScorer, StepScorer};

use crate::inference::AnyModel;
use crate::model::{BaselineModel, Dropout, InsertionModel, Model, ModelError};
use crate::tasks::{corpus_bleu, sequence_accuracy, Pair};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};
use crate::trajectory::{
    correct_insertions, left_to_right_trajectory, sample_trajectory_uniform, StepModel, TokenId, Trajectory,
    TrajectoryError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("non-finite gradient at step {step} in `{param}`")]
    NonFinite { step: u64, param: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Default,
    Argmax,
    PretrainL2rThenDefault,
    NoPretrain,
    OnlyPretrainUniform,
    OnlyPretrainL2r,
    BaselineL2r,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Default,
        TrainMode::Argmax,
        TrainMode::PretrainL2rThenDefault,
        TrainMode::NoPretrain,
        TrainMode::OnlyPretrainUniform,
        TrainMode::OnlyPretrainL2r,
        TrainMode::BaselineL2r,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Default => "default",
            TrainMode::Argmax => "argmax",
            TrainMode::PretrainL2rThenDefault => "pretrain_l2r_then_default",
            TrainMode::NoPretrain => "no_pretrain",
            TrainMode::OnlyPretrainUniform => "only_pretrain_uniform",
            TrainMode::OnlyPretrainL2r => "only_pretrain_l2r",
            TrainMode::BaselineL2r => "baseline_l2r",
        }
    }

    pub fn is_baseline(self) -> bool {
        self == TrainMode::BaselineL2r
    }

    /// Phase used at 1-based `step`.
    pub fn phase_at(self, step: u64, pretrain_steps: u64) -> Phase {
        let pre = step <= pretrain_steps;
        match self {
            TrainMode::Default if pre => Phase::Uniform,
            TrainMode::Default | TrainMode::NoPretrain => Phase::Sampled,
            TrainMode::Argmax if pre => Phase::Uniform,
            TrainMode::Argmax => Phase::Argmax,
            TrainMode::PretrainL2rThenDefault if pre => Phase::LeftToRight,
            TrainMode::PretrainL2rThenDefault => Phase::Sampled,
            TrainMode::OnlyPretrainUniform => Phase::Uniform,
            TrainMode::OnlyPretrainL2r => Phase::LeftToRight,
            TrainMode::BaselineL2r => Phase::Baseline,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode `{s}` (expected one of: {})", names.join(", "))
        })
    }
}

/// Where a step's trajectories come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Uniform,
    LeftToRight,
    Sampled,
    Argmax,
    Baseline,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Uniform => "pretrain_uniform",
            Phase::LeftToRight => "pretrain_l2r",
            Phase::Sampled => "sampled",
            Phase::Argmax => "argmax",
            Phase::Baseline => "baseline",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Phase::Sampled | Phase::Argmax)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Total optimizer steps, pretraining included.
    pub steps: u64,
    pub pretrain_steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// A batch holds examples until their target tokens reach this count.
    pub batch_tokens: usize,
    pub beam_for_argmax: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Validation examples decoded per evaluation.
    pub max_eval: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            mode: TrainMode::Default,
            steps: 20_000,
            pretrain_steps: 2_000,
            base_lr: 0.05,
            warmup_steps: 500,
            batch_tokens: 256,
            beam_for_argmax: 4,
            seed: 1,
            clip_norm: 5.0,
            eval_every: 500,
            checkpoint_every: 5_000,
            target_accuracy: None,
            max_eval: 200,
        }
    }

    pub fn transformer_base() -> Self {
        Self {
            steps: 300_000,
            pretrain_steps: 100_000,
            base_lr: 1.4e-3,
            warmup_steps: 16_000,
            batch_tokens: 4_000,
            eval_every: 5_000,
            checkpoint_every: 20_000,
            max_eval: 1_000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "transformer-base" | "transformer_base" | "base" => Some(Self::transformer_base()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.batch_tokens < 1 || self.beam_for_argmax < 1 || self.eval_every < 1 {
            return bad("batch_tokens, beam_for_argmax and eval_every must be at least 1");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Step {
        step: u64,
        phase: String,
        loss: f64,
        lr: f64,
        grad_norm: f64,
        examples: usize,
    },
    Valid {
        step: u64,
        phase: String,
        accuracy: f64,
        bleu: f64,
    },
}

/// Bookkeeping of where trajectories came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub examples: usize,
    /// Trajectories drawn without consulting the model.
    pub model_free_trajectories: usize,
    pub sampled_trajectories: usize,
    pub argmax_trajectories: usize,
    /// Scorer calls made while choosing trajectories in a pretraining phase.
    pub pretrain_model_calls: usize,
}

impl Counters {
    pub fn trajectories(&self) -> usize {
        self.model_free_trajectories + self.sampled_trajectories + self.argmax_trajectories
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub metrics: Vec<Metric>,
    pub counters: Counters,
    pub final_accuracy: f64,
    pub final_bleu: f64,
}

impl TrainSummary {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter_map(|m| match m {
                Metric::Step { loss, .. } => Some(*loss),
                Metric::Valid { .. } => None,
            })
            .collect()
    }
}

/// Sum over examples of `−Σ_t log Σ_{e ∈ correct(y, partial_t)} p(e | partial_t)`
/// along each example's trajectory.
pub fn insertion_batch_loss(
    model: &InsertionModel,
    tape: &mut Tape<'_>,
    p: &Bound,
    examples: &[(&[TokenId], &[TokenId], &Trajectory)],
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let sources: Vec<&[TokenId]> = examples.iter().map(|e| e.0).collect();
    let enc = model.encode(tape, p, &sources, drop)?;
    let cross = model.cross_kv(tape, p, enc.memory)?;
    let partials: Vec<Vec<Vec<TokenId>>> = examples.iter().map(|e| e.2.partials()).collect();
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for (i, ps) in partials.iter().enumerate() {
        for x in ps {
            queries.push((i, x.as_slice()));
            targets.push(examples[i].1);
        }
    }
    let out = model.forward(tape, p, &enc.ranges, &cross, &queries, drop)?;
    let mut groups = Vec::with_capacity(queries.len());
    for (q, (&(_, partial), y)) in queries.iter().zip(&targets).enumerate() {
        let idx: Option<Vec<usize>> = correct_insertions(y, partial)?
            .into_iter()
            .map(|ev| out.event_index(q, ev))
            .collect();
        groups.push(idx.ok_or_else(|| TrajectoryError::Malformed("target token outside the vocabulary".into()))?);
    }
    let steps = tape.log_sum_exp_groups(out.joint, groups)?;
    let total = tape.sum(steps)?;
    Ok(tape.scale(total, -1.0)?)
}

/// Sum over examples of `−log p(y STOP | src)` under teacher forcing.
pub fn baseline_batch_loss(
    model: &BaselineModel,
    tape: &mut Tape<'_>,
    p: &Bound,
    examples: &[(&[TokenId], &[TokenId])],
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let sources: Vec<&[TokenId]> = examples.iter().map(|e| e.0).collect();
    let enc = model.encode(tape, p, &sources, drop)?;
    let cross = model.cross_kv(tape, p, enc.memory)?;
    let targets: Vec<(usize, &[TokenId])> = examples.iter().enumerate().map(|(i, e)| (i, e.1)).collect();
    let out = model.forward(tape, p, &enc.ranges, &cross, &targets, drop)?;
    let mut weights = vec![0.0; tape.value(out.log_probs).numel()];
    for (q, e) in examples.iter().enumerate() {
        for i in BaselineModel::target_indices(&out, q, e.1) {
            weights[i] = 1.0;
        }
    }
    Ok(tape.cross_entropy_from_log_probs(out.log_probs, weights)?)
}

/// Value of the training loss of one example along `traj` for any step
/// model: `−Σ_t log Σ_{e ∈ correct} p(e | partial_t)`.
pub fn trajectory_loss<M: StepModel + ?Sized>(
    model: &M,
    src: &[TokenId],
    y: &[TokenId],
    traj: &Trajectory,
) -> crate::trajectory::Result<f64> {
    let mut loss = 0.0;
    for partial in traj.partials() {
        let d = model.distribution(src, &partial)?;
        let lps: Vec<f64> = correct_insertions(y, &partial)?
            .iter()
            .map(|&e| d.log_prob(e))
            .collect();
        loss -= crate::tensor::log_sum_exp(lps.iter().copied());
    }
    Ok(loss)
}

/// Chooses a trajectory for `y` as `phase` prescribes and returns it with
/// its training loss under `model`.
pub fn step_loss<M: StepModel + ?Sized, R: rand::Rng + ?Sized>(
    model: &M,
    src: &[TokenId],
    y: &[TokenId],
    phase: Phase,
    beam: usize,
    rng: &mut R,
) -> crate::trajectory::Result<(f64, Trajectory)> {
    if y.is_empty() {
        return Err(TrajectoryError::EmptyTarget);
    }
    let scorer = StepScorer {
        model,
        sources: vec![src],
    };
    let traj = match phase {
        Phase::Uniform => sample_trajectory_uniform(y, rng)?,
        Phase::LeftToRight | Phase::Baseline => left_to_right_trajectory(y),
        Phase::Sampled => sample_trajectories(&scorer, &[y], rng)?.remove(0),
        Phase::Argmax => argmax_trajectories(&scorer, &[y], beam)?.remove(0),
    };
    Ok((trajectory_loss(model, src, y, &traj)?, traj))
}

/// Examples per tape; bounds peak memory on large batches.
const CHUNK: usize = 64;

/// Optimizer, data order and random streams of one training run.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    adam: AdamConfig,
    state: AdamState,
    train: &'d [Pair],
    order: Vec<usize>,
    cursor: usize,
    data_rng: ChaCha8Rng,
    traj_rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
    pub step: u64,
    pub counters: Counters,
}

impl<'d> Trainer<'d> {
    pub fn new(model: &AnyModel, train: &'d [Pair], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if let Some((i, _)) = train.iter().enumerate().find(|(_, p)| p.1.is_empty()) {
            return Err(TrainError::Config(format!("training example {i} has an empty target")));
        }
        match (model, cfg.mode.is_baseline()) {
            (AnyModel::Baseline(_), false) => {
                return Err(TrainError::Config(format!(
                    "mode {} needs an insertion model",
                    cfg.mode
                )))
            }
            (AnyModel::Insertion(_), true) => {
                return Err(TrainError::Config("mode baseline_l2r needs a baseline model".into()))
            }
            _ => {}
        }
        let mut t = Self {
            cfg: cfg.clone(),
            adam: AdamConfig::default(),
            state: AdamState::new(params(model)),
            train,
            order: Vec::new(),
            cursor: 0,
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            traj_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_616a),
            drop_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70),
            step: 0,
            counters: Counters::default(),
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.train.len()).collect();
        self.order.shuffle(&mut self.data_rng);
        self.cursor = 0;
    }

    /// Next batch: examples in shuffled order until their target tokens
    /// reach `batch_tokens`, never crossing an epoch boundary.
    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == self.order.len() {
            self.reshuffle();
        }
        let mut batch = Vec::new();
        let mut tokens = 0;
        while self.cursor < self.order.len() && tokens < self.cfg.batch_tokens {
            let i = self.order[self.cursor];
            self.cursor += 1;
            tokens += self.train[i].1.len();
            batch.push(i);
        }
        batch
    }

    /// One optimizer step. Returns its metrics record.
    pub fn step(&mut self, model: &mut AnyModel) -> Result<Metric> {
        self.step += 1;
        let step = self.step;
        let phase = self.cfg.mode.phase_at(step, self.cfg.pretrain_steps);
        let batch = self.next_batch();
        let examples: Vec<(&[TokenId], &[TokenId])> = batch
            .iter()
            .map(|&i| (self.train[i].0.as_slice(), self.train[i].1.as_slice()))
            .collect();
        let scale = 1.0 / examples.len() as f64;
        self.counters.examples += examples.len();

        let (loss, mut grads) = match model {
            AnyModel::Insertion(m) => {
                let trajs = self.choose(m, &examples, phase)?;
                let mut loss = 0.0;
                let mut grads: Option<Vec<Tensor>> = None;
                for (chunk, tchunk) in examples.chunks(CHUNK).zip(trajs.chunks(CHUNK)) {
                    let ex: Vec<_> = chunk.iter().zip(tchunk).map(|(e, t)| (e.0, e.1, t)).collect();
                    let mut tape = Tape::new();
                    let p = m.params().bind(&mut tape);
                    let mut drop = dropout(m.config().dropout, &mut self.drop_rng);
                    let l = insertion_batch_loss(m, &mut tape, &p, &ex, &mut drop)?;
                    let l = tape.scale(l, scale)?;
                    loss += tape.value(l).item();
                    tape.backward(l)?;
                    accumulate(&mut grads, p.grads(&tape, m.params()));
                }
                (loss, grads.expect("nonempty batch"))
            }
            AnyModel::Baseline(m) => {
                let mut loss = 0.0;
                let mut grads: Option<Vec<Tensor>> = None;
                for chunk in examples.chunks(CHUNK) {
                    let mut tape = Tape::new();
                    let p = m.params().bind(&mut tape);
                    let mut drop = dropout(m.config().dropout, &mut self.drop_rng);
                    let l = baseline_batch_loss(m, &mut tape, &p, chunk, &mut drop)?;
                    let l = tape.scale(l, scale)?;
                    loss += tape.value(l).item();
                    tape.backward(l)?;
                    accumulate(&mut grads, p.grads(&tape, m.params()));
                }
                (loss, grads.expect("nonempty batch"))
            }
        };

        let store = params_mut(model);
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let param = store
                .name(store.ids().nth(i).expect("gradient per parameter"))
                .to_string();
            return Err(TrainError::NonFinite { step, param });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        let lr = transformer_lr(step, self.cfg.base_lr, self.cfg.warmup_steps);
        adam_update(store, &grads, &mut self.state, &self.adam, lr);
        Ok(Metric::Step {
            step,
            phase: phase.name().to_string(),
            loss,
            lr,
            grad_norm,
            examples: examples.len(),
        })
    }

    fn choose(
        &mut self,
        m: &InsertionModel,
        examples: &[(&[TokenId], &[TokenId])],
        phase: Phase,
    ) -> Result<Vec<Trajectory>> {
        let targets: Vec<&[TokenId]> = examples.iter().map(|e| e.1).collect();
        Ok(match phase {
            Phase::Uniform => {
                self.counters.model_free_trajectories += targets.len();
                targets
                    .iter()
                    .map(|y| sample_trajectory_uniform(y, &mut self.traj_rng))
                    .collect::<crate::trajectory::Result<_>>()?
            }
            Phase::LeftToRight | Phase::Baseline => {
                self.counters.model_free_trajectories += targets.len();
                targets.iter().map(|y| left_to_right_trajectory(y)).collect()
            }
            Phase::Sampled | Phase::Argmax => {
                let sources: Vec<&[TokenId]> = examples.iter().map(|e| e.0).collect();
                let scorer = NeuralScorer::new(m, &sources)?;
                if self.step <= self.cfg.pretrain_steps && self.cfg.mode != TrainMode::NoPretrain {
                    self.counters.pretrain_model_calls += 1;
                }
                if phase == Phase::Sampled {
                    self.counters.sampled_trajectories += targets.len();
                    sample_trajectories(&scorer, &targets, &mut self.traj_rng)?
                } else {
                    self.counters.argmax_trajectories += targets.len();
                    argmax_trajectories(&scorer, &targets, self.cfg.beam_for_argmax)?
                }
            }
        })
    }
}

fn params(model: &AnyModel) -> &ParamStore {
    match model {
        AnyModel::Insertion(m) => m.params(),
        AnyModel::Baseline(m) => m.params(),
    }
}

fn params_mut(model: &mut AnyModel) -> &mut ParamStore {
    match model {
        AnyModel::Insertion(m) => m.params_mut(),
        AnyModel::Baseline(m) => m.params_mut(),
    }
}

fn dropout(rate: f64, rng: &mut ChaCha8Rng) -> Option<Dropout<'_>> {
    (rate > 0.0).then_some(Dropout { rate, rng })
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (a, g) in a.iter_mut().zip(grads) {
                a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Greedy-decodes up to `max_eval` validation sources and scores them
/// against their targets. Returns `(sequence accuracy, BLEU)`.
pub fn evaluate(model: &AnyModel, valid: &[Pair], max_eval: usize) -> Result<(f64, f64)> {
    let valid = &valid[..valid.len().min(max_eval)];
    if valid.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hyps = Vec::with_capacity(valid.len());
    for chunk in valid.chunks(CHUNK) {
        let sources: Vec<&[TokenId]> = chunk.iter().map(|p| p.0.as_slice()).collect();
        let max_steps = 2 * model.config().max_len;
        hyps.extend(model.greedy_batch(&sources, max_steps)?.into_iter().map(|d| d.tokens));
    }
    let refs: Vec<Vec<TokenId>> = valid.iter().map(|p| p.1.clone()).collect();
    Ok((sequence_accuracy(&hyps, &refs), corpus_bleu(&hyps, &refs, 4)))
}

/// Writes the metrics log and checkpoints of a run.
pub struct RunOutput {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl RunOutput {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const FINAL: &'static str = "model.ckpt";

    pub fn create(dir: &Path) -> Result<Self> {
        let io = |source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(Self::METRICS);
        let file = File::create(&path).map_err(|source| TrainError::Io { path, source })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
        })
    }

    fn log(&mut self, m: &Metric) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.metrics, "{line}").map_err(|source| TrainError::Io {
            path: self.dir.join(Self::METRICS),
            source,
        })
    }

    fn save(&mut self, model: &AnyModel, name: &str, step: u64, cfg: &TrainConfig) -> Result<()> {
        let extra = vec![
            ("train_step".to_string(), step.to_string()),
            ("train_mode".to_string(), cfg.mode.name().to_string()),
        ];
        let path = self.dir.join(name);
        let r = match model {
            AnyModel::Insertion(m) => m.save(&path, &extra),
            AnyModel::Baseline(m) => m.save(&path, &extra),
        };
        r.map_err(|e| match e {
            ModelError::Checkpoint(c) => TrainError::Io {
                path,
                source: std::io::Error::other(c.to_string()),
            },
            e => e.into(),
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|source| TrainError::Io {
            path: self.dir.join(Self::METRICS),
            source,
        })
    }
}

/// Runs the pretraining phase (if the mode has one) and then the main phase,
/// evaluating every `eval_every` steps and once at the end.
pub fn train(
    model: &mut AnyModel,
    train_set: &[Pair],
    valid: &[Pair],
    cfg: &TrainConfig,
    mut out: Option<&mut RunOutput>,
) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(model, train_set, cfg)?;
    let mut metrics = Vec::new();
    let mut last_eval = (0.0, 0.0);
    let mut evaluated_at = 0;
    while trainer.step < cfg.steps {
        let m = trainer.step(model)?;
        if let Some(o) = out.as_deref_mut() {
            o.log(&m)?;
        }
        metrics.push(m);
        let step = trainer.step;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            last_eval = evaluate(model, valid, cfg.max_eval)?;
            evaluated_at = step;
            let v = Metric::Valid {
                step,
                phase: "valid".into(),
                accuracy: last_eval.0,
                bleu: last_eval.1,
            };
            if let Some(o) = out.as_deref_mut() {
                o.log(&v)?;
                o.flush()?;
            }
            metrics.push(v);
        }
        if let Some(o) = out.as_deref_mut() {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                o.save(model, &format!("step-{step}.ckpt"), step, cfg)?;
            }
        }
        if evaluated_at == step && cfg.target_accuracy.is_some_and(|a| last_eval.0 >= a) {
            break;
        }
    }
    if let Some(o) = out {
        o.save(model, RunOutput::FINAL, trainer.step, cfg)?;
        o.flush()?;
    }
    Ok(TrainSummary {
        steps: trainer.step,
        metrics,
        counters: trainer.counters,
        final_accuracy: last_eval.0,
        final_bleu: last_eval.1,
    })
}

#[cfg(test)]
mod tests;

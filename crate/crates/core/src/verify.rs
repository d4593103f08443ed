//! Self-contained property suites: exact-likelihood oracles, bound ordering,
//! normalization, search optimality and finite-difference gradients.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::inference::{beam_decode, greedy_decode, DecodeConfig};
use crate::model::{InsertionModel, Model, ModelConfig};
use crate::tensor::gradcheck::{check_gradients, check_param_gradients};
use crate::tensor::{AttnSegment, Tape, Tensor, Var};
use crate::trajectory::stub::{ConcentratedStub, RandomStub};
use crate::trajectory::{
    apply_insertion, enumerate_trajectories, exact_bounds, exact_log_marginal, sample_trajectory_uniform,
    trajectory_log_prob, InsertionDistribution, InsertionEvent, StepModel, TokenId,
};

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Gradients,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            _ => Err(format!(
                "unknown suite `{s}` (expected one of: oracles, gradients, all)"
            )),
        }
    }
}

pub fn run_suite(suite: Suite) -> Vec<Check> {
    let mut out = Vec::new();
    if suite != Suite::Gradients {
        out.push(marginal_equivalence(200, 6));
        out.push(bound_ordering(100, 5));
        out.push(normalization(50, 10));
        out.push(search_optimality(100));
    }
    if suite != Suite::Oracles {
        out.push(op_gradients());
        out.push(model_gradients());
    }
    out
}

fn random_target(rng: &mut ChaCha8Rng, max_len: usize, data_tokens: u32) -> Vec<TokenId> {
    let n = rng.gen_range(1..=max_len);
    // A small alphabet forces repeated tokens.
    let alphabet = rng.gen_range(1..=data_tokens);
    (0..n).map(|_| 4 + rng.gen_range(0..alphabet)).collect()
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// DP marginal against the enumeration sum, and `|T*(y)| = |y|!`.
pub fn marginal_equivalence(instances: usize, max_len: usize) -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut bad_count = 0;
    for i in 0..instances {
        let y = random_target(&mut rng, max_len, 4);
        let stub = RandomStub {
            vocab: 8,
            seed: i as u64,
            spread: 2.0,
        };
        let trajs = enumerate_trajectories(&y).expect("short target");
        if trajs.len() != (1..=y.len()).product::<usize>() {
            bad_count += 1;
        }
        let lps: Vec<f64> = trajs
            .iter()
            .map(|t| trajectory_log_prob(&[4], t, &stub).unwrap())
            .collect();
        let sum = crate::tensor::log_sum_exp(lps.iter().copied()).exp();
        let dp = exact_log_marginal(&y, &[4], &stub).unwrap().exp();
        worst = worst.max(((dp - sum) / sum).abs());
    }
    check(
        "marginal_equivalence",
        worst < 1e-12 && bad_count == 0,
        format!(
            "{instances} targets, max rel err {worst:.2e}, {bad_count} wrong trajectory counts, {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

/// `expected ≤ max ≤ marginal` on random stubs, equality on a
/// single-trajectory model.
pub fn bound_ordering(instances: usize, max_len: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut violations = 0;
    let mut tight_gap: f64 = 0.0;
    for i in 0..instances {
        let y = random_target(&mut rng, max_len, 4);
        let stub = RandomStub {
            vocab: 8,
            seed: 1000 + i as u64,
            spread: 3.0,
        };
        let b = exact_bounds(&y, &[5], &stub).unwrap();
        if !(b.expected_logp <= b.max_traj_logp + 1e-12 && b.max_traj_logp <= b.marginal_logp + 1e-12) {
            violations += 1;
        }
        let traj = sample_trajectory_uniform(&y, &mut rng).unwrap();
        let b = exact_bounds(&y, &[5], &ConcentratedStub::new(8, &traj)).unwrap();
        tight_gap = tight_gap
            .max((b.marginal_logp - b.expected_logp).abs())
            .max((b.marginal_logp - b.max_traj_logp).abs());
    }
    check(
        "bound_ordering",
        violations == 0 && tight_gap < 1e-12,
        format!("{violations}/{instances} violations, concentrated-model gap {tight_gap:.2e}"),
    )
}

/// Every step distribution of random models sums to one.
pub fn normalization(draws: u64, max_partial: usize) -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for seed in 0..draws {
        let cfg = ModelConfig {
            max_len: max_partial + 2,
            ..ModelConfig::tiny(10)
        };
        let m = InsertionModel::new(cfg, seed).unwrap();
        let src: Vec<TokenId> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(4..10)).collect();
        for len in 0..=max_partial {
            let partial: Vec<TokenId> = (0..len).map(|_| rng.gen_range(4..10)).collect();
            let d = m.insertion_distribution(&src, &partial).unwrap();
            worst = worst.max((d.total_mass() - 1.0).abs());
        }
    }
    check(
        "normalization",
        worst < 1e-9,
        format!("{draws} models, lengths 0..={max_partial}, max |mass - 1| {worst:.2e}"),
    )
}

/// Best score over every event sequence with at most `max_ins` insertions,
/// ranked like the beam's final ordering.
pub fn exhaustive_argmax<M: StepModel + ?Sized>(
    model: &M,
    src: &[TokenId],
    max_ins: usize,
) -> (Vec<InsertionEvent>, f64) {
    #[allow(clippy::too_many_arguments)]
    fn visit<M: StepModel + ?Sized>(
        model: &M,
        src: &[TokenId],
        max_ins: usize,
        memo: &mut HashMap<Vec<TokenId>, InsertionDistribution>,
        partial: Vec<TokenId>,
        events: &mut Vec<InsertionEvent>,
        logp: f64,
        best: &mut Option<(f64, usize, Vec<InsertionEvent>)>,
    ) {
        if !memo.contains_key(&partial) {
            let d = model.distribution(src, &partial).unwrap();
            memo.insert(partial.clone(), d);
        }
        let d = memo[&partial].clone();
        let steps = events.len();
        let score = (logp + d.eos_log_prob()) / steps.max(1) as f64;
        events.push(InsertionEvent::Eos);
        let better = match best {
            None => true,
            Some((s, n, ev)) => score > *s || (score == *s && (steps < *n || (steps == *n && *events < *ev))),
        };
        if better {
            *best = Some((score, steps, events.clone()));
        }
        events.pop();
        if steps == max_ins {
            return;
        }
        for (ev, lp) in d.events() {
            if ev != InsertionEvent::Eos && lp.is_finite() {
                events.push(ev);
                let next = apply_insertion(&partial, ev).unwrap();
                visit(model, src, max_ins, memo, next, events, logp + lp, best);
                events.pop();
            }
        }
    }
    let mut best = None;
    visit(
        model,
        src,
        max_ins,
        &mut HashMap::new(),
        Vec::new(),
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    let (score, _, events) = best.expect("the empty output is always scored");
    (events, score)
}

/// Wide beam equals exhaustive search; beam 1 equals greedy.
pub fn search_optimality(instances: u64) -> Check {
    let max_ins = 4;
    let mut wide_ok = 0;
    let mut greedy_ok = 0;
    let cfg = ModelConfig {
        max_len: 8,
        ..ModelConfig::tiny(8)
    };
    // Wide enough to keep every candidate of the final step.
    let content = cfg.vocab_size - crate::tasks::NUM_RESERVED;
    let paths: usize = (1..=max_ins).map(|k| k * content).product();
    let wide = paths * ((max_ins + 1) * content + 1);
    for seed in 0..instances {
        let m = InsertionModel::new(cfg.clone(), 5000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<TokenId> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(4..8)).collect();
        let (want, _) = exhaustive_argmax(&m, &src, max_ins);
        let got = beam_decode(&m, &src, &DecodeConfig::new(wide, max_ins + 1)).unwrap();
        wide_ok += usize::from(got.events == want);
        let one = beam_decode(&m, &src, &DecodeConfig::new(1, max_ins + 1)).unwrap();
        let greedy = greedy_decode(&m, &src, max_ins + 1, m.config().max_len - 2).unwrap();
        greedy_ok += usize::from(one.events == greedy.events);
    }
    check(
        "search_optimality",
        wide_ok as u64 == instances && greedy_ok as u64 == instances,
        format!("wide beam {wide_ok}/{instances} exhaustive argmax, beam 1 {greedy_ok}/{instances} greedy"),
    )
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn readout(tape: &mut Tape<'_>, x: Var) -> crate::tensor::Result<Var> {
    let n = tape.value(x).numel();
    let shape = tape.value(x).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape<'_>, &[Var]) -> crate::tensor::Result<Var>>,
);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let a = rand_t(&[3, 4], seed);
    let b = rand_t(&[3, 4], seed + 1);
    let x = rand_t(&[4, 5], seed + 2);
    let segments = vec![
        AttnSegment {
            queries: 0..3,
            keys: 0..3,
            causal: true,
        },
        AttnSegment {
            queries: 3..7,
            keys: 3..9,
            causal: false,
        },
    ];
    vec![
        (
            "matmul",
            vec![a.clone(), rand_t(&[4, 2], seed + 3)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y)
            }),
        ),
        (
            "add/sub/mul/scale",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, v[1])?;
                let y = t.sub(y, v[0])?;
                let y = t.scale(y, 0.7)?;
                readout(t, y)
            }),
        ),
        (
            "add_row/col_vector",
            vec![a.clone(), rand_t(&[4], seed + 4), rand_t(&[3], seed + 5)],
            Box::new(|t, v| {
                let y = t.add_row_vector(v[0], v[1])?;
                let y = t.add_col_vector(y, v[2])?;
                readout(t, y)
            }),
        ),
        (
            "relu",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                readout(t, y)
            }),
        ),
        (
            "transpose/reshape",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                let y = t.reshape(y, vec![2, 6])?;
                readout(t, y)
            }),
        ),
        (
            "concat/gather/slice_rows",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1], v[0]])?;
                let y = t.gather_rows(y, &[5, 0, 0, 2, 8])?;
                let y = t.slice_rows(y, 1..4)?;
                readout(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![x.clone(), rand_t(&[5], seed + 6), rand_t(&[5], seed + 7)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                readout(t, y)
            }),
        ),
        (
            "softmax/log_softmax",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 0)?;
                let z = t.log_softmax(v[0], 1)?;
                let s = t.add(y, z)?;
                readout(t, s)
            }),
        ),
        (
            "masked/segment_log_softmax",
            vec![x.clone()],
            Box::new(|t, v| {
                let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1).collect();
                let y = t.masked_log_softmax(v[0], mask)?;
                let z = t.segment_log_softmax(v[0], vec![0..3, 3..4, 4..20])?;
                let y = t.log_sum_exp_groups(y, vec![vec![0, 2], vec![5], vec![17, 18, 19]])?;
                let w: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
                let z = t.cross_entropy_from_log_probs(z, w)?;
                let y = t.sum(y)?;
                t.add(y, z)
            }),
        ),
        (
            "embedding_lookup",
            vec![rand_t(&[6, 3], seed + 8)],
            Box::new(|t, v| {
                let y = t.embedding_lookup(v[0], &[1, 5, 1, 0])?;
                readout(t, y)
            }),
        ),
        (
            "attention",
            vec![
                rand_t(&[7, 4], seed + 9),
                rand_t(&[9, 4], seed + 10),
                rand_t(&[9, 4], seed + 11),
            ],
            Box::new(move |t, v| {
                let y = t.attention(v[0], v[1], v[2], 2, segments.clone())?;
                readout(t, y)
            }),
        ),
    ]
}

/// Central differences against reverse mode for every tape operation.
pub fn op_gradients() -> Check {
    let mut worst: (f64, &str) = (0.0, "");
    for seed in 0..3 {
        for (name, inputs, f) in op_cases(seed * 100) {
            let r = check_gradients(&inputs, 1e-5, |t, v| f(t, v)).unwrap();
            if r.max_rel_error() > worst.0 {
                worst = (r.max_rel_error(), name);
            }
        }
    }
    check(
        "op_gradients",
        worst.0 < 1e-4,
        format!("max rel err {:.2e} ({})", worst.0, worst.1),
    )
}

/// Central differences against reverse mode for a trajectory log-probability
/// of a two-layer `d = 8` model, all parameters flattened.
pub fn model_gradients() -> Check {
    let t = Instant::now();
    let m = InsertionModel::new(ModelConfig::tiny(8), 6).unwrap();
    let src = [4, 5, 6];
    let traj = "0:5 0:4 2:6 EOS".parse().unwrap();
    let r = check_param_gradients(m.params(), 1e-5, |tape, p| m.trajectory_log_prob(tape, p, &src, &traj)).unwrap();
    check(
        "model_gradients",
        r.overall < 1e-4,
        format!(
            "{} parameters, rel err {:.2e}, {:.1}s",
            m.params().num_scalars(),
            r.overall,
            t.elapsed().as_secs_f64()
        ),
    )
}

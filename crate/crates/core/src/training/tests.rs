use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::trajectory::stub::{left_to_right_stub, ConcentratedStub, RandomStub, UniformStub};
use crate::trajectory::{enumerate_trajectories, exact_marginal, trajectory_log_prob, InsertionEvent};

fn tiny(seed: u64) -> InsertionModel {
    InsertionModel::new(ModelConfig::tiny(8), seed).unwrap()
}

fn quick(mode: TrainMode, steps: u64) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        pretrain_steps: steps / 2,
        base_lr: 0.05,
        warmup_steps: 20,
        batch_tokens: 8,
        eval_every: 10,
        checkpoint_every: 0,
        max_eval: 8,
        ..TrainConfig::desk()
    }
}

fn copy_pairs() -> Vec<Pair> {
    vec![
        (vec![4, 5], vec![4, 5]),
        (vec![6], vec![6]),
        (vec![7, 4, 6], vec![7, 4, 6]),
        (vec![5, 5], vec![5, 5]),
        (vec![6, 7], vec![6, 7]),
    ]
}

#[test]
fn single_token_loss_is_insert_then_eos() {
    let m = tiny(3);
    let (src, y) = ([5, 6], [4]);
    let d0 = m.insertion_distribution(&src, &[]).unwrap();
    let d1 = m.insertion_distribution(&src, &y).unwrap();
    let want = -d0.log_prob(InsertionEvent::insert(0, 4)) - d1.eos_log_prob();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for phase in [Phase::Uniform, Phase::LeftToRight, Phase::Sampled, Phase::Argmax] {
        let (loss, traj) = step_loss(&m, &src, &y, phase, 4, &mut rng).unwrap();
        assert!((loss - want).abs() < 1e-12, "{phase:?}");
        assert_eq!(traj, left_to_right_trajectory(&y));
    }
}

#[test]
fn uniform_head_loss_is_log_of_correct_fraction() {
    let v = 9;
    let stub = UniformStub { vocab: v };
    let y = [4, 5];
    let traj = left_to_right_trajectory(&y);
    let n = |slots: usize| (slots * v + 1) as f64;
    let want = -(2.0 / n(1)).ln() - (1.0 / n(2)).ln() - (1.0 / n(3)).ln();
    assert!((trajectory_loss(&stub, &[], &y, &traj).unwrap() - want).abs() < 1e-12);

    // Two equal tokens: [4] then either slot is a correct place for the second.
    let y = [4, 4];
    let want = -(1.0 / n(1)).ln() - (2.0 / n(2)).ln() - (1.0 / n(3)).ln();
    assert!((trajectory_loss(&stub, &[], &y, &left_to_right_trajectory(&y)).unwrap() - want).abs() < 1e-12);
}

#[test]
fn tape_loss_matches_stepwise_loss() {
    let m = tiny(8);
    let pairs = copy_pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trajs: Vec<Trajectory> = pairs
        .iter()
        .map(|p| sample_trajectory_uniform(&p.1, &mut rng).unwrap())
        .collect();
    let examples: Vec<_> = pairs
        .iter()
        .zip(&trajs)
        .map(|(p, t)| (p.0.as_slice(), p.1.as_slice(), t))
        .collect();
    let mut tape = Tape::new();
    let p = m.params().bind_frozen(&mut tape);
    let l = insertion_batch_loss(&m, &mut tape, &p, &examples, &mut None).unwrap();
    let want: f64 = examples
        .iter()
        .map(|e| trajectory_loss(&m, e.0, e.1, e.2).unwrap())
        .sum();
    assert!((tape.value(l).item() - want).abs() < 1e-9);
}

#[test]
fn baseline_loss_is_negative_log_prob() {
    let b = BaselineModel::new(ModelConfig::tiny(8), 1).unwrap();
    let pairs = copy_pairs();
    let examples: Vec<_> = pairs.iter().map(|p| (p.0.as_slice(), p.1.as_slice())).collect();
    let mut tape = Tape::new();
    let p = b.params().bind_frozen(&mut tape);
    let l = baseline_batch_loss(&b, &mut tape, &p, &examples, &mut None).unwrap();
    let want: f64 = pairs.iter().map(|p| -b.log_prob_value(&p.0, &p.1).unwrap()).sum();
    assert!((tape.value(l).item() - want).abs() < 1e-9);
}

fn arb_target() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(4u32..7, 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_correct_loss_bounds_trajectory_log_prob(y in arb_target(), seed in 0u64..1000, pick in 0usize..24) {
        let stub = RandomStub { vocab: 7, seed, spread: 2.0 };
        let all = enumerate_trajectories(&y).unwrap();
        let traj = &all[pick % all.len()];
        let loss = trajectory_loss(&stub, &[4], &y, traj).unwrap();
        let lp = trajectory_log_prob(&[4], traj, &stub).unwrap();
        prop_assert!(-loss >= lp - 1e-12);
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn chosen_trajectories_lead_to_target(y in arb_target(), seed in 0u64..1000, beam in 1usize..6) {
        let stub = RandomStub { vocab: 7, seed, spread: 3.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for phase in [Phase::Uniform, Phase::LeftToRight, Phase::Sampled, Phase::Argmax] {
            let (_, traj) = step_loss(&stub, &[5], &y, phase, beam, &mut rng).unwrap();
            prop_assert!(traj.leads_to(&y));
        }
    }
}

#[test]
fn full_beam_argmax_matches_enumeration() {
    for seed in 0..40u64 {
        let stub = RandomStub {
            vocab: 7,
            seed,
            spread: 2.0,
        };
        let n = 1 + seed as usize % 4;
        let y: Vec<TokenId> = (0..n)
            .map(|i| 4 + ((seed as usize * 7 + i * 3) % 3) as TokenId)
            .collect();
        let all = enumerate_trajectories(&y).unwrap();
        let (best_lp, best) = all
            .iter()
            .map(|t| (trajectory_log_prob(&[6], t, &stub).unwrap(), t))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap();
        let got = argmax_trajectory(&stub, &[6], &y, all.len()).unwrap();
        let got_lp = trajectory_log_prob(&[6], &got, &stub).unwrap();
        assert!((got_lp - best_lp).abs() < 1e-12, "seed {seed}");
        assert_eq!(&got, best, "seed {seed}");
    }
}

#[test]
fn concentrated_models_select_their_trajectory() {
    let y = [5, 4, 6];
    let stub = left_to_right_stub(8, &y);
    for beam in [1, 2, 4] {
        assert_eq!(
            argmax_trajectory(&stub, &[], &y, beam).unwrap(),
            left_to_right_trajectory(&y)
        );
    }
    let traj: Trajectory = "0:6 0:5 1:4 EOS".parse().unwrap();
    let stub = ConcentratedStub::new(8, &traj);
    let scorer = StepScorer {
        model: &stub,
        sources: vec![&[]],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        sample_trajectories(&scorer, &[&y], &mut rng).unwrap(),
        vec![traj.clone()]
    );
    assert_eq!(argmax_trajectories(&scorer, &[&y], 4).unwrap(), vec![traj]);
}

#[test]
fn batched_selection_matches_single_examples() {
    let m = tiny(4);
    let pairs = copy_pairs();
    let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let targets: Vec<&[TokenId]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let neural = NeuralScorer::new(&m, &sources).unwrap();
    let stepwise = StepScorer {
        model: &m,
        sources: sources.clone(),
    };
    let a = argmax_trajectories(&neural, &targets, 3).unwrap();
    assert_eq!(a, argmax_trajectories(&stepwise, &targets, 3).unwrap());
    for (i, t) in a.iter().enumerate() {
        assert_eq!(t, &argmax_trajectory(&m, sources[i], targets[i], 3).unwrap());
    }
    let s1 = sample_trajectories(&neural, &targets, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let s2 = sample_trajectories(&stepwise, &targets, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn lr_schedule_peaks_at_warmup() {
    let (base, w) = (0.3, 400);
    assert!((transformer_lr(w, base, w) - base / (w as f64).sqrt()).abs() < 1e-15);
    assert!(transformer_lr(w / 2, base, w) < transformer_lr(w, base, w));
    assert!(transformer_lr(4 * w, base, w) < transformer_lr(w, base, w));
    assert!((transformer_lr(1, base, w) - base / (w as f64).powf(1.5)).abs() < 1e-15);
}

fn bowl_store(x: f64, y: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("xy", Tensor::vector(vec![x, y]));
    s
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut s = bowl_store(0.3, -0.7);
    let before = s.clone();
    let mut st = AdamState::new(&s);
    for step in 1..=10 {
        assert!(adam_update(
            &mut s,
            &[Tensor::zeros(&[2])],
            &mut st,
            &AdamConfig::default(),
            transformer_lr(step, 1.0, 4)
        ));
    }
    assert_eq!(s.tensors(), before.tensors());
}

#[test]
fn non_finite_gradient_is_rejected() {
    let mut s = bowl_store(0.3, -0.7);
    let before = s.clone();
    let mut st = AdamState::new(&s);
    let g = Tensor::vector(vec![f64::NAN, 1.0]);
    assert!(!adam_update(&mut s, &[g], &mut st, &AdamConfig::default(), 0.1));
    assert_eq!(s.tensors(), before.tensors());
    assert_eq!(st.step, 0);
}

#[test]
fn clipping_scales_to_max_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    let n: f64 = g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-15);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    // f(x, y) = (x - 1)^2 + 10 (y + 2)^2, minimum 0 at (1, -2).
    let f = |x: f64, y: f64| (x - 1.0).powi(2) + 10.0 * (y + 2.0).powi(2);
    let mut s = bowl_store(0.0, 0.0);
    let mut st = AdamState::new(&s);
    for step in 1..=5000 {
        let (x, y) = (s.tensors()[0].data()[0], s.tensors()[0].data()[1]);
        let g = Tensor::vector(vec![2.0 * (x - 1.0), 20.0 * (y + 2.0)]);
        adam_update(
            &mut s,
            &[g],
            &mut st,
            &AdamConfig::default(),
            transformer_lr(step, 0.1, 100),
        );
    }
    let (x, y) = (s.tensors()[0].data()[0], s.tensors()[0].data()[1]);
    assert!(f(x, y) < 1e-6, "f = {}", f(x, y));
    assert!((x - 1.0).abs() < 1e-3 && (y + 2.0).abs() < 1e-3);
}

#[test]
fn mode_names_round_trip() {
    for m in TrainMode::ALL {
        assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, format!("\"{}\"", m.name()));
    }
    let err = "sampling".parse::<TrainMode>().unwrap_err();
    assert!(err.contains("only_pretrain_uniform") && err.contains("baseline_l2r"));
}

#[test]
fn phases_follow_mode() {
    use Phase::*;
    let at = |m: TrainMode, s| m.phase_at(s, 10);
    assert_eq!(
        (at(TrainMode::Default, 10), at(TrainMode::Default, 11)),
        (Uniform, Sampled)
    );
    assert_eq!((at(TrainMode::Argmax, 1), at(TrainMode::Argmax, 11)), (Uniform, Argmax));
    assert_eq!(
        (
            at(TrainMode::PretrainL2rThenDefault, 3),
            at(TrainMode::PretrainL2rThenDefault, 30)
        ),
        (LeftToRight, Sampled)
    );
    assert_eq!(at(TrainMode::NoPretrain, 1), Sampled);
    assert_eq!(at(TrainMode::OnlyPretrainUniform, 99), Uniform);
    assert_eq!(at(TrainMode::OnlyPretrainL2r, 99), LeftToRight);
    assert_eq!(at(TrainMode::BaselineL2r, 1), Baseline);
}

#[test]
fn config_validation_and_presets() {
    assert!(TrainConfig::desk().validate().is_ok());
    let base = TrainConfig::preset("transformer-base").unwrap();
    assert_eq!(
        (base.base_lr, base.warmup_steps, base.batch_tokens, base.pretrain_steps),
        (1.4e-3, 16_000, 4_000, 100_000)
    );
    assert!(TrainConfig {
        warmup_steps: 0,
        ..TrainConfig::desk()
    }
    .validate()
    .is_err());
    let json = serde_json::to_string(&TrainConfig::desk()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::desk());
}

#[test]
fn batches_cover_each_epoch_once() {
    let pairs: Vec<Pair> = (0..7).map(|i| (vec![4], vec![4 + i % 3; 1 + i as usize % 3])).collect();
    let model = AnyModel::Insertion(tiny(0));
    let mut t = Trainer::new(
        &model,
        &pairs,
        &TrainConfig {
            batch_tokens: 3,
            ..quick(TrainMode::Default, 10)
        },
    )
    .unwrap();
    let mut seen = Vec::new();
    while seen.len() < pairs.len() {
        let b = t.next_batch();
        let tokens: usize = b.iter().map(|&i| pairs[i].1.len()).sum();
        assert!(!b.is_empty() && tokens - pairs[*b.last().unwrap()].1.len() < 3);
        seen.extend(b);
    }
    seen.sort();
    assert_eq!(seen, (0..7).collect::<Vec<_>>());
}

#[test]
fn overfitting_one_pair_drives_marginal_to_one() {
    let (src, y) = (vec![4, 6, 5], vec![4, 6, 5]);
    let mut model = AnyModel::Insertion(tiny(11));
    let cfg = TrainConfig {
        mode: TrainMode::NoPretrain,
        steps: 200,
        base_lr: 0.1,
        warmup_steps: 20,
        batch_tokens: 1,
        eval_every: 1000,
        checkpoint_every: 0,
        max_eval: 0,
        ..TrainConfig::desk()
    };
    let AnyModel::Insertion(m) = &model else { unreachable!() };
    let before = exact_marginal(&y, &src, m).unwrap();
    let summary = train(&mut model, &[(src.clone(), y.clone())], &[], &cfg, None).unwrap();
    let AnyModel::Insertion(m) = &model else { unreachable!() };
    let after = exact_marginal(&y, &src, m).unwrap();
    assert!(after > 0.99, "marginal {before} -> {after}");

    let losses = summary.losses();
    let windows: Vec<f64> = losses
        .chunks(50)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn pretraining_never_consults_the_model() {
    let mut model = AnyModel::Insertion(tiny(2));
    let pairs = copy_pairs();
    let cfg = quick(TrainMode::Default, 12);
    let s = train(&mut model, &pairs, &pairs, &cfg, None).unwrap();
    assert_eq!(s.counters.pretrain_model_calls, 0);
    let main: usize = s
        .metrics
        .iter()
        .filter_map(|m| match m {
            Metric::Step { step, examples, .. } if *step > cfg.pretrain_steps => Some(*examples),
            _ => None,
        })
        .sum();
    assert_eq!(s.counters.sampled_trajectories, main);
    assert_eq!(s.counters.model_free_trajectories + main, s.counters.examples);
}

#[test]
fn baseline_mode_builds_no_trajectories() {
    let pairs = copy_pairs();
    let mut model = AnyModel::Baseline(BaselineModel::new(ModelConfig::tiny(8), 0).unwrap());
    let s = train(&mut model, &pairs, &pairs, &quick(TrainMode::BaselineL2r, 6), None).unwrap();
    assert_eq!(s.counters.trajectories(), 0);
    assert!(s.counters.examples > 0);

    let mut wrong = AnyModel::Insertion(tiny(0));
    assert!(matches!(
        train(&mut wrong, &pairs, &pairs, &quick(TrainMode::BaselineL2r, 2), None),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train(&mut model, &pairs, &pairs, &quick(TrainMode::Argmax, 2), None),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train(&mut model, &[], &pairs, &quick(TrainMode::BaselineL2r, 2), None),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn equal_seeds_give_identical_runs() {
    let pairs = copy_pairs();
    for mode in [TrainMode::Default, TrainMode::Argmax] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut logs = Vec::new();
        for d in &dirs {
            let mut cfg = quick(mode, 10);
            cfg.checkpoint_every = 5;
            let mut model = AnyModel::Insertion(
                InsertionModel::new(
                    ModelConfig {
                        dropout: 0.1,
                        ..ModelConfig::tiny(8)
                    },
                    5,
                )
                .unwrap(),
            );
            let mut out = RunOutput::create(d.path()).unwrap();
            let s = train(&mut model, &pairs, &pairs, &cfg, Some(&mut out)).unwrap();
            drop(out);
            assert!(d.path().join("step-5.ckpt").exists() && d.path().join(RunOutput::FINAL).exists());
            logs.push((
                s.metrics,
                std::fs::read(d.path().join(RunOutput::METRICS)).unwrap(),
                std::fs::read(d.path().join(RunOutput::FINAL)).unwrap(),
            ));
        }
        assert_eq!(logs[0], logs[1]);
        let text = String::from_utf8(logs[0].1.clone()).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("{\"step\":1,\"phase\":\"pretrain_uniform\",\"loss\":"));
    }
}

#[test]
fn target_accuracy_stops_early() {
    let pairs = copy_pairs();
    let mut model = AnyModel::Insertion(tiny(1));
    let cfg = TrainConfig {
        target_accuracy: Some(0.0),
        ..quick(TrainMode::OnlyPretrainL2r, 40)
    };
    let s = train(&mut model, &pairs, &pairs, &cfg, None).unwrap();
    assert_eq!(s.steps, 10);
}

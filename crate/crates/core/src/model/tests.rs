use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tasks::{SLOT, STOP};
use crate::tensor::gradcheck::check_param_gradients;
use crate::tensor::{log_sum_exp, Tape, Tensor};
use crate::trajectory::{
    enumerate_trajectories, exact_marginal, left_to_right_trajectory, InsertionEvent, TokenId, Trajectory,
};

const V: usize = 7;

fn tiny(seed: u64) -> InsertionModel {
    InsertionModel::new(ModelConfig::tiny(V), seed).unwrap()
}

fn small_desk() -> InsertionModel {
    let cfg = ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        ..ModelConfig::desk(12)
    };
    InsertionModel::new(cfg, 3).unwrap()
}

fn readout(tape: &mut Tape<'_>, x: crate::tensor::Var) -> crate::tensor::Result<crate::tensor::Var> {
    let t = tape.value(x);
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 5 + 1) % 7) as f64 / 3.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(t.shape().to_vec(), w)?);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn config_validation() {
    assert!(ModelConfig::desk(20).validate().is_ok());
    assert!(ModelConfig::transformer_base(20).validate().is_ok());
    let bad = ModelConfig {
        num_heads: 3,
        ..ModelConfig::desk(20)
    };
    assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    assert!(ModelConfig::desk(4).validate().is_err());
    assert_eq!(ModelConfig::preset("desk", 9), Some(ModelConfig::desk(9)));
}

#[test]
fn encoder_shapes_and_empty_source() {
    let m = tiny(1);
    let mut tape = Tape::new();
    let p = m.params().bind_frozen(&mut tape);
    let enc = m.encode(&mut tape, &p, &[&[4, 5, 6], &[]], &mut None).unwrap();
    assert_eq!(tape.value(enc.memory).shape(), &[4, 8]);
    assert_eq!(enc.ranges, vec![0..3, 3..4]);
}

#[test]
fn length_limits_are_enforced() {
    let m = tiny(1);
    let long = vec![4; 17];
    assert!(matches!(
        m.insertion_distribution(&long, &[]),
        Err(ModelError::TooLong { what: "source", .. })
    ));
    assert!(matches!(
        m.insertion_distribution(&[4], &long[..16]),
        Err(ModelError::TooLong { .. })
    ));
    assert!(m.insertion_distribution(&[4], &long[..15]).is_ok());
    assert!(matches!(
        m.insertion_distribution(&[40], &[]),
        Err(ModelError::TokenOutOfRange { token: 40, .. })
    ));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let m = tiny(2);
    let report = check_param_gradients(m.params(), 1e-5, |tape, p| -> Result<_> {
        let enc = m.encode(tape, p, &[&[4, 6, 5, 4]], &mut None)?;
        Ok(readout(tape, enc.memory)?)
    })
    .unwrap();
    assert!(report.overall < 1e-4, "{}", report.overall);
    let embed = m.params().id("encoder.embed").unwrap();
    assert!(report.rel_errors[embed.index()] < 1e-4);
}

#[test]
fn head_hand_example() {
    // H·w_loc = [ln 2, 0], token logits all zero.
    let mut tape = Tape::new();
    let h = tape.leaf(Tensor::from_rows(&[&[2f64.ln(), 0.0], &[0.0, 0.0]]));
    let w_loc = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
    let w_tok = tape.leaf(Tensor::zeros(&[2, 3]));
    let joint = insertion_head(
        &mut tape,
        h,
        w_loc,
        w_tok,
        std::iter::once(0..2).collect(),
        vec![true; 6],
    )
    .unwrap();
    let want = [2.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0];
    for (lp, w) in tape.value(joint).data().iter().zip(want) {
        assert!((lp.exp() - w).abs() < 1e-12);
    }
}

#[test]
fn token_mask_allows_stop_only_in_last_slot() {
    let mask = insertion_token_mask(&[0..2, 2..3], V);
    let allowed = |r: usize, t: TokenId| mask[r * V + t as usize];
    assert!(!allowed(0, STOP) && allowed(1, STOP) && allowed(2, STOP));
    assert!(!allowed(0, SLOT) && !allowed(1, 0) && allowed(0, 4) && allowed(2, 6));
}

#[test]
fn distributions_are_normalized() {
    let m = small_desk();
    let src: Vec<TokenId> = vec![4, 7, 9, 11, 5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for len in 0..=10 {
        let partial: Vec<TokenId> = (0..len).map(|_| rand::Rng::gen_range(&mut rng, 4..12)).collect();
        let d = m.insertion_distribution(&src, &partial).unwrap();
        assert_eq!(d.slots(), len + 1);
        assert!((d.total_mass() - 1.0).abs() < 1e-9, "len {len}: {}", d.total_mass());
        for t in 0..4 {
            if t != STOP {
                assert_eq!(d.log_prob(InsertionEvent::insert(0, t)), f64::NEG_INFINITY);
            }
        }
        assert_eq!(d.log_prob(InsertionEvent::insert(len, STOP)), f64::NEG_INFINITY);
    }
}

#[test]
fn zero_location_weights_give_uniform_positions() {
    let mut m = small_desk();
    let id = m.w_loc();
    m.params_mut().get_mut(id).data_mut().fill(0.0);
    let d = m.insertion_distribution(&[4, 5], &[6, 7, 8]).unwrap();
    let v = d.vocab();
    for pos in 0..4 {
        let mut mass: f64 = d.insert_grid()[pos * v..(pos + 1) * v].iter().map(|l| l.exp()).sum();
        if pos == 3 {
            mass += d.eos_log_prob().exp();
        }
        assert!((mass - 0.25).abs() < 1e-12, "slot {pos}: {mass}");
    }
}

#[test]
fn single_token_trajectory_is_two_factors() {
    let m = tiny(4);
    let src = [5, 6];
    let traj = left_to_right_trajectory(&[4]);
    let a = m
        .insertion_distribution(&src, &[])
        .unwrap()
        .log_prob(InsertionEvent::insert(0, 4));
    let b = m.insertion_distribution(&src, &[4]).unwrap().eos_log_prob();
    let lp = m.trajectory_log_prob_value(&src, &traj).unwrap();
    assert!((lp - (a + b)).abs() < 1e-12);
    assert_eq!(
        lp.to_bits(),
        m.trajectory_log_prob_value(&src, &traj).unwrap().to_bits()
    );
}

#[test]
fn trajectory_gradient_matches_finite_differences() {
    let m = tiny(6);
    let src = [4, 5, 6];
    let traj: Trajectory = "0:5 0:4 2:6 EOS".parse().unwrap();
    let report =
        check_param_gradients(m.params(), 1e-5, |tape, p| m.trajectory_log_prob(tape, p, &src, &traj)).unwrap();
    assert!(report.overall < 1e-4, "overall {}", report.overall);
    // Key biases shift every score of a query equally, so their true gradient
    // is zero and only finite-difference noise remains.
    for (id, err) in m.params().ids().zip(&report.rel_errors) {
        let name = m.params().name(id);
        assert!(name.ends_with(".k.b") || *err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn trajectory_probabilities_sum_to_exact_marginal() {
    let m = tiny(7);
    for (src, y) in [
        (vec![4, 5], vec![5, 4]),
        (vec![6], vec![4, 4, 6]),
        (vec![4, 5, 6], vec![6, 5, 5, 4]),
    ] {
        let total: f64 = enumerate_trajectories(&y)
            .unwrap()
            .iter()
            .map(|t| m.trajectory_log_prob_value(&src, t).unwrap().exp())
            .sum();
        let exact = exact_marginal(&y, &src, &m).unwrap();
        assert!(((total - exact) / exact).abs() < 1e-9, "{y:?}: {total} vs {exact}");
    }
}

#[test]
fn decoder_has_no_causal_mask() {
    let m = small_desk();
    let a = m.insertion_distribution(&[4], &[5, 6, 7, 8]).unwrap();
    let b = m.insertion_distribution(&[4], &[5, 6, 7, 9]).unwrap();
    let v = a.vocab();
    for slot in 0..5 {
        let ra = &a.insert_grid()[slot * v..(slot + 1) * v];
        let rb = &b.insert_grid()[slot * v..(slot + 1) * v];
        let diff = ra
            .iter()
            .zip(rb)
            .filter(|(x, _)| x.is_finite())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "slot {slot} unaffected by the last token");
    }
}

/// Token log-probabilities conditioned on slot `pos`.
fn token_given_slot(m: &InsertionModel, partial: &[TokenId], pos: usize) -> Vec<f64> {
    let d = m.insertion_distribution(&[4, 5], partial).unwrap();
    let v = d.vocab();
    let row = &d.insert_grid()[pos * v..(pos + 1) * v];
    let lz = log_sum_exp(row.iter().copied());
    row.iter().map(|l| l - lz).collect()
}

#[test]
fn positions_are_recomputed_after_each_insertion() {
    // Silence decoder self-attention so each slot state depends only on its
    // own token and position.
    let mut m = small_desk();
    for i in 0..2 {
        for part in ["w", "b"] {
            let id = m
                .params()
                .id(&format!("decoder.layers.{i}.self_attn.o.{part}"))
                .unwrap();
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
    }
    let base = token_given_slot(&m, &[6, 7], 0);
    let appended = token_given_slot(&m, &[6, 8, 7], 0);
    let prepended = token_given_slot(&m, &[8, 6, 7], 1);
    let max_diff = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .filter(|(x, _)| x.is_finite())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    assert!(max_diff(&base, &appended) < 1e-12);
    assert!(max_diff(&base, &prepended) > 1e-6);
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(&[0, 3], 4);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    let r = pe.row(1);
    assert!((r[0] - 3f64.sin()).abs() < 1e-15 && (r[1] - 3f64.cos()).abs() < 1e-15);
    assert!((r[2] - 0.03f64.sin()).abs() < 1e-15 && (r[3] - 0.03f64.cos()).abs() < 1e-15);
}

#[test]
fn dropout_only_changes_training_passes() {
    let m = tiny(8);
    let mut tape = Tape::new();
    let p = m.params().bind_frozen(&mut tape);
    let clean = m.encode(&mut tape, &p, &[&[4, 5, 6]], &mut None).unwrap();
    let clean = tape.value(clean.memory).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut drop = Some(Dropout {
        rate: 0.5,
        rng: &mut rng,
    });
    let noisy = m.encode(&mut tape, &p, &[&[4, 5, 6]], &mut drop).unwrap();
    assert_ne!(tape.value(noisy.memory), &clean);
    let again = m.encode(&mut tape, &p, &[&[4, 5, 6]], &mut None).unwrap();
    assert_eq!(tape.value(again.memory), &clean);
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path, &[("step".into(), "3".into())]).unwrap();
    let back = InsertionModel::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    let a = m.insertion_distribution(&[4], &[5]).unwrap();
    let b = back.insertion_distribution(&[4], &[5]).unwrap();
    for (x, y) in a.insert_grid().iter().zip(b.insert_grid()) {
        assert!((x - y).abs() < 1e-5 || (x.is_infinite() && y.is_infinite()));
    }
    assert!(BaselineModel::load(&path).is_err());
}

fn baseline() -> BaselineModel {
    BaselineModel::new(ModelConfig::tiny(V), 11).unwrap()
}

#[test]
fn baseline_single_token_is_two_softmax_factors() {
    let b = baseline();
    let rows = b.prefix_log_probs(&[4, 5], &[6]).unwrap();
    let lp = b.log_prob_value(&[4, 5], &[6]).unwrap();
    assert!((lp - (rows[0][6] + rows[1][STOP as usize])).abs() < 1e-12);
    for row in &rows {
        assert!((row.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[SLOT as usize], f64::NEG_INFINITY);
    }
}

#[test]
fn baseline_is_causal() {
    let b = baseline();
    let a = b.prefix_log_probs(&[4], &[4, 5, 6, 4]).unwrap();
    let c = b.prefix_log_probs(&[4], &[4, 5, 4, 4]).unwrap();
    // Row i predicts token i from the tokens before it.
    for i in 0..=2 {
        assert_eq!(a[i], c[i], "row {i}");
    }
    assert_ne!(a[3], c[3]);
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let b = baseline();
    let y: Vec<TokenId> = vec![5, 4, 6, 6];
    let src: Vec<TokenId> = vec![6, 5];
    let full = b.prefix_log_probs(&src, &y).unwrap();
    let enc = b.encode_sources(&[&[4], &src]).unwrap();
    let mut state = b.start_state();
    for (i, want) in full.iter().enumerate() {
        let other = b.start_state();
        let steps = b.step(&enc, &[(0, &other), (1, &state)]).unwrap();
        for (x, w) in steps[1].log_probs.iter().zip(want) {
            assert!(
                (x - w).abs() < 1e-10 || (x.is_infinite() && w.is_infinite()),
                "step {i}"
            );
        }
        if i < y.len() {
            state = state.extend(&steps[1].cache, y[i]);
        }
    }
}

#[test]
fn baseline_gradient_matches_finite_differences() {
    let b = baseline();
    let report = check_param_gradients(b.params(), 1e-5, |tape, p| b.log_prob(tape, p, &[4, 6], &[6, 4, 5])).unwrap();
    assert!(report.overall < 1e-4, "{}", report.overall);
}

//! Hand-built step models for oracle checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{left_to_right_trajectory, InsertionDistribution, InsertionEvent, Result, StepModel, TokenId, Trajectory};

/// Every event equally likely.
#[derive(Clone, Debug)]
pub struct UniformStub {
    pub vocab: usize,
}

impl StepModel for UniformStub {
    fn distribution(&self, _src: &[TokenId], partial: &[TokenId]) -> Result<InsertionDistribution> {
        let slots = partial.len() + 1;
        let lp = -((slots * self.vocab + 1) as f64).ln();
        Ok(InsertionDistribution::new(
            slots,
            self.vocab,
            vec![lp; slots * self.vocab],
            lp,
        ))
    }
}

/// Random logits that are a deterministic function of `(seed, src, partial)`.
#[derive(Clone, Debug)]
pub struct RandomStub {
    pub vocab: usize,
    pub seed: u64,
    /// Logits are uniform in `[-spread, spread]`.
    pub spread: f64,
}

fn fnv1a(seed: u64, parts: &[&[TokenId]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for part in parts {
        for &t in part.iter() {
            for b in t.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl StepModel for RandomStub {
    fn distribution(&self, src: &[TokenId], partial: &[TokenId]) -> Result<InsertionDistribution> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, &[src, partial]));
        let slots = partial.len() + 1;
        let mut draw = || rng.gen_range(-self.spread..=self.spread);
        let insert: Vec<f64> = (0..slots * self.vocab).map(|_| draw()).collect();
        let eos = draw();
        Ok(InsertionDistribution::from_logits(slots, self.vocab, insert, eos))
    }
}

/// Puts all mass on the next event of one trajectory while the partial output
/// is on that trajectory; uniform elsewhere.
#[derive(Clone, Debug)]
pub struct ConcentratedStub {
    pub vocab: usize,
    states: Vec<(Vec<TokenId>, InsertionEvent)>,
}

impl ConcentratedStub {
    pub fn new(vocab: usize, traj: &Trajectory) -> Self {
        let states = traj.partials().into_iter().zip(traj.events().iter().copied()).collect();
        Self { vocab, states }
    }
}

impl StepModel for ConcentratedStub {
    fn distribution(&self, src: &[TokenId], partial: &[TokenId]) -> Result<InsertionDistribution> {
        let Some((_, ev)) = self.states.iter().find(|(p, _)| p == partial) else {
            return UniformStub { vocab: self.vocab }.distribution(src, partial);
        };
        let slots = partial.len() + 1;
        let mut insert = vec![f64::NEG_INFINITY; slots * self.vocab];
        let mut eos = f64::NEG_INFINITY;
        match *ev {
            InsertionEvent::Eos => eos = 0.0,
            InsertionEvent::Insert { pos, token } => insert[pos * self.vocab + token as usize] = 0.0,
        }
        Ok(InsertionDistribution::new(slots, self.vocab, insert, eos))
    }
}

/// Always appends the next target token, then stops.
pub fn left_to_right_stub(vocab: usize, target: &[TokenId]) -> ConcentratedStub {
    ConcentratedStub::new(vocab, &left_to_right_trajectory(target))
}

use super::{InsertionEvent, Result, TokenId};

/// Log-probabilities of every event available at a partial output of length
/// `slots - 1`: a `slots × vocab` grid of inserts plus the `Eos` event.
/// Impossible events hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionDistribution {
    slots: usize,
    vocab: usize,
    insert: Vec<f64>,
    eos: f64,
}

impl InsertionDistribution {
    pub fn new(slots: usize, vocab: usize, insert: Vec<f64>, eos: f64) -> Self {
        assert_eq!(insert.len(), slots * vocab, "grid size");
        Self {
            slots,
            vocab,
            insert,
            eos,
        }
    }

    /// Normalizes arbitrary scores with one softmax over the whole event space.
    pub fn from_logits(slots: usize, vocab: usize, insert: Vec<f64>, eos: f64) -> Self {
        let lz = crate::tensor::log_sum_exp(insert.iter().copied().chain(std::iter::once(eos)));
        Self::new(slots, vocab, insert.into_iter().map(|l| l - lz).collect(), eos - lz)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Row-major `slots × vocab` insert log-probabilities.
    pub fn insert_grid(&self) -> &[f64] {
        &self.insert
    }

    pub fn eos_log_prob(&self) -> f64 {
        self.eos
    }

    pub fn log_prob(&self, ev: InsertionEvent) -> f64 {
        match ev {
            InsertionEvent::Eos => self.eos,
            InsertionEvent::Insert { pos, token } => {
                let t = token as usize;
                if pos < self.slots && t < self.vocab {
                    self.insert[pos * self.vocab + t]
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Every event with its log-probability, in canonical event order.
    pub fn events(&self) -> impl Iterator<Item = (InsertionEvent, f64)> + '_ {
        self.insert
            .iter()
            .enumerate()
            .map(|(i, &lp)| {
                let ev = InsertionEvent::Insert {
                    pos: i / self.vocab,
                    token: (i % self.vocab) as TokenId,
                };
                (ev, lp)
            })
            .chain(std::iter::once((InsertionEvent::Eos, self.eos)))
    }

    pub fn total_mass(&self) -> f64 {
        self.insert.iter().map(|l| l.exp()).sum::<f64>() + self.eos.exp()
    }

    /// Most probable event; the first in canonical order wins ties.
    pub fn argmax(&self) -> (InsertionEvent, f64) {
        let mut best = (InsertionEvent::Eos, f64::NEG_INFINITY);
        let mut first = true;
        for (ev, lp) in self.events() {
            if first || lp > best.1 {
                best = (ev, lp);
                first = false;
            }
        }
        best
    }
}

/// A conditional distribution over insertion events given a source and the
/// current partial output.
pub trait StepModel {
    fn distribution(&self, src: &[TokenId], partial: &[TokenId]) -> Result<InsertionDistribution>;
}

impl<M: StepModel + ?Sized> StepModel for &M {
    fn distribution(&self, src: &[TokenId], partial: &[TokenId]) -> Result<InsertionDistribution> {
        (**self).distribution(src, partial)
    }
}

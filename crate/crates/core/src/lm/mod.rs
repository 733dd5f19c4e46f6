//! Left-to-right language models over system-call requests.
//!
//! Four models share one contract: for every position of a request they
//! return a distribution over the next system-call name given everything
//! before it. The n-gram baseline sees names only; the neural models see
//! the full joint representation of each event.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod neural;
pub mod ngram;
pub mod train;
pub mod transformer;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trace::Request;

pub use attention::{causal_self_attention, longformer_attention, AttentionPattern};
pub use checkpoint::AnyModel;
pub use neural::{lm_forward, Architecture, NeuralConfig, NeuralModel};
pub use ngram::{ngram_fit, NgramModel};
pub use train::{train, Precision, TrainConfig, TrainOutcome};

/// Dropout state threaded through a training forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// One row per target position, one column per name index.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDistributions {
    pub probs: Array2<f64>,
}

impl ConditionalDistributions {
    pub fn new(probs: Array2<f64>) -> Self {
        ConditionalDistributions { probs }
    }

    pub fn rows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.ncols()
    }

    /// Probability each row assigns to its target.
    pub fn target_probs(&self, targets: &[u32]) -> Vec<f64> {
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| self.probs[(i, t as usize)])
            .collect()
    }

    /// Most probable index per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<u32> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    }
}

pub trait LanguageModel {
    fn name_vocab_size(&self) -> usize;

    /// Name indices the model predicts for `request` (UNK for unseen names).
    fn target_indices(&self, request: &Request) -> Vec<u32>;

    fn conditionals(&self, request: &Request) -> Result<ConditionalDistributions>;

    /// Natural-log conditional probability of every event's name.
    fn target_log_probs(&self, request: &Request) -> Result<Vec<f64>> {
        let dists = self.conditionals(request)?;
        Ok(dists
            .target_probs(&self.target_indices(request))
            .into_iter()
            .map(f64::ln)
            .collect())
    }
}

/// Running cross-entropy / top-1 accuracy totals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PredictionStats {
    pub nll_sum: f64,
    pub correct: usize,
    pub positions: usize,
}

impl PredictionStats {
    pub fn add(&mut self, dists: &ConditionalDistributions, targets: &[u32]) {
        let preds = dists.argmax();
        for (i, &t) in targets.iter().enumerate() {
            self.nll_sum -= dists.probs[(i, t as usize)].ln();
            if preds[i] == t {
                self.correct += 1;
            }
        }
        self.positions += targets.len();
    }

    pub fn cross_entropy(&self) -> f64 {
        self.nll_sum / self.positions as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.positions as f64
    }
}

/// Mean per-position cross-entropy (nats) and top-1 accuracy over a
/// dataset.
pub fn evaluate<M: LanguageModel + ?Sized>(model: &M, dataset: &[Request]) -> Result<(f64, f64)> {
    let mut stats = PredictionStats::default();
    for r in dataset {
        let dists = model.conditionals(r)?;
        stats.add(&dists, &model.target_indices(r));
    }
    if stats.positions == 0 {
        return Err(Error::EmptyDataset("no positions to evaluate".into()));
    }
    Ok((stats.cross_entropy(), stats.accuracy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_hot_predictions_are_perfect() {
        let d = ConditionalDistributions::new(array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let mut s = PredictionStats::default();
        s.add(&d, &[1, 0]);
        assert_eq!(s.cross_entropy(), 0.0);
        assert_eq!(s.accuracy(), 1.0);
    }

    #[test]
    fn uniform_predictions() {
        let v = 4;
        let d = ConditionalDistributions::new(Array2::from_elem((8, v), 0.25));
        let targets: Vec<u32> = (0..8).map(|i| (i % v) as u32).collect();
        let mut s = PredictionStats::default();
        s.add(&d, &targets);
        assert!((s.cross_entropy() - (v as f64).ln()).abs() < 1e-12);
        // Ties resolve to index 0, which is the target in 2 of 8 rows.
        assert_eq!(s.accuracy(), 0.25);
    }

    #[test]
    fn hand_built_cross_entropy() {
        let d = ConditionalDistributions::new(array![[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]]);
        let mut s = PredictionStats::default();
        s.add(&d, &[0, 1, 1]);
        let expected = -(0.5f64.ln() + 0.8f64.ln() + 0.1f64.ln()) / 3.0;
        assert!((s.cross_entropy() - expected).abs() < 1e-15);
        // Row 0 ties at 0.5 and resolves to index 0.
        assert!((s.accuracy() - 2.0 / 3.0).abs() < 1e-15);
    }
}

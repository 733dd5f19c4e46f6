//! Count-based n-gram baseline over system-call names.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ConditionalDistributions, LanguageModel};
use crate::encode::{build_vocab, FieldVocab, Vocabulary, SOS};
use crate::error::{Error, Result};
use crate::trace::Request;

/// Continuation counts of one context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCounts {
    pub total: u64,
    pub next: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    pub n: usize,
    pub alpha: f64,
    pub vocab: Vocabulary,
    counts: BTreeMap<Vec<u32>, ContextCounts>,
}

/// Serialized form stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NgramState {
    pub n: usize,
    pub alpha: f64,
    pub counts: Vec<(Vec<u32>, Vec<(u32, u64)>)>,
}

/// The `n - 1` names preceding position `i`, left-padded with SOS.
pub fn context_at(names: &[u32], i: usize, n: usize) -> Vec<u32> {
    let k = n.saturating_sub(1);
    (0..k)
        .map(|j| {
            let back = k - j;
            if i >= back {
                names[i - back]
            } else {
                SOS
            }
        })
        .collect()
}

/// Counts every name n-gram in `corpus`. The name vocabulary keeps every
/// token seen at least once.
pub fn ngram_fit(corpus: &[Request], n: usize, alpha: f64) -> Result<NgramModel> {
    if n == 0 {
        return Err(Error::Invalid("n-gram order must be at least 1".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let full = build_vocab(corpus, 1)?;
    let vocab = Vocabulary {
        name: full.name,
        ..Vocabulary::default()
    };
    let mut counts: BTreeMap<Vec<u32>, ContextCounts> = BTreeMap::new();
    for r in corpus {
        let names = vocab.name_indices(r);
        for (i, &t) in names.iter().enumerate() {
            let c = counts.entry(context_at(&names, i, n)).or_default();
            c.total += 1;
            *c.next.entry(t).or_default() += 1;
        }
    }
    Ok(NgramModel {
        n,
        alpha,
        vocab,
        counts,
    })
}

impl NgramModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab.name.size()
    }

    pub fn context_count(&self, context: &[u32]) -> u64 {
        self.counts.get(context).map_or(0, |c| c.total)
    }

    pub fn joint_count(&self, context: &[u32], token: u32) -> u64 {
        self.counts
            .get(context)
            .and_then(|c| c.next.get(&token).copied())
            .unwrap_or(0)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Vec<u32>, &ContextCounts)> {
        self.counts.iter()
    }

    /// Smoothed `P(token | context)`.
    pub fn prob(&self, context: &[u32], token: u32) -> f64 {
        let v = self.vocab_size() as f64;
        let total = self.context_count(context);
        if total == 0 && self.alpha == 0.0 {
            return 1.0 / v;
        }
        (self.joint_count(context, token) as f64 + self.alpha) / (total as f64 + self.alpha * v)
    }

    fn fill_row(&self, context: &[u32], row: &mut [f64]) {
        let v = row.len() as f64;
        match self.counts.get(context) {
            // With or without smoothing an unseen context is uniform.
            None => row.fill(1.0 / v),
            Some(c) => {
                let denom = c.total as f64 + self.alpha * v;
                row.fill(self.alpha / denom);
                for (&t, &k) in &c.next {
                    row[t as usize] = (k as f64 + self.alpha) / denom;
                }
            }
        }
    }

    pub fn to_state(&self) -> NgramState {
        NgramState {
            n: self.n,
            alpha: self.alpha,
            counts: self
                .counts
                .iter()
                .map(|(ctx, c)| (ctx.clone(), c.next.iter().map(|(&t, &k)| (t, k)).collect()))
                .collect(),
        }
    }

    pub fn from_state(state: NgramState, names: FieldVocab) -> Result<Self> {
        let v = names.size() as u32;
        let mut counts = BTreeMap::new();
        for (ctx, next) in state.counts {
            if ctx.len() + 1 != state.n || ctx.iter().any(|&t| t >= v) {
                return Err(Error::Checkpoint(format!("bad n-gram context {ctx:?}")));
            }
            let mut c = ContextCounts::default();
            for (t, k) in next {
                if t >= v {
                    return Err(Error::Checkpoint(format!("n-gram token {t} outside vocabulary")));
                }
                c.total += k;
                c.next.insert(t, k);
            }
            counts.insert(ctx, c);
        }
        Ok(NgramModel {
            n: state.n,
            alpha: state.alpha,
            vocab: Vocabulary {
                name: names,
                ..Vocabulary::default()
            },
            counts,
        })
    }
}

/// Conditional next-name distributions of `request` under `model`.
pub fn ngram_score(model: &NgramModel, request: &Request) -> ConditionalDistributions {
    let names = model.vocab.name_indices(request);
    let mut probs = Array2::zeros((names.len(), model.vocab_size()));
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let ctx = context_at(&names, i, model.n);
        model.fill_row(&ctx, row.as_slice_mut().expect("row-major"));
    }
    ConditionalDistributions::new(probs)
}

impl LanguageModel for NgramModel {
    fn name_vocab_size(&self) -> usize {
        self.vocab_size()
    }

    fn target_indices(&self, request: &Request) -> Vec<u32> {
        self.vocab.name_indices(request)
    }

    fn conditionals(&self, request: &Request) -> Result<ConditionalDistributions> {
        Ok(ngram_score(self, request))
    }

    fn target_log_probs(&self, request: &Request) -> Result<Vec<f64>> {
        let names = self.vocab.name_indices(request);
        Ok((0..names.len())
            .map(|i| self.prob(&context_at(&names, i, self.n), names[i]).ln())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::UNK;
    use crate::trace::SyscallEvent;

    fn req(names: &str) -> Request {
        let events = names
            .split_whitespace()
            .enumerate()
            .map(|(i, n)| SyscallEvent {
                ts_ns: i as u64,
                name: n.to_string(),
                ret: 0,
                procname: "p".into(),
                tid: 1,
                pid: 1,
                entry: true,
            })
            .collect();
        Request::new(events, "id", 0)
    }

    #[test]
    fn bigram_count_ratio() {
        let m = ngram_fit(&[req("a b a b a")], 2, 0.0).unwrap();
        let a = m.vocab.name.lookup("a");
        let b = m.vocab.name.lookup("b");
        assert_eq!(m.prob(&[a], b), 1.0);
    }

    #[test]
    fn additive_smoothing_over_four_tokens() {
        let m = ngram_fit(&[req("a b a b a")], 2, 1.0).unwrap();
        assert_eq!(m.vocab_size(), 4);
        let a = m.vocab.name.lookup("a");
        let b = m.vocab.name.lookup("b");
        assert_eq!(m.prob(&[a], b), 0.5);
    }

    #[test]
    fn training_sequence_is_certain() {
        let m = ngram_fit(&[req("a b a b a")], 2, 0.0).unwrap();
        let lp = m.target_log_probs(&req("a b a b a")).unwrap();
        assert_eq!(lp, vec![0.0; 5]);
    }

    #[test]
    fn unigram_ignores_context() {
        let m = ngram_fit(&[req("a b a b a")], 1, 0.0).unwrap();
        let d = ngram_score(&m, &req("b b a"));
        let a = m.vocab.name.lookup("a") as usize;
        for row in d.probs.rows() {
            assert_eq!(row[a], 0.6);
        }
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = ngram_fit(&[req("a b a b a")], 2, 0.0).unwrap();
        let d = ngram_score(&m, &req("zzz a"));
        // Context of the second position is UNK, never observed.
        assert_eq!(context_at(&m.vocab.name_indices(&req("zzz a")), 1, 2), vec![UNK]);
        for &p in d.probs.row(1) {
            assert_eq!(p, 0.25);
        }
    }

    #[test]
    fn rows_are_normalized() {
        for alpha in [0.0, 0.1, 1.0] {
            let m = ngram_fit(&[req("a b c a b b c a"), req("c c a")], 3, alpha).unwrap();
            let d = ngram_score(&m, &req("a b c c zzz a b"));
            for row in d.probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn state_round_trip() {
        let m = ngram_fit(&[req("a b c a b b c a")], 3, 0.5).unwrap();
        let back = NgramModel::from_state(m.to_state(), m.vocab.name.clone()).unwrap();
        assert_eq!(back, m);
    }
}

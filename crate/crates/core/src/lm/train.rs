//! Training loop: Adam with linear warmup, plateau-driven learning-rate
//! decay, early stopping and best-validation snapshots.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::{gradient_check, GroupError};
use super::neural::{NeuralConfig, NeuralModel};
use super::{Dropout, LanguageModel, PredictionStats};
use crate::encode::{build_vocab, EncodedRequest};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::trace::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Standard,
    HighPrecisionCheck,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Precision::Standard),
            "high-precision-check" => Ok(Precision::HighPrecisionCheck),
            other => Err(Error::Invalid(format!("unknown precision mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate reached after warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Evaluations without improvement before the learning rate is halved.
    pub lr_patience: usize,
    /// Evaluations without improvement before training stops.
    pub stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Evaluate every this many updates; 0 evaluates once per epoch.
    pub eval_interval: usize,
    /// Hard cap on updates; 0 means no cap.
    pub max_steps: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: 100,
            label_smoothing: 0.0,
            dropout: 0.0,
            lr_patience: 2,
            stop_patience: 4,
            batch_size: 16,
            max_epochs: 10,
            seed: 0,
            precision: Precision::Standard,
            eval_interval: 0,
            max_steps: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", format!("must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if self.lr_patience == 0 {
            return bad("lr_patience", "must be at least 1".into());
        }
        if self.stop_patience == 0 {
            return bad("stop_patience", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", format!("must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// One row of the training progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub epoch: usize,
    pub step: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub fn write_progress_csv(path: &Path, rows: &[ProgressRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_progress(file, rows)
}

pub struct TrainOutcome {
    /// Best-validation snapshot.
    pub model: NeuralModel<f32>,
    pub progress: Vec<ProgressRow>,
    pub best_val_ce: f64,
    pub gradient_check: Option<Vec<GroupError>>,
}

struct Adam<F> {
    m: Vec<ndarray::Array2<F>>,
    v: Vec<ndarray::Array2<F>>,
    t: i32,
}

impl<F: Real> Adam<F> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &NeuralModel<F>) -> Self {
        let shapes: Vec<_> = model.params().iter().map(|(_, p)| p.value.raw_dim()).collect();
        Adam {
            m: shapes.iter().map(|s| ndarray::Array2::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ndarray::Array2::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut NeuralModel<F>, lr: f64, clip_scale: f64) {
        self.t += 1;
        let (b1, b2) = (F::of(Self::BETA1), F::of(Self::BETA2));
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let step = F::of(lr * c2.sqrt() / c1);
        let eps = F::of(Self::EPS);
        let scale = F::of(clip_scale);
        let one = F::one();
        for (k, (_, p)) in model.params_mut().into_iter().enumerate() {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .for_each(|w, &g, m, v| {
                    let g = g * scale;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

fn grad_norm<F: Real>(model: &NeuralModel<F>) -> f64 {
    model
        .params()
        .iter()
        .map(|(_, p)| p.grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn encode_all<F: Real>(model: &NeuralModel<F>, data: &[Request]) -> Result<Vec<EncodedRequest<F>>> {
    data.iter()
        .filter(|r| !r.is_empty())
        .map(|r| model.encode(r))
        .collect()
}

fn validate_model<F: Real>(model: &NeuralModel<F>, val: &[EncodedRequest<F>]) -> Result<(f64, f64)> {
    let mut stats = PredictionStats::default();
    for enc in val {
        let x = model.inputs(enc)?;
        let probs = super::layers::softmax_rows(&model.logits(&x)?);
        stats.add(&super::ConditionalDistributions::new(probs), &enc.targets);
    }
    Ok((stats.cross_entropy(), stats.accuracy()))
}

/// Learning rate at `step` (0-based) before plateau reductions.
pub fn warmup_lr(peak: f64, warmup_steps: usize, step: usize) -> f64 {
    if warmup_steps == 0 {
        peak
    } else {
        peak * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

fn run<F: Real>(
    mut model: NeuralModel<F>,
    train: &[Request],
    val: &[Request],
    cfg: &TrainConfig,
) -> Result<(NeuralModel<F>, Vec<ProgressRow>, f64)> {
    let train_enc = encode_all(&model, train)?;
    let val_enc = encode_all(&model, val)?;
    if train_enc.is_empty() || val_enc.is_empty() {
        return Err(Error::EmptyDataset("train and validation splits need events".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    let mut progress = Vec::new();
    let mut best = (f64::INFINITY, model.clone());
    let (mut lr_factor, mut since_best, mut since_decay) = (1.0, 0usize, 0usize);
    let (mut step, mut window_loss, mut window_pos) = (0usize, 0.0, 0usize);

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let positions: usize = batch.iter().map(|&i| train_enc[i].len()).sum();
            let scale = 1.0 / positions as f64;
            model.zero_grad();
            let mut loss = 0.0;
            for &i in batch.iter() {
                loss += if cfg.dropout > 0.0 {
                    let mut d = Dropout {
                        p: cfg.dropout,
                        rng: &mut rng,
                    };
                    model.accumulate_gradients(&train_enc[i], cfg.label_smoothing, scale, Some(&mut d))?
                } else {
                    model.accumulate_gradients(&train_enc[i], cfg.label_smoothing, scale, None)?
                };
            }
            let norm = grad_norm(&model);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: loss / positions as f64,
                });
            }
            let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            let lr = warmup_lr(cfg.lr, cfg.warmup_steps, step) * lr_factor;
            adam.step(&mut model, lr, clip);
            step += 1;
            window_loss += loss;
            window_pos += positions;

            let epoch_end = bi + 1 == batches.len();
            let due = if cfg.eval_interval == 0 {
                epoch_end
            } else {
                step % cfg.eval_interval == 0
            };
            let capped = cfg.max_steps > 0 && step >= cfg.max_steps;
            if due || capped {
                let (val_ce, val_acc) = validate_model(&model, &val_enc)?;
                if !val_ce.is_finite() {
                    return Err(Error::Diverged { step, loss: val_ce });
                }
                progress.push(ProgressRow {
                    epoch,
                    step,
                    train_ce: window_loss / window_pos as f64,
                    val_ce,
                    val_acc,
                    lr,
                });
                log::info!("epoch {epoch} step {step}: train {:.4} val {val_ce:.4} acc {val_acc:.4}", window_loss / window_pos as f64);
                window_loss = 0.0;
                window_pos = 0;
                if val_ce < best.0 - 1e-4 {
                    best = (val_ce, model.clone());
                    since_best = 0;
                    since_decay = 0;
                } else {
                    since_best += 1;
                    since_decay += 1;
                    if since_decay >= cfg.lr_patience {
                        lr_factor *= 0.5;
                        since_decay = 0;
                    }
                    if since_best >= cfg.stop_patience {
                        break 'epochs;
                    }
                }
            }
            if capped {
                break 'epochs;
            }
        }
    }
    Ok((best.1, progress, best.0))
}

/// Builds the vocabulary from `train` and trains a model of the given
/// architecture. In high-precision-check mode the model trains in `f64`
/// and its gradients are checked against finite differences first.
pub fn train(
    neural: &NeuralConfig,
    train: &[Request],
    val: &[Request],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    neural.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset("train and validation splits must be non-empty".into()));
    }
    let vocab = build_vocab(train, neural.min_count)?;
    match cfg.precision {
        Precision::Standard => {
            let model = NeuralModel::<f32>::new(neural.clone(), vocab, cfg.seed)?;
            let (model, progress, best_val_ce) = run(model, train, val, cfg)?;
            Ok(TrainOutcome {
                model,
                progress,
                best_val_ce,
                gradient_check: None,
            })
        }
        Precision::HighPrecisionCheck => {
            let mut model = NeuralModel::<f64>::new(neural.clone(), vocab, cfg.seed)?;
            let probe: Vec<EncodedRequest<f64>> = train
                .iter()
                .filter(|r| !r.is_empty())
                .take(2)
                .map(|r| model.encode(&r.clone().truncate(6)))
                .collect::<Result<_>>()?;
            let check = gradient_check(&mut model, &probe, cfg.label_smoothing, 1e-6)?;
            if let Some(worst) = check.iter().find(|g| g.relative_error >= 1e-4) {
                log::warn!("gradient check: {} relative error {:.3e}", worst.name, worst.relative_error);
            }
            let (model, progress, best_val_ce) = run(model, train, val, cfg)?;
            Ok(TrainOutcome {
                model: model.cast(),
                progress,
                best_val_ce,
                gradient_check: Some(check),
            })
        }
    }
}

/// Mean per-position cross-entropy in bits.
pub fn bits_per_token<M: LanguageModel + ?Sized>(model: &M, data: &[Request]) -> Result<f64> {
    Ok(super::evaluate(model, data)?.0 / std::f64::consts::LN_2)
}

pub fn write_progress<W: Write>(w: W, rows: &[ProgressRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<progress>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 10), 1.0);
        assert_eq!(warmup_lr(0.5, 0, 0), 0.5);
    }

    #[test]
    fn config_ranges() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.dropout = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "dropout"));
        let c = TrainConfig {
            stop_patience: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

//! Perplexity scoring, threshold calibration and detection metrics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::trace::Request;

/// Perplexity score of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScore {
    pub request_id: usize,
    pub label: String,
    pub length: usize,
    /// Natural-log joint probability.
    pub log_prob: f64,
    pub perplexity: f64,
}

/// Sum of natural-log conditionals, never multiplying raw probabilities.
pub fn log_prob_of(conditionals: &[f64]) -> f64 {
    conditionals.iter().map(|p| p.ln()).sum()
}

/// `exp(-log_prob / n)`.
pub fn perplexity_of(log_prob: f64, n: usize) -> f64 {
    (-log_prob / n as f64).exp()
}

/// Joint natural-log probability of `request`. A zero conditional yields
/// negative infinity and a warning.
pub fn sequence_log_prob<M: LanguageModel + ?Sized>(model: &M, request: &Request) -> Result<f64> {
    let lp: f64 = model.target_log_probs(request)?.iter().sum();
    if lp == f64::NEG_INFINITY {
        log::warn!("request of {} events has a zero-probability token", request.len());
    } else if lp.is_nan() {
        return Err(Error::NonFinite("log-probability is NaN".into()));
    }
    Ok(lp)
}

pub fn perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    request: &Request,
    request_id: usize,
) -> Result<NoveltyScore> {
    if request.is_empty() {
        return Err(Error::EmptyDataset(format!("request {request_id} has no events")));
    }
    let log_prob = sequence_log_prob(model, request)?;
    Ok(NoveltyScore {
        request_id,
        label: request.label.clone(),
        length: request.len(),
        log_prob,
        perplexity: perplexity_of(log_prob, request.len()),
    })
}

/// Scores every request, ids following input order.
pub fn score_requests<M: LanguageModel + ?Sized>(model: &M, requests: &[Request]) -> Result<Vec<NoveltyScore>> {
    requests
        .iter()
        .enumerate()
        .map(|(i, r)| perplexity(model, r, i))
        .collect()
}

pub fn perplexities(scores: &[NoveltyScore]) -> Vec<f64> {
    scores.iter().map(|s| s.perplexity).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    pub behavior: String,
    /// F-score reached on the calibration scores.
    pub f_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    InDistribution,
    Novelty,
}

/// Novel iff `score >= threshold`.
pub fn classify(score: f64, tm: &ThresholdModel) -> Decision {
    if score >= tm.threshold {
        Decision::Novelty
    } else {
        Decision::InDistribution
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Counts with novelty (OOD) as the positive class.
    pub fn at(threshold: f64, id: &[f64], ood: &[f64]) -> Self {
        let tp = ood.iter().filter(|&&s| s >= threshold).count();
        let fp = id.iter().filter(|&&s| s >= threshold).count();
        Confusion {
            tp,
            fp,
            tn: id.len() - fp,
            fn_: ood.len() - tp,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, 0 when both are 0. Computed
    /// as `2tp / (2tp + fp + fn)` so equal rationals give equal floats.
    pub fn f_score(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyDataset("both score lists must be non-empty".into()));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score list contains NaN".into()));
    }
    Ok(())
}

fn below(x: f64) -> f64 {
    if x > 0.0 {
        x / 2.0
    } else {
        x - 1.0
    }
}

fn above(x: f64) -> f64 {
    if x > 0.0 {
        x * 2.0
    } else {
        x + 1.0
    }
}

/// Candidate thresholds in increasing order: one below the smallest score,
/// midpoints between adjacent distinct finite scores, one above the largest
/// finite score. Infinite scores are novel under every candidate.
pub fn candidate_thresholds(id: &[f64], ood: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = id.iter().chain(ood).copied().filter(|s| s.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let (Some(&lo), Some(&hi)) = (v.first(), v.last()) else {
        return vec![1.0];
    };
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(below(lo));
    out.extend(v.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(above(hi));
    out
}

/// Threshold maximizing the F-score of `ood` (positive) against `id`; ties
/// go to the smallest threshold.
pub fn calibrate_threshold(id: &[f64], ood: &[f64], behavior: &str) -> Result<ThresholdModel> {
    check_scores(id, ood)?;
    let cands = candidate_thresholds(id, ood);
    let mut labeled: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    labeled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sweep candidates upward; `k` scores fall below the current candidate.
    let (mut below_id, mut below_ood, mut k) = (0usize, 0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    for &t in &cands {
        while k < labeled.len() && labeled[k].0 < t {
            if labeled[k].1 {
                below_ood += 1;
            } else {
                below_id += 1;
            }
            k += 1;
        }
        let c = Confusion {
            tp: ood.len() - below_ood,
            fp: id.len() - below_id,
            tn: below_id,
            fn_: below_ood,
        };
        let f = c.f_score();
        if best.is_none_or(|(bf, _)| f > bf) {
            best = Some((f, t));
        }
    }
    let (f_score, threshold) = best.expect("at least one candidate");
    Ok(ThresholdModel {
        threshold,
        behavior: behavior.to_string(),
        f_score,
    })
}

/// Single threshold over every OOD behavior at once.
pub fn calibrate_pooled(id: &[f64], oods: &[&[f64]]) -> Result<ThresholdModel> {
    let pooled: Vec<f64> = oods.iter().flat_map(|s| s.iter().copied()).collect();
    calibrate_threshold(id, &pooled, "pooled")
}

/// Probability that an OOD score exceeds an ID score, ties counting half
/// (Mann-Whitney), via midranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Positions i..j share the midrank of ranks i+1..=j.
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n_ood * (n_ood + 1.0) / 2.0) / (n_id * n_ood))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from `(0, 0)` (threshold above every score) down to `(1, 1)`
/// at the smallest score, one point per distinct score.
pub fn roc_curve(id: &[f64], ood: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(id, ood)?;
    let mut distinct: Vec<f64> = id.iter().chain(ood).copied().collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut sorted_id = id.to_vec();
    let mut sorted_ood = ood.to_vec();
    sorted_id.sort_by(|a, b| b.total_cmp(a));
    sorted_ood.sort_by(|a, b| b.total_cmp(a));
    let (mut a, mut b) = (0usize, 0usize);
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for t in distinct {
        while a < sorted_id.len() && sorted_id[a] >= t {
            a += 1;
        }
        while b < sorted_ood.len() && sorted_ood[b] >= t {
            b += 1;
        }
        out.push(RocPoint {
            threshold: t,
            fpr: a as f64 / id.len() as f64,
            tpr: b as f64 / ood.len() as f64,
        });
    }
    Ok(out)
}

/// Trapezoidal area under ROC points ordered by increasing fpr.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub behavior: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub auroc: f64,
    pub confusion: Confusion,
    pub roc: Vec<RocPoint>,
}

/// One line of a metrics file. `policy` is `per_behavior` when the
/// threshold was calibrated on this behavior alone, `pooled` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub policy: String,
    pub behavior: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub auroc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricsReport {
    pub fn row(&self, model: &str, policy: &str) -> MetricsRow {
        MetricsRow {
            model: model.into(),
            policy: policy.into(),
            behavior: self.behavior.clone(),
            threshold: self.threshold,
            precision: self.precision,
            recall: self.recall,
            f_score: self.f_score,
            auroc: self.auroc,
            tp: self.confusion.tp,
            fp: self.confusion.fp,
            tn: self.confusion.tn,
            fn_: self.confusion.fn_,
        }
    }
}

/// Applies a calibrated threshold to test scores.
pub fn metrics_from_scores(id: &[f64], ood: &[f64], tm: &ThresholdModel, behavior: &str) -> Result<MetricsReport> {
    check_scores(id, ood)?;
    let confusion = Confusion::at(tm.threshold, id, ood);
    Ok(MetricsReport {
        behavior: behavior.to_string(),
        threshold: tm.threshold,
        precision: confusion.precision(),
        recall: confusion.recall(),
        f_score: confusion.f_score(),
        auroc: auroc(id, ood)?,
        confusion,
        roc: roc_curve(id, ood)?,
    })
}

/// Scores both test splits and applies `tm` unchanged.
pub fn evaluate_detection<M: LanguageModel + ?Sized>(
    model: &M,
    tm: &ThresholdModel,
    id_test: &[Request],
    ood_test: &[Request],
) -> Result<MetricsReport> {
    if id_test.is_empty() || ood_test.is_empty() {
        return Err(Error::EmptyDataset("test splits must be non-empty".into()));
    }
    let id = perplexities(&score_requests(model, id_test)?);
    let ood = perplexities(&score_requests(model, ood_test)?);
    let behavior = ood_test[0].label.clone();
    metrics_from_scores(&id, &ood, tm, &behavior)
}

/// `count` delays spaced evenly in log space over `[lo_ns, hi_ns]`.
pub fn log_grid(lo_ns: f64, hi_ns: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo_ns],
        _ => {
            let (a, b) = (lo_ns.ln(), hi_ns.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// The default grid: 100 delays from 1 µs to 1 ms.
pub fn default_delays() -> Vec<f64> {
    log_grid(1e3, 1e6, 100)
}

/// `count` positions drawn uniformly (with replacement) from `0..len`.
pub fn delay_positions(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayPoint {
    pub delay_ns: f64,
    pub mean_pp: f64,
    pub std_pp: f64,
    pub baseline_pp: f64,
}

/// For every delay, scores one copy of `request` per position with that
/// delay added to the position's elapsed time; returns the mean and the
/// population standard deviation of the perplexities per delay.
pub fn inject_delays<M: LanguageModel + ?Sized>(
    model: &M,
    request: &Request,
    delays: &[f64],
    positions: &[usize],
) -> Result<Vec<DelayPoint>> {
    if request.is_empty() || positions.is_empty() {
        return Err(Error::EmptyDataset("delay injection needs events and positions".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= request.len()) {
        return Err(Error::Invalid(format!("position {p} outside request of {} events", request.len())));
    }
    if let Some(&d) = delays.iter().find(|&&d| !(d >= 0.0 && d.is_finite())) {
        return Err(Error::Invalid(format!("delay {d} must be finite and >= 0")));
    }
    let baseline = perplexity(model, request, 0)?.perplexity;
    let mut copy = request.clone();
    delays
        .iter()
        .map(|&delay| {
            let add = delay.round() as u64;
            let pps = positions
                .iter()
                .map(|&p| {
                    copy.deltas_ns[p] = request.deltas_ns[p] + add;
                    let pp = perplexity(model, &copy, 0).map(|s| s.perplexity);
                    copy.deltas_ns[p] = request.deltas_ns[p];
                    pp
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = pps.iter().sum::<f64>() / pps.len() as f64;
            let var = pps.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / pps.len() as f64;
            Ok(DelayPoint {
                delay_ns: delay,
                mean_pp: mean,
                std_pp: var.sqrt(),
                baseline_pp: baseline,
            })
        })
        .collect()
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j < idx.len() && v[idx[j]] == v[idx[i]] {
                j += 1;
            }
            let mid = (i + 1 + j) as f64 / 2.0;
            for &k in &idx[i..j] {
                r[k] = mid;
            }
            i = j;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Columns: request_id, label, length, log_prob, perplexity.
pub fn write_scores_csv(path: &Path, scores: &[NoveltyScore]) -> Result<()> {
    write_rows(path, scores)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<NoveltyScore>> {
    read_rows(path)
}

/// Columns: model, policy, behavior, threshold, precision, recall,
/// f_score, auroc, tp, fp, tn, fn.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    read_rows(path)
}

/// Columns: threshold, fpr, tpr.
pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    write_rows(path, points)
}

/// Columns: delay_ns, mean_pp, std_pp, baseline_pp.
pub fn write_delay_csv(path: &Path, points: &[DelayPoint]) -> Result<()> {
    write_rows(path, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ConditionalDistributions;
    use crate::trace::SyscallEvent;
    use ndarray::Array2;

    /// Assigns the same probability to every target.
    struct Constant {
        p: f64,
        v: usize,
    }

    impl LanguageModel for Constant {
        fn name_vocab_size(&self) -> usize {
            self.v
        }

        fn target_indices(&self, request: &Request) -> Vec<u32> {
            vec![0; request.len()]
        }

        fn conditionals(&self, request: &Request) -> Result<ConditionalDistributions> {
            let mut probs = Array2::from_elem((request.len(), self.v), (1.0 - self.p) / (self.v - 1) as f64);
            probs.column_mut(0).fill(self.p);
            Ok(ConditionalDistributions::new(probs))
        }
    }

    fn request(n: usize) -> Request {
        let events = (0..n)
            .map(|i| SyscallEvent {
                ts_ns: i as u64 * 10,
                name: "read".into(),
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
    fn joint_probability_of_repeated_conditionals() {
        let m = Constant { p: 0.95, v: 20 };
        let lp16 = sequence_log_prob(&m, &request(16)).unwrap();
        let lp24 = sequence_log_prob(&m, &request(24)).unwrap();
        assert!((lp16.exp() - 0.95f64.powi(16)).abs() < 1e-12);
        assert!((lp16.exp() - 0.44).abs() < 0.005);
        assert!((lp24.exp() - 0.29).abs() < 0.005);
    }

    #[test]
    fn perplexity_is_length_normalized() {
        let m = Constant { p: 0.95, v: 20 };
        for n in [16, 24] {
            let s = perplexity(&m, &request(n), 0).unwrap();
            assert!((s.perplexity - 1.0 / 0.95).abs() < 1e-9);
        }
    }

    #[test]
    fn perplexity_of_hand_built_conditionals() {
        let lp = log_prob_of(&[0.5, 0.25, 0.125]);
        assert!((perplexity_of(lp, 3) - 4.0).abs() < 1e-12);
        assert_eq!(log_prob_of(&[0.3]), 0.3f64.ln());
        assert_eq!(perplexity_of(f64::NEG_INFINITY, 3), f64::INFINITY);
    }

    #[test]
    fn base_two_entropy_agrees() {
        let probs = [0.9, 0.05, 0.3, 0.71];
        let h2 = -probs.iter().map(|p: &f64| p.log2()).sum::<f64>() / 4.0;
        assert!((2f64.powf(h2) - perplexity_of(log_prob_of(&probs), 4)).abs() < 1e-9);
    }

    #[test]
    fn separable_calibration() {
        let tm = calibrate_threshold(&[1.0, 1.1, 1.2], &[2.0, 2.1], "x").unwrap();
        assert!((tm.threshold - 1.6).abs() < 1e-12);
        assert_eq!(tm.f_score, 1.0);
    }

    #[test]
    fn identical_lists_flag_everything() {
        let s = [1.0, 2.0, 3.0];
        let tm = calibrate_threshold(&s, &s, "x").unwrap();
        let p: f64 = 0.5;
        assert!((tm.f_score - 2.0 * p / (1.0 + p)).abs() < 1e-12);
        assert!(tm.threshold < 1.0);
    }

    #[test]
    fn interleaved_calibration() {
        let tm = calibrate_threshold(&[1.0, 3.0], &[2.0, 4.0], "x").unwrap();
        assert!((tm.f_score - 0.8).abs() < 1e-12);
        assert!(tm.threshold > 1.0 && tm.threshold <= 2.0);
    }

    #[test]
    fn classify_boundary() {
        let tm = ThresholdModel {
            threshold: 2.0,
            behavior: "x".into(),
            f_score: 1.0,
        };
        assert_eq!(classify(2.0, &tm), Decision::Novelty);
        assert_eq!(classify(2.0 - 1e-12, &tm), Decision::InDistribution);
        assert_eq!(classify(f64::INFINITY, &tm), Decision::Novelty);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn roc_curve_spans_unit_square() {
        let id = [1.0, 3.0, 3.0, f64::INFINITY];
        let ood = [2.0, 3.0, 4.0, f64::INFINITY];
        let roc = roc_curve(&id, &ood).unwrap();
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        assert!((roc_area(&roc) - auroc(&id, &ood).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn confusion_partitions_the_test_sets() {
        let tm = calibrate_threshold(&[1.0, 2.0, 5.0], &[3.0, 6.0], "x").unwrap();
        let r = metrics_from_scores(&[1.0, 2.5, 7.0, 0.5], &[3.0, 6.0, 2.0], &tm, "x").unwrap();
        let c = r.confusion;
        assert_eq!(c.tp + c.fp + c.tn + c.fn_, 7);
    }

    #[test]
    fn zero_delay_reproduces_baseline() {
        let m = Constant { p: 0.8, v: 5 };
        let r = request(10);
        let pts = inject_delays(&m, &r, &[0.0, 1e3], &delay_positions(10, 5, 1)).unwrap();
        assert_eq!(pts[0].mean_pp, pts[0].baseline_pp);
        assert_eq!(pts[0].std_pp, 0.0);
    }

    #[test]
    fn default_grid_spans_microsecond_to_millisecond() {
        let g = default_delays();
        assert_eq!(g.len(), 100);
        assert!((g[0] - 1e3).abs() < 1e-9 && (g[99] - 1e6).abs() < 1e-6);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn spearman_of_monotone_series() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}

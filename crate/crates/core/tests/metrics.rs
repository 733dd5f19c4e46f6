use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syscall_novelty::detect::{
    auroc, calibrate_threshold, classify, roc_area, roc_curve, Confusion, Decision, ThresholdModel,
};

/// Score sets with frequent ties, drawn on a coarse grid.
fn score_sets(seed: u64, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let grid = rng.random_range(2..40) as f64;
            let shift = rng.random_range(0.0..3.0);
            let (ni, no) = (rng.random_range(1..30), rng.random_range(1..30));
            let mut draw = |n: usize, mu: f64| -> Vec<f64> {
                (0..n).map(|_| ((mu + rng.random_range(0.0..4.0)) * grid).round() / grid + 0.5).collect()
            };
            (draw(ni, 0.0), draw(no, shift))
        })
        .collect()
}

/// Exact F-score of `score >= t` as a rational.
fn f_at(t: f64, id: &[f64], ood: &[f64]) -> Ratio<i64> {
    let tp = ood.iter().filter(|&&s| s >= t).count() as i64;
    let fp = id.iter().filter(|&&s| s >= t).count() as i64;
    let fn_ = ood.len() as i64 - tp;
    if tp == 0 {
        return Ratio::from_integer(0);
    }
    Ratio::new(2 * tp, 2 * tp + fp + fn_)
}

#[test]
fn calibration_equals_exhaustive_scan() {
    for (id, ood) in score_sets(1, 200) {
        // Every distinct partition is reached by thresholding at a score
        // value, or above all scores.
        let mut ts: Vec<f64> = id.iter().chain(&ood).copied().collect();
        ts.push(f64::INFINITY);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let best = ts.iter().map(|&t| f_at(t, &id, &ood)).max().unwrap();
        let first = *ts.iter().find(|&&t| f_at(t, &id, &ood) == best).unwrap();

        let tm = calibrate_threshold(&id, &ood, "x").unwrap();
        assert_eq!(f_at(tm.threshold, &id, &ood), best);
        assert_eq!(tm.f_score, *best.numer() as f64 / *best.denom() as f64);
        // Ties resolve to the smallest threshold: same partition as the
        // first optimal score value.
        assert_eq!(Confusion::at(tm.threshold, &id, &ood), Confusion::at(first, &id, &ood));
    }
}

fn mann_whitney(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            wins += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

#[test]
fn auroc_equals_pairwise_enumeration() {
    for (id, ood) in score_sets(2, 200) {
        let a = auroc(&id, &ood).unwrap();
        assert!((a - mann_whitney(&id, &ood)).abs() < 1e-9);
        assert!((roc_area(&roc_curve(&id, &ood).unwrap()) - a).abs() < 1e-9);
    }
}

#[test]
fn auroc_is_invariant_under_monotone_transforms() {
    let transforms: [fn(f64) -> f64; 4] = [f64::exp, f64::ln, |x| x * x * x + x, |x| 5.0 * x - 2.0];
    for (id, ood) in score_sets(3, 200) {
        let a = auroc(&id, &ood).unwrap();
        for f in transforms {
            let (ti, to): (Vec<f64>, Vec<f64>) = (id.iter().map(|&x| f(x)).collect(), ood.iter().map(|&x| f(x)).collect());
            assert!((auroc(&ti, &to).unwrap() - a).abs() < 1e-12);
        }
    }
}

#[test]
fn classification_is_invariant_under_positive_power_of_two_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let s: f64 = rng.random_range(0.0..50.0);
        let t: f64 = if rng.random_bool(0.1) { s } else { rng.random_range(0.0..50.0) };
        let c = 2f64.powi(rng.random_range(-20..20));
        let tm = |t| ThresholdModel { threshold: t, behavior: "x".into(), f_score: 0.0 };
        assert_eq!(classify(s, &tm(t)), classify(s * c, &tm(t * c)));
        assert_eq!(classify(s, &tm(t)) == Decision::Novelty, s >= t);
    }
}

#[test]
fn infinite_scores_are_always_novel() {
    let id = [1.0, 2.0, 3.0];
    let ood = [2.5, f64::INFINITY];
    let tm = calibrate_threshold(&id, &ood, "x").unwrap();
    assert_eq!(classify(f64::INFINITY, &tm), Decision::Novelty);
    assert_eq!(mann_whitney(&id, &ood), auroc(&id, &ood).unwrap());
}

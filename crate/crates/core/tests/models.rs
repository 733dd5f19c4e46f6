mod common;

use std::collections::HashMap;

use common::{ngram_matches_oracle, request, sample, toy_model, ARCHS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syscall_novelty::lm::{
    causal_self_attention, evaluate, longformer_attention, ngram_fit, AnyModel, Architecture, LanguageModel,
    NeuralModel,
};
use syscall_novelty::synth::{analytic_entropy_rate, BehaviorSpec, LengthDist};
use syscall_novelty::trace::Request;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn full_window_longformer_equals_causal_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..24);
        let heads = rng.random_range(1..4);
        let width = heads * rng.random_range(1..5);
        let (q, k, v) = (
            random_matrix(&mut rng, n, width),
            random_matrix(&mut rng, n, width),
            random_matrix(&mut rng, n, width),
        );
        let full = causal_self_attention(&q, &k, &v, heads).unwrap();
        let window = (n - 1).max(1) + rng.random_range(0..3);
        let sparse = longformer_attention(&q, &k, &v, heads, window, &[]).unwrap();
        let diff = (&full - &sparse).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-5, "n={n} heads={heads}: {diff}");
    }
}

#[test]
fn full_window_longformer_model_equals_transformer() {
    let spec = BehaviorSpec::reference(6, 1);
    let corpus = sample(&spec, 20, 2);
    let transformer: NeuralModel<f32> = toy_model(Architecture::Transformer, &corpus, 5);
    let mut cfg = transformer.config.clone();
    cfg.arch = Architecture::Longformer;
    cfg.window = 300;
    cfg.globals = 0;
    let mut longformer = NeuralModel::<f32>::new(cfg, transformer.vocab.clone(), 99).unwrap();
    let values: HashMap<String, Array2<f32>> =
        transformer.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
    longformer.load_values(values).unwrap();
    for r in &corpus {
        let a = transformer.conditionals(r).unwrap().probs;
        let b = longformer.conditionals(r).unwrap().probs;
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
        assert!(diff < 1e-5, "{diff}");
    }
}

#[test]
fn predictions_never_depend_on_future_events() {
    let spec = BehaviorSpec::reference(8, 2);
    let corpus = sample(&spec, 10, 4);
    for arch in ARCHS {
        let model: NeuralModel<f64> = toy_model(arch, &corpus, 11);
        for r in corpus.iter().take(4) {
            let base = model.conditionals(r).unwrap().probs;
            let j = r.len() / 2;
            let mut changed = r.clone();
            changed.events[j].name = if r.events[j].name == "read" { "write" } else { "read" }.into();
            changed.events[j].tid += 3;
            changed.deltas_ns[j] += 123_456;
            let after = model.conditionals(&changed).unwrap().probs;
            // Row i predicts event i from events 0..i; rows up to j must not move.
            for i in 0..=j {
                for c in 0..base.ncols() {
                    assert_eq!(base[(i, c)], after[(i, c)], "{arch}: row {i} saw event {j}");
                }
            }
            let later_moved = (j + 1..r.len()).any(|i| base.row(i) != after.row(i));
            assert!(later_moved, "{arch}: perturbation had no effect at all");
        }
    }
}

#[test]
fn ngram_matches_rational_counting_oracle() {
    let spec = BehaviorSpec::reference(10, 8);
    let corpus = sample(&spec, 1000, 21);
    let held_out = sample(&spec, 50, 22);
    let probe: Vec<Request> = corpus.iter().take(100).chain(&held_out).cloned().collect();
    for n in [1, 2, 3] {
        for alpha in [0, 1] {
            ngram_matches_oracle(&corpus, &probe, n, alpha).unwrap();
        }
    }
}

#[test]
fn bigram_cross_entropy_approaches_the_entropy_rate() {
    let mut spec = BehaviorSpec::reference(20, 7);
    // Long requests make the start-of-request positions negligible.
    spec.length = LengthDist { mean: 1000.0, stddev: 0.0, min: 1000, max: 1000 };
    let train = sample(&spec, 1000, 1);
    let test = sample(&spec, 100, 2);
    let model = ngram_fit(&train, 2, 0.01).unwrap();
    let bits = evaluate(&model, &test).unwrap().0 / std::f64::consts::LN_2;
    let rate = analytic_entropy_rate(&spec).unwrap();
    assert!((bits - rate).abs() < 0.05, "{bits} bits vs entropy rate {rate}");
}

#[test]
fn checkpoints_round_trip_every_model_kind() {
    let spec = BehaviorSpec::reference(6, 3);
    let corpus = sample(&spec, 8, 9);
    let dir = tempfile::tempdir().unwrap();
    let mut models = vec![AnyModel::Ngram(ngram_fit(&corpus, 3, 0.5).unwrap())];
    for arch in ARCHS {
        models.push(AnyModel::Neural(toy_model(arch, &corpus, 4)));
    }
    for (i, m) in models.iter().enumerate() {
        let path = dir.path().join(format!("{i}.ckpt"));
        m.save(&path, 77).unwrap();
        let (back, seed) = AnyModel::load(&path).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(&back, m);
        for r in &corpus {
            assert_eq!(back.target_log_probs(r).unwrap(), m.target_log_probs(r).unwrap());
        }
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let corpus = vec![request(&["read", "write", "read"], 10)];
    let model = AnyModel::Neural(toy_model(Architecture::Lstm, &corpus, 1));
    let bytes = model.to_bytes(0).unwrap();
    assert!(AnyModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(AnyModel::from_bytes(&bad_magic).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(AnyModel::from_bytes(&extra).is_err());
}

#[test]
fn unseen_names_map_to_unknown_and_stay_finite() {
    let corpus = vec![request(&["read", "write", "read", "write"], 10)];
    let model: NeuralModel<f32> = toy_model(Architecture::Transformer, &corpus, 2);
    let odd = request(&["read", "mmap", "ioctl"], 10);
    let lp = model.target_log_probs(&odd).unwrap();
    assert_eq!(lp.len(), 3);
    assert!(lp.iter().all(|x| x.is_finite() && *x < 0.0));
}

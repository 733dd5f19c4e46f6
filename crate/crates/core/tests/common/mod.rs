#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use num_rational::Ratio;
use syscall_novelty::encode::build_vocab;
use syscall_novelty::lm::ngram::context_at;
use syscall_novelty::lm::{ngram_fit, Architecture, LanguageModel, NeuralConfig, NeuralModel};
use syscall_novelty::synth::{generate_requests, BehaviorSpec};
use syscall_novelty::trace::{Request, SyscallEvent};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn event(name: &str, ts_ns: u64, tid: u32) -> SyscallEvent {
    SyscallEvent {
        ts_ns,
        name: name.into(),
        ret: 0,
        procname: "apache2".into(),
        tid,
        pid: 100,
        entry: true,
    }
}

/// Request with one event per name, `gap_ns` apart.
pub fn request(names: &[&str], gap_ns: u64) -> Request {
    let events = names
        .iter()
        .enumerate()
        .map(|(i, n)| event(n, 1_000 + i as u64 * gap_ns, 1))
        .collect();
    Request::new(events, "id", names.len() as u64 * gap_ns)
}

pub fn sample(spec: &BehaviorSpec, count: usize, seed: u64) -> Vec<Request> {
    generate_requests(spec, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn toy_config(arch: Architecture) -> NeuralConfig {
    NeuralConfig {
        layers: 2,
        width: 8,
        heads: 2,
        window: 2,
        globals: 1,
        d_e: 4,
        d: 4,
        ffn_mult: 2,
        min_count: 1,
        ..NeuralConfig::new(arch)
    }
}

/// A randomly initialized toy model over the names of `corpus`.
pub fn toy_model<F: syscall_novelty::tensor::Real>(arch: Architecture, corpus: &[Request], seed: u64) -> NeuralModel<F> {
    let cfg = toy_config(arch);
    let vocab = build_vocab(corpus, cfg.min_count).unwrap();
    NeuralModel::new(cfg, vocab, seed).unwrap()
}

pub const ARCHS: [Architecture; 3] = [Architecture::Lstm, Architecture::Transformer, Architecture::Longformer];

/// Brute-force counts over string contexts, independent of the model's
/// index space.
pub struct Oracle {
    pub joint: HashMap<(Vec<String>, String), i64>,
    pub context: HashMap<Vec<String>, i64>,
    pub vocab: i64,
}

pub fn oracle_context(names: &[String], i: usize, n: usize) -> Vec<String> {
    (0..n - 1)
        .map(|back| {
            let k = i as i64 - (n - 1 - back) as i64;
            if k < 0 { "<SOS>".to_string() } else { names[k as usize].clone() }
        })
        .collect()
}

impl Oracle {
    pub fn new(corpus: &[Vec<String>], n: usize) -> Self {
        let mut joint = HashMap::new();
        let mut context = HashMap::new();
        let mut names = HashSet::new();
        for r in corpus {
            for i in 0..r.len() {
                let ctx = oracle_context(r, i, n);
                *joint.entry((ctx.clone(), r[i].clone())).or_insert(0) += 1;
                *context.entry(ctx).or_insert(0) += 1;
                names.insert(r[i].clone());
            }
        }
        // Observed names plus the reserved unknown and start symbols.
        Oracle { joint, context, vocab: names.len() as i64 + 2 }
    }

    pub fn prob(&self, ctx: &[String], next: &str, alpha: i64) -> Ratio<i64> {
        let c = self.joint.get(&(ctx.to_vec(), next.to_string())).copied().unwrap_or(0);
        let total = self.context.get(ctx).copied().unwrap_or(0);
        if total == 0 && alpha == 0 {
            return Ratio::new(1, self.vocab);
        }
        Ratio::new(c + alpha, total + alpha * self.vocab)
    }
}

/// Compares every probability the fitted n-gram assigns along `probe`
/// with the oracle's exact rational; returns the number of positions.
pub fn ngram_matches_oracle(corpus: &[Request], probe: &[Request], n: usize, alpha: i64) -> Result<usize, String> {
    let names: Vec<Vec<String>> = corpus.iter().map(|r| r.names().map(String::from).collect()).collect();
    let oracle = Oracle::new(&names, n);
    let model = ngram_fit(corpus, n, alpha as f64).map_err(|e| e.to_string())?;
    if model.vocab_size() as i64 != oracle.vocab {
        return Err(format!("vocabulary {} vs oracle {}", model.vocab_size(), oracle.vocab));
    }
    let mut positions = 0;
    for r in probe {
        let rn: Vec<String> = r.names().map(String::from).collect();
        let idx = model.vocab.name_indices(r);
        let logp = model.target_log_probs(r).map_err(|e| e.to_string())?;
        for i in 0..rn.len() {
            let want = oracle.prob(&oracle_context(&rn, i, n), &rn[i], alpha);
            let ctx = context_at(&idx, i, n);
            let total = model.context_count(&ctx) as i64;
            let joint = model.joint_count(&ctx, idx[i]) as i64;
            let got = if total == 0 && alpha == 0 {
                Ratio::new(1, oracle.vocab)
            } else {
                Ratio::new(joint + alpha, total + alpha * oracle.vocab)
            };
            let exact = *want.numer() as f64 / *want.denom() as f64;
            if got != want || model.prob(&ctx, idx[i]) != exact || logp[i] != exact.ln() {
                return Err(format!("n={n} alpha={alpha} position {i}: {got} vs oracle {want}"));
            }
            positions += 1;
        }
    }
    Ok(positions)
}

//! Synthetic request workloads with a known ground-truth process.
//!
//! System-call names follow an order-1 Markov chain over a small alphabet.
//! The gap preceding each event is drawn from a per-state lognormal keyed by
//! the state of the *following* event, so inter-event timing carries
//! information about what the process does next while the name stream stays
//! exactly order-1 Markov.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{self, Request, SyscallEvent};

const NAMES: &[&str] = &[
    "read",
    "recvfrom",
    "epoll_wait",
    "write",
    "futex",
    "openat",
    "fstat",
    "close",
    "mmap",
    "getpid",
    "sendto",
    "poll",
    "writev",
    "lseek",
    "stat",
    "brk",
    "munmap",
    "accept4",
    "shutdown",
    "times",
];

/// Log-space spread of the reference gaps. Wide enough that ID traffic
/// covers the microsecond to millisecond range.
pub const REFERENCE_GAP_SIGMA: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub mean: f64,
    pub stddev: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub name: String,
    pub alphabet: Vec<String>,
    /// Row-stochastic transition matrix over `alphabet`.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    /// `(mu, sigma)` of the log-nanosecond gap preceding an event, indexed
    /// by the state of the event that follows it.
    pub delta_lognormal: Vec<(f64, f64)>,
    pub length: LengthDist,
    pub procname_dist: Vec<(String, f64)>,
    pub ret_dist: Vec<(i64, f64)>,
    pub entry_prob: f64,
    pub pid: u32,
    pub tid_pool: u32,
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidSpec(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

impl BehaviorSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.alphabet.len();
        if n == 0 {
            return Err(Error::InvalidSpec("empty alphabet".into()));
        }
        if self.alphabet.iter().any(String::is_empty) {
            return Err(Error::InvalidSpec("empty syscall name".into()));
        }
        if self.transition.len() != n || self.transition.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidSpec(format!("transition matrix is not {n}x{n}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_distribution(&format!("transition row {i}"), row)?;
        }
        if self.initial.len() != n {
            return Err(Error::InvalidSpec("initial vector length differs from alphabet".into()));
        }
        check_distribution("initial vector", &self.initial)?;
        if self.delta_lognormal.len() != n {
            return Err(Error::InvalidSpec("one gap distribution per state required".into()));
        }
        if self
            .delta_lognormal
            .iter()
            .any(|&(mu, sigma)| !mu.is_finite() || !sigma.is_finite() || sigma < 0.0)
        {
            return Err(Error::InvalidSpec("gap parameters must be finite with sigma >= 0".into()));
        }
        let l = &self.length;
        if l.min < 1 || l.min > l.max || !(l.stddev >= 0.0) || !l.mean.is_finite() {
            return Err(Error::InvalidSpec(format!("bad length distribution {l:?}")));
        }
        if self.procname_dist.is_empty() || self.procname_dist.iter().any(|(p, _)| p.is_empty()) {
            return Err(Error::InvalidSpec("procname distribution needs non-empty names".into()));
        }
        let w: Vec<f64> = self.procname_dist.iter().map(|(_, w)| *w).collect();
        check_distribution("procname distribution", &w)?;
        let w: Vec<f64> = self.ret_dist.iter().map(|(_, w)| *w).collect();
        check_distribution("ret distribution", &w)?;
        if !(0.0..=1.0).contains(&self.entry_prob) {
            return Err(Error::InvalidSpec("entry_prob outside [0, 1]".into()));
        }
        if self.tid_pool == 0 {
            return Err(Error::InvalidSpec("tid_pool must be positive".into()));
        }
        Ok(())
    }

    /// The reference in-distribution behavior: each state has three likely
    /// successors plus a small uniform floor that keeps the chain
    /// irreducible; median gap levels double across six tiers starting at
    /// 800 ns, with a heavy lognormal spread around each level.
    pub fn reference(alphabet_size: usize, seed: u64) -> Self {
        assert!(
            (2..=NAMES.len()).contains(&alphabet_size),
            "alphabet size must be in 2..={}",
            NAMES.len()
        );
        let n = alphabet_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor = 0.02;
        let succ_weights = [0.6, 0.25, 0.15];
        let transition = (0..n)
            .map(|_| {
                let mut states: Vec<usize> = (0..n).collect();
                states.shuffle(&mut rng);
                let mut row = vec![floor / n as f64; n];
                for (w, &s) in succ_weights.iter().zip(states.iter()) {
                    row[s] += (1.0 - floor) * w;
                }
                // Renormalize for alphabets smaller than the successor count.
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                row
            })
            .collect();
        let delta_lognormal = (0..n)
            .map(|s| ((800.0f64).ln() + (s % 6) as f64 * 2f64.ln(), REFERENCE_GAP_SIGMA))
            .collect();
        BehaviorSpec {
            name: "id".into(),
            alphabet: NAMES[..n].iter().map(|s| s.to_string()).collect(),
            transition,
            initial: vec![1.0 / n as f64; n],
            delta_lognormal,
            length: LengthDist {
                mean: 96.0,
                stddev: 32.0,
                min: 16,
                max: 256,
            },
            procname_dist: vec![
                ("apache2".into(), 0.85),
                ("php".into(), 0.10),
                ("mysqld".into(), 0.05),
            ],
            ret_dist: vec![(0, 0.55), (1, 0.1), (8, 0.15), (4096, 0.1), (-11, 0.1)],
            entry_prob: 0.5,
            pid: 4242,
            tid_pool: 8,
        }
    }

    pub fn renamed(&self, name: &str) -> Self {
        BehaviorSpec {
            name: name.into(),
            ..self.clone()
        }
    }

    /// Multiplies every inter-event gap by `factor` (CPU / latency analogue).
    pub fn with_latency_scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for (mu, _) in &mut out.delta_lognormal {
            *mu += factor.ln();
        }
        out
    }

    /// Blends every transition row with a distribution concentrated on two
    /// "hot" names (`write` and `getpid` when present), shifting the name
    /// mixture (IO analogue).
    pub fn with_mixture_shift(&self, weight: f64) -> Self {
        let n = self.alphabet.len();
        let find = |name: &str, fallback: usize| {
            self.alphabet.iter().position(|a| a == name).unwrap_or(fallback)
        };
        let a = find("write", n - 1);
        let mut b = find("getpid", n.saturating_sub(2));
        if b == a {
            b = (a + 1) % n;
        }
        let mut hot = vec![0.0; n];
        hot[a] += 0.5;
        hot[b] += 0.5;
        let mut out = self.clone();
        for row in &mut out.transition {
            for (x, h) in row.iter_mut().zip(&hot) {
                *x = (1.0 - weight) * *x + weight * h;
            }
        }
        out
    }

    /// Scales the request length distribution (Socket analogue).
    pub fn with_length_scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.length.mean *= factor;
        out.length.stddev *= factor.sqrt();
        out
    }

    /// Reassigns successor rows by a seeded permutation of the states, so
    /// name frequencies stay similar while transitions change (OPcache
    /// analogue).
    pub fn with_permuted_transitions(&self, seed: u64) -> Self {
        let n = self.alphabet.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Rotate after shuffling so no state keeps its own row.
        perm.shuffle(&mut rng);
        let mut out = self.clone();
        out.transition = (0..n).map(|s| self.transition[perm[(s + 1) % n]].clone()).collect();
        out
    }
}

/// Perturbation axes used to derive novel behaviors from the ID spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodKind {
    Latency,
    Mixture,
    Length,
    Structure,
}

impl OodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::Latency => "latency",
            OodKind::Mixture => "mixture",
            OodKind::Length => "length",
            OodKind::Structure => "structure",
        }
    }
}

impl FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "latency" => Ok(OodKind::Latency),
            "mixture" => Ok(OodKind::Mixture),
            "length" => Ok(OodKind::Length),
            "structure" => Ok(OodKind::Structure),
            other => Err(Error::Invalid(format!("unknown OOD behavior `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodParams {
    pub latency_scale: f64,
    pub mixture_weight: f64,
    pub length_scale: f64,
}

impl Default for OodParams {
    fn default() -> Self {
        OodParams {
            latency_scale: 10.0,
            mixture_weight: 0.5,
            length_scale: 2.0,
        }
    }
}

pub fn derive_ood(id: &BehaviorSpec, kind: OodKind, params: &OodParams, seed: u64) -> BehaviorSpec {
    let spec = match kind {
        OodKind::Latency => id.with_latency_scale(params.latency_scale),
        OodKind::Mixture => id.with_mixture_shift(params.mixture_weight),
        OodKind::Length => id.with_length_scale(params.length_scale),
        OodKind::Structure => id.with_permuted_transitions(seed ^ 0x5eed),
    };
    spec.renamed(kind.as_str())
}

/// Pre-built samplers for one behavior.
pub struct BehaviorSampler<'a> {
    spec: &'a BehaviorSpec,
    initial: WeightedIndex<f64>,
    rows: Vec<WeightedIndex<f64>>,
    procs: WeightedIndex<f64>,
    rets: WeightedIndex<f64>,
    length: Normal<f64>,
}

impl<'a> BehaviorSampler<'a> {
    pub fn new(spec: &'a BehaviorSpec) -> Result<Self> {
        spec.validate()?;
        let wi = |w: &[f64]| {
            WeightedIndex::new(w.iter().copied())
                .map_err(|e| Error::InvalidSpec(format!("weights: {e}")))
        };
        let procs: Vec<f64> = spec.procname_dist.iter().map(|(_, w)| *w).collect();
        let rets: Vec<f64> = spec.ret_dist.iter().map(|(_, w)| *w).collect();
        Ok(BehaviorSampler {
            spec,
            initial: wi(&spec.initial)?,
            rows: spec.transition.iter().map(|r| wi(r)).collect::<Result<_>>()?,
            procs: wi(&procs)?,
            rets: wi(&rets)?,
            length: Normal::new(spec.length.mean, spec.length.stddev)
                .map_err(|e| Error::InvalidSpec(format!("length: {e}")))?,
        })
    }

    /// Walks the chain for `len` states plus one look-ahead state.
    pub fn sample_states<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut states = Vec::with_capacity(len + 1);
        let mut s = self.initial.sample(rng);
        states.push(s);
        for _ in 0..len {
            s = self.rows[s].sample(rng);
            states.push(s);
        }
        states
    }

    fn sample_gap<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> u64 {
        let (mu, sigma) = self.spec.delta_lognormal[state];
        let log_gap = if sigma == 0.0 {
            mu
        } else {
            mu + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
        };
        log_gap.exp().round() as u64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Request {
        let l = &self.spec.length;
        let len = (self.length.sample(rng).round().max(0.0) as usize).clamp(l.min, l.max);
        let states = self.sample_states(len, rng);
        let tid = self.spec.pid + rng.random_range(0..self.spec.tid_pool);

        let mut ts = 0u64;
        let mut events = Vec::with_capacity(len);
        for k in 0..len {
            // Gap before event k is keyed by the state of event k + 1.
            ts += self.sample_gap(states[k + 1], rng);
            events.push(SyscallEvent {
                ts_ns: ts,
                name: self.spec.alphabet[states[k]].clone(),
                ret: self.spec.ret_dist[self.rets.sample(rng)].0,
                procname: self.spec.procname_dist[self.procs.sample(rng)].0.clone(),
                tid,
                pid: self.spec.pid,
                entry: rng.random_bool(self.spec.entry_prob),
            });
        }
        Request::new(events, self.spec.name.clone(), ts)
    }
}

pub fn generate_request<R: Rng + ?Sized>(spec: &BehaviorSpec, rng: &mut R) -> Result<Request> {
    Ok(BehaviorSampler::new(spec)?.sample(rng))
}

pub fn generate_requests(spec: &BehaviorSpec, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Request>> {
    let sampler = BehaviorSampler::new(spec)?;
    Ok((0..count).map(|_| sampler.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub id_behavior: BehaviorSpec,
    pub ood_behaviors: BTreeMap<String, BehaviorSpec>,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl WorkloadConfig {
    /// Reference ID behavior plus the requested perturbations.
    pub fn standard(
        alphabet_size: usize,
        kinds: &[OodKind],
        params: &OodParams,
        counts: SplitCounts,
        seed: u64,
    ) -> Self {
        let id = BehaviorSpec::reference(alphabet_size, seed);
        let ood_behaviors = kinds
            .iter()
            .map(|&k| (k.as_str().to_string(), derive_ood(&id, k, params, seed)))
            .collect();
        WorkloadConfig {
            id_behavior: id,
            ood_behaviors,
            counts,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(Error::InvalidSpec("split counts must be positive".into()));
        }
        self.id_behavior.validate()?;
        for (name, spec) in &self.ood_behaviors {
            if name == "id" || name.is_empty() {
                return Err(Error::InvalidSpec(format!("invalid OOD behavior name `{name}`")));
            }
            spec.validate()?;
        }
        Ok(())
    }

    /// `(split name, behavior, count)` in generation order.
    pub fn splits(&self) -> Vec<(String, &BehaviorSpec, usize)> {
        let c = &self.counts;
        let mut out = vec![
            ("train_id".to_string(), &self.id_behavior, c.train),
            ("val_id".to_string(), &self.id_behavior, c.val),
            ("test_id".to_string(), &self.id_behavior, c.test),
        ];
        for (name, spec) in &self.ood_behaviors {
            out.push((format!("val_{name}"), spec, c.val));
            out.push((format!("test_{name}"), spec, c.test));
        }
        out
    }
}

// FNV-1a, used to give every split its own ChaCha stream.
fn stream_id(split: &str) -> u64 {
    split.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Independent generator for one split.
pub fn split_rng(seed: u64, split: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(split));
    rng
}

/// Generates one split in memory, labeled with the behavior name.
pub fn generate_split(spec: &BehaviorSpec, count: usize, seed: u64, split: &str) -> Result<Vec<Request>> {
    let mut rng = split_rng(seed, split);
    let mut requests = generate_requests(spec, count, &mut rng)?;
    for r in &mut requests {
        r.label = spec.name.clone();
    }
    Ok(requests)
}

/// Writes every split of the workload under `out_dir` and returns the
/// request file paths in generation order.
pub fn generate_dataset(config: &WorkloadConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let mut written = Vec::new();
    for (split, spec, count) in config.splits() {
        let requests = generate_split(spec, count, config.seed, &split)?;
        let path = trace::split_path(out_dir, &split);
        let dir = path.parent().expect("split path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trace::write_requests(&path, &requests)?;
        written.push(path);
    }
    Ok(written)
}

/// Stationary distribution of an irreducible chain, by Gaussian elimination
/// on `pi (T - I) = 0` with one equation replaced by `sum(pi) = 1`.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    if !is_irreducible(transition) {
        return Err(Error::InvalidSpec("transition matrix is reducible".into()));
    }
    // Row j of the system: sum_i pi_i (T[i][j] - delta_ij) = 0.
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut row: Vec<f64> = (0..n)
                .map(|i| transition[i][j] - if i == j { 1.0 } else { 0.0 })
                .collect();
            row.push(0.0);
            row
        })
        .collect();
    a[n - 1] = vec![1.0; n + 1];
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        a.swap(col, pivot);
        let p = a[col][col];
        if p.abs() < 1e-300 {
            return Err(Error::InvalidSpec("singular stationary system".into()));
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col] / p;
                if f != 0.0 {
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Ok((0..n).map(|i| (a[i][n] / a[i][i]).max(0.0)).collect())
}

fn is_irreducible(t: &[Vec<f64>]) -> bool {
    let n = t.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            for u in 0..n {
                let w = if forward { t[s][u] } else { t[u][s] };
                if w > 0.0 && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|x| x)
    };
    n > 0 && reach(true) && reach(false)
}

/// Entropy rate of the name chain in bits per token.
pub fn analytic_entropy_rate(spec: &BehaviorSpec) -> Result<f64> {
    let pi = stationary_distribution(&spec.transition)?;
    Ok(pi
        .iter()
        .zip(&spec.transition)
        .map(|(p, row)| {
            let h: f64 = row.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum();
            p * h
        })
        .sum())
}

//! Causal multi-head self-attention with dense or sparse connectivity.
//!
//! Connectivity is described by an [`AttentionPattern`]: every query lists
//! the key positions it may attend to. Future positions are never listed.
//! The sliding-window pattern keeps the last `window` positions plus any
//! global positions; a global query attends to every past position.

use ndarray::{s, Array2};
use rand::Rng;

use super::layers::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Param, Real};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttentionPattern {
    Causal,
    SlidingWindow { window: usize, globals: Vec<usize> },
}

impl AttentionPattern {
    /// Sliding window of `window` past positions with the first `n_global`
    /// positions marked global.
    pub fn longformer(window: usize, n_global: usize) -> Self {
        AttentionPattern::SlidingWindow {
            window,
            globals: (0..n_global).collect(),
        }
    }

    /// Ascending key positions visible from query `i`.
    pub fn keys(&self, i: usize) -> Vec<usize> {
        match self {
            AttentionPattern::Causal => (0..=i).collect(),
            AttentionPattern::SlidingWindow { window, globals } => {
                if globals.contains(&i) {
                    return (0..=i).collect();
                }
                let lo = i.saturating_sub(*window);
                let mut keys: Vec<usize> = globals.iter().copied().filter(|&g| g < lo).collect();
                keys.sort_unstable();
                keys.dedup();
                keys.extend(lo..=i);
                keys
            }
        }
    }

    pub fn key_lists(&self, n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| self.keys(i)).collect()
    }

    /// Dense `n x n` connectivity matrix.
    pub fn connectivity(&self, n: usize) -> Vec<Vec<bool>> {
        (0..n)
            .map(|i| {
                let mut row = vec![false; n];
                for j in self.keys(i) {
                    row[j] = true;
                }
                row
            })
            .collect()
    }
}

/// Per-head attention weights, aligned with the key lists.
pub struct AttentionWeights<F> {
    pub keys: Vec<Vec<usize>>,
    /// `weights[h][i][t]` is the weight of query `i` on key `keys[i][t]`.
    pub weights: Vec<Vec<Vec<F>>>,
}

fn check_shapes<F: Real>(q: &Array2<F>, k: &Array2<F>, v: &Array2<F>, heads: usize) -> Result<()> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?} must agree",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if heads == 0 || q.ncols() % heads != 0 {
        return Err(Error::Shape(format!("width {} not divisible by {heads} heads", q.ncols())));
    }
    Ok(())
}

/// Scaled dot-product attention per head over already-projected inputs.
/// Returns the concatenated head outputs and the weights.
pub fn attend<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
    pattern: &AttentionPattern,
) -> Result<(Array2<F>, AttentionWeights<F>)> {
    check_shapes(q, k, v, heads)?;
    let (n, d) = q.dim();
    if let AttentionPattern::SlidingWindow { window, .. } = pattern {
        if *window == 0 {
            return Err(Error::Shape("window must be at least 1".into()));
        }
    }
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let keys = pattern.key_lists(n);
    let mut out = Array2::zeros((n, d));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut head_w = Vec::with_capacity(n);
        for i in 0..n {
            let qi = qh.row(i);
            let mut w: Vec<F> = keys[i].iter().map(|&j| qi.dot(&kh.row(j)) * scale).collect();
            let m = w.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in &mut w {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in &mut w {
                *x /= sum;
            }
            let mut oi = out.slice_mut(s![i, h * dh..(h + 1) * dh]);
            for (&j, &wj) in keys[i].iter().zip(&w) {
                oi.scaled_add(wj, &vh.row(j));
            }
            head_w.push(w);
        }
        weights.push(head_w);
    }
    Ok((out, AttentionWeights { keys, weights }))
}

/// Gradients of [`attend`] w.r.t. `q`, `k` and `v`.
pub fn attend_backward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
    aw: &AttentionWeights<F>,
    d_out: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        for i in 0..n {
            let keys = &aw.keys[i];
            let w = &aw.weights[h][i];
            let go = d_out.slice(s![i, c.clone()]);
            let dw: Vec<F> = keys.iter().map(|&j| go.dot(&v.slice(s![j, c.clone()]))).collect();
            let inner: F = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
            for (t, &j) in keys.iter().enumerate() {
                dv.slice_mut(s![j, c.clone()]).scaled_add(w[t], &go);
                let ds = w[t] * (dw[t] - inner) * scale;
                dq.slice_mut(s![i, c.clone()]).scaled_add(ds, &k.slice(s![j, c.clone()]));
                dk.slice_mut(s![j, c.clone()]).scaled_add(ds, &q.slice(s![i, c.clone()]));
            }
        }
    }
    (dq, dk, dv)
}

/// Full causal attention over projected queries, keys and values; heads
/// are concatenated.
pub fn causal_self_attention<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
) -> Result<Array2<F>> {
    Ok(attend(q, k, v, heads, &AttentionPattern::Causal)?.0)
}

/// Sliding-window attention over the past `window` positions plus the
/// given global positions.
pub fn longformer_attention<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
    window: usize,
    globals: &[usize],
) -> Result<Array2<F>> {
    if let Some(&g) = globals.iter().find(|&&g| g >= q.nrows()) {
        return Err(Error::Shape(format!("global index {g} outside sequence of {}", q.nrows())));
    }
    let pattern = AttentionPattern::SlidingWindow {
        window,
        globals: globals.to_vec(),
    };
    Ok(attend(q, k, v, heads, &pattern)?.0)
}

/// Attention sub-layer: input projections, [`attend`], output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
}

pub struct MhaCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    ctx: Array2<F>,
    weights: AttentionWeights<F>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            wq: Linear::new(width, width, rng),
            wk: Linear::new(width, width, rng),
            wv: Linear::new(width, width, rng),
            wo: Linear::new(width, width, rng),
            heads,
        }
    }

    pub fn forward(&self, x: &Array2<F>, pattern: &AttentionPattern) -> Result<(Array2<F>, MhaCache<F>)> {
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let (ctx, weights) = attend(&q, &k, &v, self.heads, pattern)?;
        let y = self.wo.forward(&ctx);
        Ok((
            y,
            MhaCache {
                x: x.clone(),
                q,
                k,
                v,
                ctx,
                weights,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MhaCache<F>, dy: &Array2<F>) -> Array2<F> {
        let d_ctx = self.wo.backward(&cache.ctx, dy);
        let (dq, dk, dv) = attend_backward(&cache.q, &cache.k, &cache.v, self.heads, &cache.weights, &d_ctx);
        let mut dx = self.wq.backward(&cache.x, &dq);
        dx += &self.wk.backward(&cache.x, &dk);
        dx += &self.wv.backward(&cache.x, &dv);
        dx
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.wq.params_mut(&format!("{prefix}.wq"), out);
        self.wk.params_mut(&format!("{prefix}.wk"), out);
        self.wv.params_mut(&format!("{prefix}.wv"), out);
        self.wo.params_mut(&format!("{prefix}.wo"), out);
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sliding_window_connectivity() {
        let p = AttentionPattern::longformer(1, 0);
        assert_eq!(p.keys(2), vec![1, 2]);
        let p = AttentionPattern::longformer(1, 1);
        assert_eq!(p.keys(2), vec![0, 1, 2]);
        assert_eq!(p.keys(4), vec![0, 3, 4]);
        let p = AttentionPattern::SlidingWindow {
            window: 1,
            globals: vec![3],
        };
        // A global query sees every past position.
        assert_eq!(p.keys(3), vec![0, 1, 2, 3]);
        // Later positions see the global token.
        assert_eq!(p.keys(6), vec![3, 5, 6]);
        // Causality: no key in the future.
        for i in 0..8 {
            assert!(p.keys(i).iter().all(|&j| j <= i));
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let q = array![[0.3f64, -1.0]];
        let k = array![[2.0f64, 0.5]];
        let v = array![[4.0f64, -7.0]];
        let out = causal_self_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn two_tokens_by_hand() {
        // d = 2, one head: position 1 attends to 0 and 1 with scores
        // q1.k0 / sqrt(2) = 1/sqrt(2) and q1.k1 / sqrt(2) = 0.
        let q = array![[1.0f64, 0.0], [1.0, 0.0]];
        let k = array![[1.0f64, 0.0], [0.0, 1.0]];
        let v = array![[1.0f64, 2.0], [3.0, 4.0]];
        let out = causal_self_attention(&q, &k, &v, 1).unwrap();
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        let w1 = 1.0 / (a + 1.0);
        assert_eq!(out.row(0), v.row(0));
        assert!((out[(1, 0)] - (w0 * 1.0 + w1 * 3.0)).abs() < 1e-12);
        assert!((out[(1, 1)] - (w0 * 2.0 + w1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Param::<f64>::normal(7, 4, 1.0, &mut rng).value;
        let k = Param::<f64>::normal(7, 4, 1.0, &mut rng).value;
        let v = Param::<f64>::normal(7, 4, 1.0, &mut rng).value;
        for pattern in [AttentionPattern::Causal, AttentionPattern::longformer(2, 1)] {
            let (_, w) = attend(&q, &k, &v, 2, &pattern).unwrap();
            for head in &w.weights {
                for row in head {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let a = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(causal_self_attention(&a, &b, &a, 1).is_err());
        assert!(causal_self_attention(&a, &a, &a, 3).is_err());
        assert!(longformer_attention(&a, &a, &a, 1, 1, &[5]).is_err());
        assert!(longformer_attention(&a, &a, &a, 1, 0, &[]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Param::<f64>::normal(5, 4, 1.0, &mut rng).value;
        let k = Param::<f64>::normal(5, 4, 1.0, &mut rng).value;
        let v = Param::<f64>::normal(5, 4, 1.0, &mut rng).value;
        let g = Param::<f64>::normal(5, 4, 1.0, &mut rng).value;
        let pattern = AttentionPattern::longformer(1, 1);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (attend(q, k, v, 2, &pattern).unwrap().0 * &g).sum()
        };
        let (_, w) = attend(&q, &k, &v, 2, &pattern).unwrap();
        let (dq, dk, dv) = attend_backward(&q, &k, &v, 2, &w, &g);
        let h = 1e-6;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for idx in [(0, 0), (2, 3), (4, 1)] {
                let mut ins = [q.clone(), k.clone(), v.clone()];
                ins[which][idx] += h;
                let up = loss(&ins[0], &ins[1], &ins[2]);
                ins[which][idx] -= 2.0 * h;
                let down = loss(&ins[0], &ins[1], &ins[2]);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad[idx]).abs() < 1e-7, "input {which} {idx:?}: {fd} vs {}", grad[idx]);
            }
        }
    }
}

//! Dense layers with hand-written backward passes.
//!
//! Every `forward` used during training returns whatever the matching
//! `backward` needs; gradients accumulate into the layer's [`Param`]s.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::tensor::{Param, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in x out`
    pub w: Param<F>,
    /// `1 x out`
    pub b: Param<F>,
}

impl<F: Real> Linear<F> {
    /// Gaussian weights scaled by `1 / sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            w: Param::normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Param::zeros(fan_in, fan_out),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w.value) + &self.b.value
    }

    /// Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(1, width, 1.0),
            beta: Param::zeros(1, width),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let n = F::of(x.ncols() as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *s = is;
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn infer(&self, x: &Array2<F>) -> Array2<F> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &Array2<F>) -> Array2<F> {
        let xhat = &cache.xhat;
        self.gamma.grad += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let n = F::of(dy.ncols() as f64);
        let dxhat = dy * &self.gamma.value;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, g, xh, &is| {
                let sum_g = g.sum();
                let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
                Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                    *o = is / n * (n * gi - sum_g - xi * sum_gx);
                });
            });
        dx
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    x.mapv(|v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let (c, a, half, three) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5), F::of(3.0));
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let t = (c * (v + a * v * v * v)).tanh();
        let grad = half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v);
        *d *= grad;
    });
    dx
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Inverted dropout mask (`0` or `1 / (1 - p)`), or `None` when `p == 0`.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Option<Array2<F>> {
    if p <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    }))
}

pub fn apply_mask<F: Real>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Row-wise softmax, computed in `f64`.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<f64> {
    let mut out = logits.mapv(|v| v.f64());
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Label-smoothed cross-entropy summed over rows. The target keeps
/// `1 - eps`; the remaining mass is spread uniformly over the other
/// classes. Returns the summed loss and `d loss / d logits`.
pub fn smoothed_cross_entropy<F: Real>(
    logits: &Array2<F>,
    targets: &[u32],
    eps: f64,
) -> (f64, Array2<F>) {
    let v = logits.ncols();
    let probs = softmax_rows(logits);
    let (on, off) = if v > 1 {
        (1.0 - eps, eps / (v - 1) as f64)
    } else {
        (1.0, 0.0)
    };
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (r, &t) in targets.iter().enumerate() {
        let row = probs.row(r);
        for (c, &p) in row.iter().enumerate() {
            let q = if c == t as usize { on } else { off };
            if q > 0.0 {
                loss -= q * p.max(f64::MIN_POSITIVE).ln();
            }
            grad[(r, c)] = F::of(p - q);
        }
    }
    (loss, grad)
}

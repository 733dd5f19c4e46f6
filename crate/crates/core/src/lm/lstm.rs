//! Unidirectional multi-layer LSTM.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::layers::{apply_mask, dropout_mask, sigmoid};
use super::Dropout;
use crate::tensor::{Param, Real};

/// One LSTM layer. Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<F> {
    /// `in x 4h`
    pub w_ih: Param<F>,
    /// `h x 4h`
    pub w_hh: Param<F>,
    /// `1 x 4h`
    pub b: Param<F>,
}

pub struct LstmLayerCache<F> {
    x: Array2<F>,
    /// Gate activations, `N x 4h`.
    gates: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    h: Array2<F>,
}

impl<F: Real> LstmLayer<F> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        let mut b = Param::zeros(1, 4 * hidden);
        b.value.slice_mut(s![0, hidden..2 * hidden]).fill(F::one());
        LstmLayer {
            w_ih: Param::normal(input, 4 * hidden, std, rng),
            w_hh: Param::normal(hidden, 4 * hidden, std, rng),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.value.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LstmLayerCache<F>) {
        let n = x.nrows();
        let hd = self.hidden();
        let mut gates = x.dot(&self.w_ih.value) + &self.b.value;
        let mut c = Array2::zeros((n, hd));
        let mut tanh_c = Array2::zeros((n, hd));
        let mut h = Array2::zeros((n, hd));
        for t in 0..n {
            if t > 0 {
                let rec = h.row(t - 1).dot(&self.w_hh.value);
                let mut z = gates.row_mut(t);
                z += &rec;
            }
            let mut z = gates.row_mut(t);
            for j in 0..hd {
                z[j] = sigmoid(z[j]);
                z[hd + j] = sigmoid(z[hd + j]);
                z[2 * hd + j] = z[2 * hd + j].tanh();
                z[3 * hd + j] = sigmoid(z[3 * hd + j]);
            }
            for j in 0..hd {
                let c_prev = if t > 0 { c[(t - 1, j)] } else { F::zero() };
                let ct = z[hd + j] * c_prev + z[j] * z[2 * hd + j];
                let tc = ct.tanh();
                c[(t, j)] = ct;
                tanh_c[(t, j)] = tc;
                h[(t, j)] = z[3 * hd + j] * tc;
            }
        }
        let cache = LstmLayerCache {
            x: x.clone(),
            gates,
            c,
            tanh_c,
            h: h.clone(),
        };
        (h, cache)
    }

    /// Backpropagation through time; returns the input gradient.
    pub fn backward(&mut self, cache: &LstmLayerCache<F>, dh_out: &Array2<F>) -> Array2<F> {
        let n = dh_out.nrows();
        let hd = self.hidden();
        let one = F::one();
        let mut dz = Array2::zeros((n, 4 * hd));
        let mut dh_next = ndarray::Array1::<F>::zeros(hd);
        let mut dc_next = ndarray::Array1::<F>::zeros(hd);
        for t in (0..n).rev() {
            let g = cache.gates.row(t);
            for j in 0..hd {
                let (gi, gf, gg, go) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let dh = dh_out[(t, j)] + dh_next[j];
                let tc = cache.tanh_c[(t, j)];
                let d_o = dh * tc;
                let dc = dh * go * (one - tc * tc) + dc_next[j];
                let c_prev = if t > 0 { cache.c[(t - 1, j)] } else { F::zero() };
                dz[(t, j)] = dc * gg * gi * (one - gi);
                dz[(t, hd + j)] = dc * c_prev * gf * (one - gf);
                dz[(t, 2 * hd + j)] = dc * gi * (one - gg * gg);
                dz[(t, 3 * hd + j)] = d_o * go * (one - go);
                dc_next[j] = dc * gf;
            }
            dh_next = self.w_hh.value.dot(&dz.row(t));
        }
        if n > 1 {
            let h_prev = cache.h.slice(s![..n - 1, ..]);
            self.w_hh.grad += &h_prev.t().dot(&dz.slice(s![1.., ..]));
        }
        self.w_ih.grad += &cache.x.t().dot(&dz);
        self.b.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        dz.dot(&self.w_ih.value.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmBody<F> {
    pub layers: Vec<LstmLayer<F>>,
}

pub struct LstmCache<F> {
    layers: Vec<LstmLayerCache<F>>,
    masks: Vec<Option<Array2<F>>>,
}

impl<F: Real> LstmBody<F> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let layers = (0..layers)
            .map(|l| LstmLayer::new(if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        LstmBody { layers }
    }

    pub fn forward(&self, x: &Array2<F>, mut dropout: Option<&mut Dropout<'_>>) -> (Array2<F>, LstmCache<F>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut out, cache) = layer.forward(&h);
            let mask = match dropout.as_deref_mut() {
                Some(d) => dropout_mask(out.nrows(), out.ncols(), d.p, &mut *d.rng),
                None => None,
            };
            apply_mask(&mut out, &mask);
            caches.push(cache);
            masks.push(mask);
            h = out;
        }
        (h, LstmCache { layers: caches, masks })
    }

    pub fn backward(&mut self, cache: &LstmCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut d = dy.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            apply_mask(&mut d, &cache.masks[l]);
            d = layer.backward(&cache.layers[l], &d);
        }
        d
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Param<F>)>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("lstm.{l}.w_ih"), &mut layer.w_ih));
            out.push((format!("lstm.{l}.w_hh"), &mut layer.w_hh));
            out.push((format!("lstm.{l}.b"), &mut layer.b));
        }
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Param<F>)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm.{l}.w_ih"), &layer.w_ih));
            out.push((format!("lstm.{l}.w_hh"), &layer.w_hh));
            out.push((format!("lstm.{l}.b"), &layer.b));
        }
    }
}

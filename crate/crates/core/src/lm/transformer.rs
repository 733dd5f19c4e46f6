//! Decoder-only Transformer stack, shared by the full-attention and the
//! sliding-window (Longformer) variants. Blocks are pre-norm:
//! `h += attn(ln1(h)); h += ffn(ln2(h))`.

use ndarray::Array2;
use rand::Rng;

use super::attention::{AttentionPattern, MhaCache, MultiHeadAttention};
use super::layers::{apply_mask, dropout_mask, gelu, gelu_backward, LayerNorm, LayerNormCache, Linear};
use super::Dropout;
use crate::encode::NumericEncoder;
use crate::error::Result;
use crate::tensor::{Param, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: MhaCache<F>,
    attn_mask: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
    ff_in: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
    ff_mask: Option<Array2<F>>,
}

fn mask_for<F: Real>(x: &Array2<F>, dropout: &mut Option<&mut Dropout<'_>>) -> Option<Array2<F>> {
    match dropout.as_deref_mut() {
        Some(d) => dropout_mask(x.nrows(), x.ncols(), d.p, &mut *d.rng),
        None => None,
    }
}

impl<F: Real> Block<F> {
    fn new<R: Rng + ?Sized>(width: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(width),
            attn: MultiHeadAttention::new(width, heads, rng),
            ln2: LayerNorm::new(width),
            ff1: Linear::new(width, ffn, rng),
            ff2: Linear::new(ffn, width, rng),
        }
    }

    fn forward(
        &self,
        h: &Array2<F>,
        pattern: &AttentionPattern,
        dropout: &mut Option<&mut Dropout<'_>>,
    ) -> Result<(Array2<F>, BlockCache<F>)> {
        let (a_in, ln1) = self.ln1.forward(h);
        let (mut a, attn) = self.attn.forward(&a_in, pattern)?;
        let attn_mask = mask_for(&a, dropout);
        apply_mask(&mut a, &attn_mask);
        let h1 = h + &a;

        let (ff_in, ln2) = self.ln2.forward(&h1);
        let ff_pre = self.ff1.forward(&ff_in);
        let ff_act = gelu(&ff_pre);
        let mut f = self.ff2.forward(&ff_act);
        let ff_mask = mask_for(&f, dropout);
        apply_mask(&mut f, &ff_mask);
        let out = h1 + &f;
        Ok((
            out,
            BlockCache {
                ln1,
                attn,
                attn_mask,
                ln2,
                ff_in,
                ff_pre,
                ff_act,
                ff_mask,
            },
        ))
    }

    fn backward(&mut self, c: &BlockCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut df = dy.clone();
        apply_mask(&mut df, &c.ff_mask);
        let d_act = self.ff2.backward(&c.ff_act, &df);
        let d_pre = gelu_backward(&c.ff_pre, &d_act);
        let d_ff_in = self.ff1.backward(&c.ff_in, &d_pre);
        let dh1 = dy + &self.ln2.backward(&c.ln2, &d_ff_in);

        let mut da = dh1.clone();
        apply_mask(&mut da, &c.attn_mask);
        let d_a_in = self.attn.backward(&c.attn, &da);
        dh1 + &self.ln1.backward(&c.ln1, &d_a_in)
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.ln1.params_mut(&format!("{prefix}.ln1"), out);
        self.attn.params_mut(&format!("{prefix}.attn"), out);
        self.ln2.params_mut(&format!("{prefix}.ln2"), out);
        self.ff1.params_mut(&format!("{prefix}.ff1"), out);
        self.ff2.params_mut(&format!("{prefix}.ff2"), out);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.ff1.params(&format!("{prefix}.ff1"), out);
        self.ff2.params(&format!("{prefix}.ff2"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBody<F> {
    pub input: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNorm<F>,
    pub pattern: AttentionPattern,
    /// Absolute-position encoding added after the input projection.
    pub position: NumericEncoder,
}

pub struct TransformerCache<F> {
    x: Array2<F>,
    in_mask: Option<Array2<F>>,
    blocks: Vec<BlockCache<F>>,
    ln_f: LayerNormCache<F>,
}

impl<F: Real> TransformerBody<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        width: usize,
        heads: usize,
        layers: usize,
        ffn: usize,
        pattern: AttentionPattern,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBody {
            input: Linear::new(input, width, rng),
            blocks: (0..layers).map(|_| Block::new(width, heads, ffn, rng)).collect(),
            ln_f: LayerNorm::new(width),
            pattern,
            position: NumericEncoder::new(width)?,
        })
    }

    fn positions(&self, n: usize) -> Result<Array2<F>> {
        let w = self.position.d;
        let mut pe = Array2::zeros((n, w));
        for (i, mut row) in pe.rows_mut().into_iter().enumerate() {
            self.position
                .encode_into(i as f64, row.as_slice_mut().expect("row-major"))?;
        }
        Ok(pe)
    }

    pub fn forward(
        &self,
        x: &Array2<F>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Array2<F>, TransformerCache<F>)> {
        let mut h = self.input.forward(x) + &self.positions(x.nrows())?;
        let in_mask = mask_for(&h, &mut dropout);
        apply_mask(&mut h, &in_mask);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, &self.pattern, &mut dropout)?;
            blocks.push(cache);
            h = next;
        }
        let (out, ln_f) = self.ln_f.forward(&h);
        Ok((
            out,
            TransformerCache {
                x: x.clone(),
                in_mask,
                blocks,
                ln_f,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TransformerCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut d = self.ln_f.backward(&cache.ln_f, dy);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(c, &d);
        }
        apply_mask(&mut d, &cache.in_mask);
        self.input.backward(&cache.x, &d)
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.input.params_mut("input", out);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("block.{l}"), out);
        }
        self.ln_f.params_mut("ln_f", out);
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Param<F>)>) {
        self.input.params("input", out);
        for (l, b) in self.blocks.iter().enumerate() {
            b.params(&format!("block.{l}"), out);
        }
        self.ln_f.params("ln_f", out);
    }
}

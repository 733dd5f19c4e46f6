//! Neural language models over the joint representation.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionPattern;
use super::layers::{smoothed_cross_entropy, softmax_rows, Linear};
use super::lstm::{LstmBody, LstmCache};
use super::transformer::{TransformerBody, TransformerCache};
use super::{ConditionalDistributions, Dropout, LanguageModel};
use crate::encode::{
    assemble, model_width, scatter_grad, EmbeddingTable, EmbeddingTables, EncodedRequest, Field,
    JointRepresentation, NumericEncoder, Vocabulary,
};
use crate::error::{Error, Result};
use crate::tensor::{Param, Real};
use crate::trace::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Transformer,
    Longformer,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Lstm => "lstm",
            Architecture::Transformer => "transformer",
            Architecture::Longformer => "longformer",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Architecture::Lstm),
            "transformer" => Ok(Architecture::Transformer),
            "longformer" => Ok(Architecture::Longformer),
            other => Err(Error::Invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub arch: Architecture,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Sliding-window size (longformer only).
    pub window: usize,
    /// Number of leading global positions (longformer only).
    pub globals: usize,
    /// Embedding width of each categorical field.
    pub d_e: usize,
    /// Encoding width of each numeric field.
    pub d: usize,
    /// Feed-forward expansion factor (attention models only).
    pub ffn_mult: usize,
    pub min_count: usize,
}

impl NeuralConfig {
    pub fn new(arch: Architecture) -> Self {
        NeuralConfig {
            arch,
            layers: 2,
            width: 64,
            heads: 4,
            window: 32,
            globals: 1,
            d_e: 32,
            d: 32,
            ffn_mult: 4,
            min_count: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 || self.width == 0 || self.d_e == 0 {
            return bad("layers, width and d_e must be positive".into());
        }
        if self.d == 0 || self.d % 2 != 0 {
            return bad(format!("encoding width d = {} must be even", self.d));
        }
        if self.arch != Architecture::Lstm {
            if self.heads == 0 || self.width % self.heads != 0 {
                return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
            }
            if self.width % 2 != 0 {
                return bad("attention width must be even for position encoding".into());
            }
            if self.ffn_mult == 0 {
                return bad("ffn_mult must be positive".into());
            }
        }
        if self.arch == Architecture::Longformer && self.window == 0 {
            return bad("window must be at least 1".into());
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        model_width(self.d_e, self.d)
    }

    pub fn pattern(&self) -> AttentionPattern {
        match self.arch {
            Architecture::Longformer => AttentionPattern::longformer(self.window, self.globals),
            _ => AttentionPattern::Causal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body<F> {
    Lstm(LstmBody<F>),
    Transformer(TransformerBody<F>),
}

enum BodyCache<F> {
    Lstm(LstmCache<F>),
    Transformer(TransformerCache<F>),
}

/// Embedding tables, a sequence body and the projection to name logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel<F> {
    pub config: NeuralConfig,
    pub vocab: Vocabulary,
    pub encoder: NumericEncoder,
    pub tables: EmbeddingTables<F>,
    pub body: Body<F>,
    pub output: Linear<F>,
}

/// Cached activations of one training forward pass.
pub struct ForwardCache<F> {
    input: Array2<F>,
    body: BodyCache<F>,
    hidden: Array2<F>,
}

impl<F: Real> NeuralModel<F> {
    pub fn new(config: NeuralConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = |f: Field| {
            EmbeddingTable::new(Param::normal(vocab.field(f).size(), config.d_e, 1.0, &mut rng))
        };
        let tables = EmbeddingTables {
            name: table(Field::Name),
            ret: table(Field::Ret),
            entry: table(Field::Entry),
            procname: table(Field::Procname),
        };
        let input = config.input_width();
        let body = match config.arch {
            Architecture::Lstm => Body::Lstm(LstmBody::new(input, config.width, config.layers, &mut rng)),
            Architecture::Transformer | Architecture::Longformer => {
                Body::Transformer(TransformerBody::new(
                    input,
                    config.width,
                    config.heads,
                    config.layers,
                    config.ffn_mult * config.width,
                    config.pattern(),
                    &mut rng,
                )?)
            }
        };
        let output = Linear::new(config.width, vocab.name.size(), &mut rng);
        Ok(NeuralModel {
            encoder: NumericEncoder::new(config.d)?,
            config,
            vocab,
            tables,
            body,
            output,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.arch
    }

    pub fn input_width(&self) -> usize {
        self.config.input_width()
    }

    pub fn output_size(&self) -> usize {
        self.output.fan_out()
    }

    pub fn zero_output_projection(&mut self) {
        self.output.w.value.fill(F::zero());
        self.output.b.value.fill(F::zero());
    }

    pub fn encode(&self, request: &Request) -> Result<EncodedRequest<F>> {
        EncodedRequest::new(request, &self.vocab, &self.encoder)
    }

    /// Runs the body over `x` (one row per input position) and returns the
    /// name logits with the cache needed for backpropagation.
    pub fn forward_train(
        &self,
        x: &Array2<F>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Array2<F>, ForwardCache<F>)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "representation width {} does not match model input width {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let (hidden, body) = match &self.body {
            Body::Lstm(b) => {
                let (h, c) = b.forward(x, dropout);
                (h, BodyCache::Lstm(c))
            }
            Body::Transformer(b) => {
                let (h, c) = b.forward(x, dropout)?;
                (h, BodyCache::Transformer(c))
            }
        };
        let logits = self.output.forward(&hidden);
        Ok((
            logits,
            ForwardCache {
                input: x.clone(),
                body,
                hidden,
            },
        ))
    }

    /// Name logits for every position of `x`.
    pub fn logits(&self, x: &Array2<F>) -> Result<Array2<F>> {
        Ok(self.forward_train(x, None)?.0)
    }

    /// Backpropagates `d_logits`, accumulating parameter gradients, and
    /// returns the gradient w.r.t. the input rows.
    pub fn backward(&mut self, cache: &ForwardCache<F>, d_logits: &Array2<F>) -> Array2<F> {
        let d_hidden = self.output.backward(&cache.hidden, d_logits);
        match (&mut self.body, &cache.body) {
            (Body::Lstm(b), BodyCache::Lstm(c)) => b.backward(c, &d_hidden),
            (Body::Transformer(b), BodyCache::Transformer(c)) => b.backward(c, &d_hidden),
            _ => unreachable!("cache built by the same body"),
        }
    }

    /// Input rows for predicting every event: SOS plus all but the last
    /// event.
    pub fn inputs(&self, enc: &EncodedRequest<F>) -> Result<Array2<F>> {
        assemble(enc, &self.tables, enc.len())
    }

    /// Summed label-smoothed cross-entropy of one request; gradients are
    /// accumulated after scaling by `scale`. Returns the loss sum.
    pub fn accumulate_gradients(
        &mut self,
        enc: &EncodedRequest<F>,
        label_smoothing: f64,
        scale: f64,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<f64> {
        if enc.is_empty() {
            return Ok(0.0);
        }
        let x = self.inputs(enc)?;
        let (logits, cache) = self.forward_train(&x, dropout)?;
        let (loss, mut d_logits) = smoothed_cross_entropy(&logits, &enc.targets, label_smoothing);
        d_logits.mapv_inplace(|v| v * F::of(scale));
        let d_input = self.backward(&cache, &d_logits);
        scatter_grad(enc, &mut self.tables, &d_input);
        debug_assert_eq!(cache.input.nrows(), d_input.nrows());
        Ok(loss)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        out.push(("emb.name".to_string(), &mut self.tables.name.weight));
        out.push(("emb.ret".to_string(), &mut self.tables.ret.weight));
        out.push(("emb.entry".to_string(), &mut self.tables.entry.weight));
        out.push(("emb.procname".to_string(), &mut self.tables.procname.weight));
        match &mut self.body {
            Body::Lstm(b) => b.params_mut(&mut out),
            Body::Transformer(b) => b.params_mut(&mut out),
        }
        self.output.params_mut("out", &mut out);
        out
    }

    pub fn params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        out.push(("emb.name".to_string(), &self.tables.name.weight));
        out.push(("emb.ret".to_string(), &self.tables.ret.weight));
        out.push(("emb.entry".to_string(), &self.tables.entry.weight));
        out.push(("emb.procname".to_string(), &self.tables.procname.weight));
        match &self.body {
            Body::Lstm(b) => b.params(&mut out),
            Body::Transformer(b) => b.params(&mut out),
        }
        self.output.params("out", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Same model in another float type.
    pub fn cast<G: Real>(&self) -> NeuralModel<G> {
        let mut out = NeuralModel::<G>::new(self.config.clone(), self.vocab.clone(), 0)
            .expect("config already validated");
        for ((_, src), (_, dst)) in self.params().into_iter().zip(out.params_mut()) {
            dst.value = src.value.mapv(|v| G::of(v.f64()));
        }
        out
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_values(&mut self, mut values: std::collections::HashMap<String, Array2<F>>) -> Result<()> {
        for (name, p) in self.params_mut() {
            let v = values
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if v.dim() != p.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    v.dim(),
                    p.value.dim()
                )));
            }
            p.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Next-name distributions for a representation with the SOS row in front:
/// `N + 1` input rows give `N` output rows.
pub fn lm_forward<F: Real>(
    model: &NeuralModel<F>,
    rep: &JointRepresentation<F>,
) -> Result<ConditionalDistributions> {
    if rep.rows() == 0 {
        return Err(Error::Shape("representation lacks the SOS row".into()));
    }
    let n = rep.rows() - 1;
    let x = rep.matrix.slice(s![..n, ..]).to_owned();
    let logits = model.logits(&x)?;
    Ok(ConditionalDistributions::new(softmax_rows(&logits)))
}

impl<F: Real> LanguageModel for NeuralModel<F> {
    fn name_vocab_size(&self) -> usize {
        self.vocab.name.size()
    }

    fn target_indices(&self, request: &Request) -> Vec<u32> {
        self.vocab.name_indices(request)
    }

    fn conditionals(&self, request: &Request) -> Result<ConditionalDistributions> {
        let enc = self.encode(request)?;
        let x = self.inputs(&enc)?;
        Ok(ConditionalDistributions::new(softmax_rows(&self.logits(&x)?)))
    }
}

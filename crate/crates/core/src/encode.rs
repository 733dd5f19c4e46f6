//! Vocabularies and the per-event joint representation.
//!
//! Fields whose values are meaningful on their own (name, return value,
//! entry flag, process name) are embedded through learned lookup tables.
//! Context-dependent numbers (tid, pid, elapsed time) go through a
//! sinusoidal encoding with a `1e6` denominator. Each event row is the
//! concatenation of all seven vectors.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Real};
use crate::trace::{Request, SyscallEvent};

pub const UNK: u32 = 0;
pub const SOS: u32 = 1;
pub const RESERVED: usize = 2;

/// Denominator base of the numeric encoding.
pub const ENCODING_BASE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Name,
    Ret,
    Entry,
    Procname,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Name, Field::Ret, Field::Entry, Field::Procname];

    pub fn key(self) -> &'static str {
        match self {
            Field::Name => "name",
            Field::Ret => "ret",
            Field::Entry => "entry",
            Field::Procname => "procname",
        }
    }

    pub fn token(self, e: &SyscallEvent) -> String {
        match self {
            Field::Name => e.name.clone(),
            Field::Ret => e.ret.to_string(),
            Field::Entry => e.entry.to_string(),
            Field::Procname => e.procname.clone(),
        }
    }
}

/// Token table for one field. Index `k + 2` maps to `tokens[k]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl FieldVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED) as u32))
            .collect();
        FieldVocab { tokens, index }
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token at `index`, `None` for the reserved slots.
    pub fn token(&self, index: u32) -> Option<&str> {
        (index as usize)
            .checked_sub(RESERVED)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    /// Number of indices including UNK and SOS.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, BTreeMap<String, u32>>")]
#[serde(try_from = "BTreeMap<String, BTreeMap<String, u32>>")]
pub struct Vocabulary {
    pub name: FieldVocab,
    pub ret: FieldVocab,
    pub entry: FieldVocab,
    pub procname: FieldVocab,
}

impl Vocabulary {
    pub fn field(&self, f: Field) -> &FieldVocab {
        match f {
            Field::Name => &self.name,
            Field::Ret => &self.ret,
            Field::Entry => &self.entry,
            Field::Procname => &self.procname,
        }
    }

    fn field_mut(&mut self, f: Field) -> &mut FieldVocab {
        match f {
            Field::Name => &mut self.name,
            Field::Ret => &mut self.ret,
            Field::Entry => &mut self.entry,
            Field::Procname => &mut self.procname,
        }
    }

    pub fn lookup(&self, f: Field, token: &str) -> u32 {
        self.field(f).lookup(token)
    }

    pub fn lookup_event(&self, f: Field, e: &SyscallEvent) -> u32 {
        match f {
            Field::Name => self.name.lookup(&e.name),
            Field::Procname => self.procname.lookup(&e.procname),
            Field::Entry => self.entry.lookup(if e.entry { "true" } else { "false" }),
            Field::Ret => self.ret.lookup(&e.ret.to_string()),
        }
    }

    /// Name indices of a request (UNK for unseen names).
    pub fn name_indices(&self, request: &Request) -> Vec<u32> {
        request.events.iter().map(|e| self.name.lookup(&e.name)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Invalid(format!("vocabulary: {e}")))
    }
}

impl From<Vocabulary> for BTreeMap<String, BTreeMap<String, u32>> {
    fn from(v: Vocabulary) -> Self {
        Field::ALL
            .iter()
            .map(|&f| {
                let fv = v.field(f);
                let m = fv
                    .tokens
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (t.clone(), (i + RESERVED) as u32))
                    .collect();
                (f.key().to_string(), m)
            })
            .collect()
    }
}

impl TryFrom<BTreeMap<String, BTreeMap<String, u32>>> for Vocabulary {
    type Error = String;

    fn try_from(map: BTreeMap<String, BTreeMap<String, u32>>) -> Result<Self, String> {
        let mut v = Vocabulary::default();
        for f in Field::ALL {
            let m = map.get(f.key()).ok_or_else(|| format!("missing field `{}`", f.key()))?;
            let mut tokens = vec![String::new(); m.len()];
            for (tok, &idx) in m {
                let slot = (idx as usize)
                    .checked_sub(RESERVED)
                    .filter(|&i| i < tokens.len())
                    .ok_or_else(|| format!("{}: index {idx} out of range", f.key()))?;
                if !tokens[slot].is_empty() {
                    return Err(format!("{}: duplicate index {idx}", f.key()));
                }
                tokens[slot] = tok.clone();
            }
            *v.field_mut(f) = FieldVocab::from_tokens(tokens);
        }
        if let Some(extra) = map.keys().find(|k| Field::ALL.iter().all(|f| f.key() != k.as_str())) {
            return Err(format!("unknown vocabulary field `{extra}`"));
        }
        Ok(v)
    }
}

/// Builds per-field vocabularies from a training split. Tokens seen at
/// least `min_count` times are kept, ordered by descending frequency then
/// lexicographically.
pub fn build_vocab(train: &[Request], min_count: usize) -> Result<Vocabulary> {
    if train.iter().all(Request::is_empty) {
        return Err(Error::EmptyDataset("cannot build a vocabulary from no events".into()));
    }
    let min_count = min_count.max(1);
    let mut vocab = Vocabulary::default();
    for f in Field::ALL {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for e in train.iter().flat_map(|r| &r.events) {
            *counts.entry(f.token(e)).or_default() += 1;
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        *vocab.field_mut(f) = FieldVocab::from_tokens(kept.into_iter().map(|(t, _)| t).collect());
    }
    Ok(vocab)
}

/// Sinusoidal encoder for non-negative numeric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericEncoder {
    pub d: usize,
    pub base: f64,
}

impl NumericEncoder {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Invalid(format!("encoding dimension must be even and positive, got {d}")));
        }
        Ok(NumericEncoder {
            d,
            base: ENCODING_BASE,
        })
    }

    /// Angular frequency of the sin/cos pair starting at component `i`.
    fn frequency(&self, i: usize) -> f64 {
        self.base.powf(-(i as f64) / self.d as f64)
    }

    pub fn encode_into<F: Real>(&self, x: f64, out: &mut [F]) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("cannot encode {x}")));
        }
        debug_assert_eq!(out.len(), self.d);
        for i in (0..self.d).step_by(2) {
            let angle = x * self.frequency(i);
            out[i] = F::of(angle.sin());
            out[i + 1] = F::of(angle.cos());
        }
        Ok(())
    }

    pub fn encode(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        self.encode_into(x, &mut out)?;
        Ok(out)
    }
}

pub fn encode_numeric(x: f64, encoder: &NumericEncoder) -> Result<Vec<f64>> {
    encoder.encode(x)
}

/// Learned lookup table for one categorical field (`d_v x d_e`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F> {
    pub weight: Param<F>,
}

impl<F: Real> EmbeddingTable<F> {
    pub fn new(weight: Param<F>) -> Self {
        let (d_v, d_e) = weight.value.dim();
        if d_v > 32 && d_e >= d_v {
            log::warn!("embedding width {d_e} is not smaller than vocabulary size {d_v}");
        }
        EmbeddingTable { weight }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn lookup(&self, index: u32) -> ArrayView1<'_, F> {
        self.weight.value.row(index as usize)
    }
}

/// The four categorical tables in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables<F> {
    pub name: EmbeddingTable<F>,
    pub ret: EmbeddingTable<F>,
    pub entry: EmbeddingTable<F>,
    pub procname: EmbeddingTable<F>,
}

impl<F: Real> EmbeddingTables<F> {
    pub fn get(&self, f: Field) -> &EmbeddingTable<F> {
        match f {
            Field::Name => &self.name,
            Field::Ret => &self.ret,
            Field::Entry => &self.entry,
            Field::Procname => &self.procname,
        }
    }

    pub fn get_mut(&mut self, f: Field) -> &mut EmbeddingTable<F> {
        match f {
            Field::Name => &mut self.name,
            Field::Ret => &mut self.ret,
            Field::Entry => &mut self.entry,
            Field::Procname => &mut self.procname,
        }
    }

    /// Common embedding width, or an error if the tables disagree.
    pub fn dim(&self) -> Result<usize> {
        let d = self.name.dim();
        if Field::ALL.iter().any(|&f| self.get(f).dim() != d) {
            return Err(Error::Shape("embedding tables have different widths".into()));
        }
        Ok(d)
    }
}

/// `d_model = 4 * d_e + 3 * d`.
pub fn model_width(d_e: usize, d: usize) -> usize {
    4 * d_e + 3 * d
}

/// Request reduced to vocabulary indices and numeric encodings, with the
/// SOS row in front. Reusable across forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRequest<F> {
    /// Per-field indices, `N + 1` entries each (SOS first).
    pub indices: [Vec<u32>; 4],
    /// `(N + 1) x 3d` encodings of tid, pid and elapsed time.
    pub numeric: Array2<F>,
    /// Name index of each event, the prediction targets.
    pub targets: Vec<u32>,
}

impl<F: Real> EncodedRequest<F> {
    pub fn new(request: &Request, vocab: &Vocabulary, encoder: &NumericEncoder) -> Result<Self> {
        Self::with_deltas(request, &request.deltas_ns, vocab, encoder)
    }

    /// Like [`EncodedRequest::new`] with substituted elapsed times.
    pub fn with_deltas(
        request: &Request,
        deltas_ns: &[u64],
        vocab: &Vocabulary,
        encoder: &NumericEncoder,
    ) -> Result<Self> {
        if deltas_ns.len() != request.len() {
            return Err(Error::Shape(format!(
                "{} deltas for {} events",
                deltas_ns.len(),
                request.len()
            )));
        }
        let n = request.len();
        let d = encoder.d;
        let mut indices: [Vec<u32>; 4] = Default::default();
        for (k, f) in Field::ALL.iter().enumerate() {
            indices[k].reserve(n + 1);
            indices[k].push(SOS);
            indices[k].extend(request.events.iter().map(|e| vocab.lookup_event(*f, e)));
        }
        // SOS row encodes x = 0 for every numeric field.
        let mut numeric = Array2::zeros((n + 1, 3 * d));
        for r in 0..=n {
            let vals = if r == 0 {
                [0.0; 3]
            } else {
                let e = &request.events[r - 1];
                [e.tid as f64, e.pid as f64, deltas_ns[r - 1] as f64]
            };
            let mut row = numeric.row_mut(r);
            let row = row.as_slice_mut().expect("row-major");
            for (k, v) in vals.iter().enumerate() {
                encoder.encode_into(*v, &mut row[k * d..(k + 1) * d])?;
            }
        }
        let targets = indices[0][1..].to_vec();
        Ok(EncodedRequest {
            indices,
            numeric,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Per-event input matrix fed to the neural models.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRepresentation<F> {
    pub matrix: Array2<F>,
}

impl<F: Real> JointRepresentation<F> {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Concatenates embeddings and encodings for the first `rows` rows of an
/// encoded request.
pub fn assemble<F: Real>(
    enc: &EncodedRequest<F>,
    tables: &EmbeddingTables<F>,
    rows: usize,
) -> Result<Array2<F>> {
    let d_e = tables.dim()?;
    let num_w = enc.numeric.ncols();
    let mut out = Array2::zeros((rows, 4 * d_e + num_w));
    for (k, f) in Field::ALL.iter().enumerate() {
        let table = tables.get(*f);
        for r in 0..rows {
            let idx = enc.indices[k][r];
            if idx as usize >= table.vocab_size() {
                return Err(Error::Shape(format!(
                    "{} index {idx} outside table of {} rows",
                    f.key(),
                    table.vocab_size()
                )));
            }
            out.slice_mut(s![r, k * d_e..(k + 1) * d_e]).assign(&table.lookup(idx));
        }
    }
    out.slice_mut(s![.., 4 * d_e..])
        .assign(&enc.numeric.slice(s![..rows, ..]));
    Ok(out)
}

/// Accumulates the gradient of the assembled input into the tables.
pub fn scatter_grad<F: Real>(
    enc: &EncodedRequest<F>,
    tables: &mut EmbeddingTables<F>,
    d_input: &Array2<F>,
) {
    let d_e = tables.name.dim();
    for (k, f) in Field::ALL.iter().enumerate() {
        let grad = &mut tables.get_mut(*f).weight.grad;
        for r in 0..d_input.nrows() {
            let idx = enc.indices[k][r] as usize;
            let src = d_input.slice(s![r, k * d_e..(k + 1) * d_e]);
            let mut dst = grad.row_mut(idx);
            dst += &src;
        }
    }
}

/// Full `(N + 1) x d_model` representation of a request, SOS row first.
pub fn joint_representation<F: Real>(
    request: &Request,
    vocab: &Vocabulary,
    tables: &EmbeddingTables<F>,
    encoder: &NumericEncoder,
) -> Result<JointRepresentation<F>> {
    for f in Field::ALL {
        if tables.get(f).vocab_size() != vocab.field(f).size() {
            return Err(Error::Shape(format!(
                "{} table has {} rows for a vocabulary of {}",
                f.key(),
                tables.get(f).vocab_size(),
                vocab.field(f).size()
            )));
        }
    }
    let enc = EncodedRequest::new(request, vocab, encoder)?;
    Ok(JointRepresentation {
        matrix: assemble(&enc, tables, request.len() + 1)?,
    })
}

//! GRU4Rec and SASRec user encoders over a shared item embedding table.
//!
//! A model is a two-level hierarchy: the encoder maps the sequence of item
//! embeddings to per-position user embeddings `w`, and a linear head scores
//! item `j` as `w . e_j`.

mod checkpoint;
mod gru;
mod optim;
mod sasrec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{left_pad, PAD};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig, AdamState, L2Scope};

/// Clamp bounds for probabilities inside logs.
pub const PROB_EPS: Scalar = 1e-12;

/// Fill value for masked attention logits.
const ATTENTION_MASK_FILL: Scalar = -1e9;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Gru4Rec,
    SasRec { blocks: usize, heads: usize },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Gru4Rec => "gru4rec",
            Architecture::SasRec { .. } => "sasrec",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Catalog size including the padding row.
    pub num_items: usize,
    pub dim: usize,
    pub max_len: usize,
    pub dropout: Scalar,
    /// Score with the input embedding table. When false a separate output
    /// table is learned.
    pub share_embeddings: bool,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, num_items: usize, dim: usize, max_len: usize) -> Self {
        ModelConfig {
            architecture,
            num_items,
            dim,
            max_len,
            dropout: 0.2,
            share_embeddings: true,
        }
    }

    /// Parameter count implied by the architecture.
    pub fn expected_parameters(&self) -> usize {
        let (n, d, t) = (self.num_items, self.dim, self.max_len);
        let tables = if self.share_embeddings { n * d } else { 2 * n * d };
        tables
            + match self.architecture {
                Architecture::Gru4Rec => 3 * (d * d + d * d + d),
                Architecture::SasRec { blocks, .. } => {
                    let block = 4 * d * d + 2 * d + 2 * d + 2 * (d * d + d);
                    t * d + blocks * block + 2 * d
                }
            }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ItemEmbedding,
    OutputEmbedding,
    Positional,
    Weight,
}

impl ParamKind {
    pub fn is_embedding(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered named parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Parameters registered on one tape, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Train/eval switch plus the seed that fixes dropout masks. Two encoder
/// calls with the same context and input shape draw identical masks.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    pub train: bool,
    pub dropout_seed: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout_seed: 0,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        ForwardCtx {
            train: true,
            dropout_seed,
        }
    }

    pub(crate) fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.dropout_seed)
    }
}

/// Shape of a left-padded `b x width` id block whose column `j` is absolute
/// position `offset + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub width: usize,
    pub offset: usize,
    /// True at real (non-padding) positions, row-major.
    pub real: Vec<bool>,
}

impl SeqLayout {
    pub fn from_ids(ids: &[usize], batch: usize, width: usize, offset: usize) -> Self {
        assert_eq!(ids.len(), batch * width);
        SeqLayout {
            batch,
            width,
            offset,
            real: ids.iter().map(|&i| i != PAD).collect(),
        }
    }

    /// `[b, width, d]` 0/1 mask broadcast over the embedding axis.
    pub(crate) fn mask3(&self, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.real.len() * d);
        for &r in &self.real {
            data.extend(std::iter::repeat_n(if r { 1.0 } else { 0.0 }, d));
        }
        Tensor::new(vec![self.batch, self.width, d], data).expect("mask shape")
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Gru(gru::GruLayout),
    SasRec(sasrec::SasLayout),
}

/// A sequential recommender: encoder parameters plus item tables.
#[derive(Clone, Debug)]
pub struct SeqRecModel {
    config: ModelConfig,
    params: ParamStore,
    item_table: usize,
    output_table: usize,
    layout: Layout,
}

impl SeqRecModel {
    /// Xavier-uniform projections, N(0, 0.01) embeddings, unit layer-norm
    /// gains, zero biases, zero padding row.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let (n, d) = (config.num_items, config.dim);
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let embedding = |rng: &mut ChaCha8Rng, rows: usize| {
            let mut t = Tensor::from_fn(&[rows, d], |_| normal.sample(rng) as Scalar);
            t.row_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
            t
        };
        let item_table = params.add("item_embedding", ParamKind::ItemEmbedding, embedding(&mut rng, n));
        let output_table = if config.share_embeddings {
            item_table
        } else {
            params.add("output_embedding", ParamKind::OutputEmbedding, embedding(&mut rng, n))
        };
        let mut init = Init { rng: &mut rng, normal };
        let layout = match config.architecture {
            Architecture::Gru4Rec => Layout::Gru(gru::GruLayout::init(&mut params, &mut init, d)),
            Architecture::SasRec { blocks, .. } => {
                Layout::SasRec(sasrec::SasLayout::init(&mut params, &mut init, d, config.max_len, blocks))
            }
        };
        let model = SeqRecModel {
            config,
            params,
            item_table,
            output_table,
            layout,
        };
        let expected = model.config.expected_parameters();
        assert_eq!(model.params.total_len(), expected, "parameter count does not match architecture");
        Ok(model)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = SeqRecModel::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in model.params.params.iter().zip(&params.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.total_len()
    }

    pub fn item_table_index(&self) -> usize {
        self.item_table
    }

    pub fn output_table_index(&self) -> usize {
        self.output_table
    }

    pub fn item_embeddings(&self) -> &Tensor {
        &self.params.get(self.item_table).value
    }

    pub fn output_embeddings(&self) -> &Tensor {
        &self.params.get(self.output_table).value
    }

    /// Registers every parameter on `tape`, as gradient leaves when
    /// `trainable`, else as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound, ModelError> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }

    /// `S[u, t] = E[ids[u, t]]` as a `[b, width, d]` node differentiable into `E`.
    pub fn embed_sequence(&self, tape: &mut Tape, bound: &Bound, ids: &[usize], layout: &SeqLayout) -> Result<Var, ModelError> {
        let rows = tape.gather(bound.var(self.item_table), ids)?;
        Ok(tape.reshape(rows, &[layout.batch, layout.width, self.config.dim])?)
    }

    /// Detached copy of the embedded sequence, `[b, width, d]`.
    pub fn embed_values(&self, ids: &[usize], layout: &SeqLayout) -> Tensor {
        let e = self.item_embeddings();
        let d = self.config.dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(e.row(i));
        }
        Tensor::new(vec![layout.batch, layout.width, d], data).expect("embedding shape")
    }

    /// Per-position user embeddings `[b, width, d]`; position `t` depends only
    /// on `S[.., ..=t]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, seq: Var, layout: &SeqLayout, ctx: ForwardCtx) -> Result<Var, ModelError> {
        self.encode_traced(tape, bound, seq, layout, ctx, None)
    }

    /// Like [`encode`](Self::encode), also collecting SASRec attention
    /// weight nodes into `trace`.
    pub fn encode_traced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: Var,
        layout: &SeqLayout,
        ctx: ForwardCtx,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        let expected = [layout.batch, layout.width, self.config.dim];
        if tape.shape(seq) != expected {
            return Err(NumericsError::Dimension {
                op: "encode",
                detail: format!("sequence {:?}, expected {:?}", tape.shape(seq), expected),
            }
            .into());
        }
        let dropout = if ctx.train { self.config.dropout } else { 0.0 };
        let mut rng = ctx.rng();
        match (&self.layout, &self.config.architecture) {
            (Layout::Gru(l), _) => Ok(l.encode(tape, bound, seq, layout, dropout, &mut rng)?),
            (Layout::SasRec(l), Architecture::SasRec { heads, .. }) => {
                Ok(l.encode(tape, bound, seq, layout, *heads, dropout, &mut rng, trace)?)
            }
            _ => unreachable!("layout matches architecture"),
        }
    }

    /// Scores `w[r] . e_out[items[r]]` for rows of a `[N, d]` node.
    pub fn score_rows(&self, tape: &mut Tape, bound: &Bound, w: Var, items: &[usize]) -> Result<Var, ModelError> {
        let e = tape.gather(bound.var(self.output_table), items)?;
        Ok(rowdot(tape, w, e)?)
    }

    /// Next-item BCE over a training batch: returns the loss and the flat
    /// `[b * width, d]` user embeddings it was computed from.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: Var,
        layout: &SeqLayout,
        targets: &[usize],
        negatives: &[usize],
        mask: &[bool],
        ctx: ForwardCtx,
    ) -> Result<(Var, Var, Var), ModelError> {
        let w = self.encode(tape, bound, seq, layout, ctx)?;
        let flat = tape.reshape(w, &[layout.batch * layout.width, self.config.dim])?;
        let pos = self.score_rows(tape, bound, flat, targets)?;
        let neg = self.score_rows(tape, bound, flat, negatives)?;
        let loss = bce_loss(tape, pos, neg, mask)?;
        Ok((loss, w, flat))
    }

    /// Final-position user embeddings for a set of histories (eval mode),
    /// each truncated to the last `T` items. Returns `[histories, d]`.
    pub fn user_embeddings(&self, histories: &[&[usize]]) -> Result<Tensor, ModelError> {
        let d = self.config.dim;
        let mut out = Vec::with_capacity(histories.len() * d);
        for chunk in histories.chunks(256) {
            let (ids, layout) = self.pad_histories(chunk);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false)?;
            let s = self.embed_sequence(&mut tape, &bound, &ids, &layout)?;
            let w = self.encode(&mut tape, &bound, s, &layout, ForwardCtx::eval())?;
            let last = tape.select1(w, layout.width - 1)?;
            out.extend_from_slice(tape.value(last).data());
        }
        Ok(Tensor::new(vec![histories.len(), d], out)?)
    }

    /// Left-pads histories to `T`, then trims columns that are padding in
    /// every row.
    pub fn pad_histories(&self, histories: &[&[usize]]) -> (Vec<usize>, SeqLayout) {
        let t = self.config.max_len;
        let longest = histories.iter().map(|h| h.len().min(t)).max().unwrap_or(1).max(1);
        let offset = t - longest;
        let mut ids = Vec::with_capacity(histories.len() * longest);
        for h in histories {
            ids.extend_from_slice(&left_pad(h, t)[offset..]);
        }
        let layout = SeqLayout::from_ids(&ids, histories.len(), longest, offset);
        (ids, layout)
    }

    /// Scores for every catalog item: `E_out . w`.
    pub fn score_all(&self, w: &[Scalar]) -> Vec<Scalar> {
        let e = self.output_embeddings();
        (0..self.config.num_items).map(|i| dot(e.row(i), w)).collect()
    }
}

pub(crate) struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    pub(crate) fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("valid range");
        Tensor::from_fn(&[fan_in, fan_out], |_| u.sample(self.rng) as Scalar)
    }

    pub(crate) fn embedding(&mut self, rows: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[rows, d], |_| self.normal.sample(self.rng) as Scalar)
    }
}

fn validate(c: &ModelConfig) -> Result<(), ModelError> {
    let mut problems = Vec::new();
    if c.num_items < 3 {
        problems.push(format!("num_items must be at least 3 (got {})", c.num_items));
    }
    if c.dim == 0 {
        problems.push("dim must be positive".to_string());
    }
    if c.max_len < 1 {
        problems.push("max_len must be positive".to_string());
    }
    if !(0.0..1.0).contains(&c.dropout) {
        problems.push(format!("dropout must be in [0, 1) (got {})", c.dropout));
    }
    if let Architecture::SasRec { blocks, heads } = c.architecture {
        if blocks == 0 {
            problems.push("SASRec needs at least one block".to_string());
        }
        if heads == 0 || c.dim % heads != 0 {
            problems.push(format!("dim {} is not divisible by heads {}", c.dim, heads));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ModelError::Config(problems.join("; ")))
    }
}

pub fn dot(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise inner products of two `[N, d]` nodes.
pub fn rowdot(tape: &mut Tape, a: Var, b: Var) -> Result<Var, NumericsError> {
    let prod = tape.mul(a, b)?;
    tape.sum_last(prod)
}

/// `r = w . e`.
pub fn score(w: &[Scalar], e: &[Scalar]) -> Scalar {
    assert_eq!(w.len(), e.len(), "score needs equal dimensions");
    dot(w, e)
}

/// `-[log s(pos) + log(1 - s(neg))]` averaged over positions where `mask`
/// is true, with probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(tape: &mut Tape, pos: Var, neg: Var, mask: &[bool]) -> Result<Var, NumericsError> {
    let n = tape.value(pos).len();
    if tape.value(neg).len() != n || mask.len() != n {
        return Err(NumericsError::Dimension {
            op: "bce_loss",
            detail: format!("{} positives, {} negatives, {} mask entries", n, tape.value(neg).len(), mask.len()),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let p = tape.sigmoid(pos)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = tape.ln(p)?;
    let flipped = tape.scale(neg, -1.0)?;
    let q = tape.sigmoid(flipped)?;
    let q = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS)?;
    let lq = tape.ln(q)?;
    let terms = tape.add(lp, lq)?;
    let m = tape.constant(Tensor::new(
        tape.value(terms).shape().to_vec(),
        mask.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect(),
    )?)?;
    let masked = tape.mul(terms, m)?;
    let total = tape.sum(masked)?;
    tape.scale(total, -1.0 / count as Scalar)
}

//! Next-scale-prediction transformer with a bitwise classifier.
//!
//! The model reads a condition prefix (text tokens, plus optional latent
//! condition tokens) followed by the teacher-forced block inputs produced by
//! the codec, and at every content position predicts the label *bits* of
//! that position's code — `b` independent sigmoid logits instead of a
//! `2^b`-way softmax, which is what keeps 16- and 32-bit vocabularies
//! tractable. Parameters live in one flat buffer addressed by named tensor
//! views; the forward/backward passes are hand-written loops over that
//! buffer, sparse over the attention mask's block intervals.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    apply_rope, apply_rope_inverse, build_mask, kv_cache_profile, rope_ids, AttentionError,
    AttentionMask, MaskVariant, RopeIds,
};
use crate::bsq::{BitTensor, BsqError, Quantizer};
use crate::codec::{CodecError, CodecOutput};
use crate::optim::MomentOptimizer;
use crate::schedule::VideoLayout;
use crate::volume::{resize_spatial, LatentVolume, ResizeMode, VolumeError};

/// Number of latent condition-token types (semantic, detail, anchor).
pub const COND_TYPES: usize = 3;

/// Errors raised by model construction, training, and generation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("attention error: {0}")]
    Attention(#[from] AttentionError),
    #[error("quantizer error: {0}")]
    Bsq(#[from] BsqError),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
    #[error("volume error: {0}")]
    Volume(#[from] VolumeError),
    #[error("invalid config: {reason}")]
    Config { reason: &'static str },
    #[error("text token {id} outside vocabulary {vocab}")]
    TextRange { id: usize, vocab: usize },
    #[error("condition type {id} outside {COND_TYPES} types")]
    TypeRange { id: usize },
    #[error("no head for bitwidth {bits}")]
    UnknownBitwidth { bits: u32 },
    #[error("stream has {got} label blocks, layout has {expected}")]
    BlockCount { got: usize, expected: usize },
    #[error("block {index} content does not match the layout")]
    BlockShape { index: usize },
    #[error("history block {index} does not match the layout")]
    HistoryShape { index: usize },
    #[error("history holds {got} blocks, layout only {expected}")]
    HistoryLength { got: usize, expected: usize },
    #[error("channel count {got} does not match model channels {expected}")]
    Channels { got: usize, expected: usize },
    #[error("loss is not finite at step {step}")]
    NonFiniteLoss { step: usize },
}

/// Transformer dimensions and conditioning vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// MLP hidden width as a multiple of the model width.
    pub mlp_ratio: usize,
    /// Channels of the latent volumes fed as block inputs.
    pub channels: usize,
    /// Distinct code bitwidths the model predicts (ascending).
    pub bitwidths: Vec<u32>,
    pub text_vocab: usize,
    pub text_len: usize,
    pub rope_bases: [f64; 4],
    /// Base learning rate for the moment optimizer.
    pub lr: f64,
    /// Standard deviation of the weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults sized for the toy schedule.
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 16,
            mlp_ratio: 4,
            channels: 96,
            bitwidths: alloc::vec![16, 32],
            text_vocab: 32,
            text_len: 4,
            rope_bases: [crate::attention::ROPE_BASE; 4],
            lr: 1e-3,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Model width: heads times head dim.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config { reason: "zero dimension" });
        }
        if !self.head_dim.is_multiple_of(8) {
            return Err(ModelError::Config { reason: "head_dim must be divisible by 8" });
        }
        if self.channels == 0 || self.text_vocab == 0 {
            return Err(ModelError::Config { reason: "zero channels or vocabulary" });
        }
        if self.bitwidths.is_empty() {
            return Err(ModelError::Config { reason: "no bitwidths" });
        }
        let mut prev = 0u32;
        for &b in &self.bitwidths {
            if b == 0 || b > 64 || b <= prev && prev != 0 {
                return Err(ModelError::Config { reason: "bitwidths must ascend within 1..=64" });
            }
            prev = b;
        }
        Ok(())
    }
}

/// Offset and length of one named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named views over the flat parameter buffer, in a fixed deterministic
/// order (the checkpoint format serializes tensors in this order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl ParamLayout {
    fn build(config: &ModelConfig) -> Self {
        let w = config.width();
        let c = config.channels;
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, len: usize, offset: &mut usize| {
            tensors.push(TensorSpec { name, offset: *offset, len });
            *offset += len;
        };
        push(String::from("text_emb"), config.text_vocab * w, &mut offset);
        push(String::from("cond_proj"), c * w, &mut offset);
        push(String::from("type_emb"), COND_TYPES * w, &mut offset);
        for &b in &config.bitwidths {
            push(format!("in_proj.{b}"), c * w, &mut offset);
        }
        for l in 0..config.layers {
            push(format!("layer{l}.ln1.g"), w, &mut offset);
            push(format!("layer{l}.ln1.b"), w, &mut offset);
            push(format!("layer{l}.attn.wq"), w * w, &mut offset);
            push(format!("layer{l}.attn.wk"), w * w, &mut offset);
            push(format!("layer{l}.attn.wv"), w * w, &mut offset);
            push(format!("layer{l}.attn.wo"), w * w, &mut offset);
            push(format!("layer{l}.ln2.g"), w, &mut offset);
            push(format!("layer{l}.ln2.b"), w, &mut offset);
            push(format!("layer{l}.mlp.fc1"), w * config.mlp_ratio * w, &mut offset);
            push(format!("layer{l}.mlp.fc2"), config.mlp_ratio * w * w, &mut offset);
        }
        push(String::from("ln_f.g"), w, &mut offset);
        push(String::from("ln_f.b"), w, &mut offset);
        for &b in &config.bitwidths {
            push(format!("head_w.{b}"), w * b as usize, &mut offset);
            push(format!("head_b.{b}"), b as usize, &mut offset);
        }
        Self { tensors, total: offset }
    }

    /// Offset and length of a named tensor.
    pub fn entry(&self, name: &str) -> Option<(usize, usize)> {
        self.tensors.iter().find(|t| t.name == name).map(|t| (t.offset, t.len))
    }
}

/// Resolved offsets for the hot paths (no string lookups per token).
#[derive(Debug, Clone)]
struct Offsets {
    text_emb: usize,
    cond_proj: usize,
    type_emb: usize,
    /// (bitwidth, in_proj, head_w, head_b), ascending by bitwidth.
    per_bits: Vec<(u32, usize, usize, usize)>,
    /// Per layer: [ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, fc1, fc2].
    layers: Vec<[usize; 10]>,
    ln_f_g: usize,
    ln_f_b: usize,
}

impl Offsets {
    fn resolve(layout: &ParamLayout, config: &ModelConfig) -> Self {
        let at = |name: &str| layout.entry(name).expect("tensor exists").0;
        let per_bits = config
            .bitwidths
            .iter()
            .map(|&b| {
                (b, at(&format!("in_proj.{b}")), at(&format!("head_w.{b}")), at(&format!("head_b.{b}")))
            })
            .collect();
        let layers = (0..config.layers)
            .map(|l| {
                [
                    at(&format!("layer{l}.ln1.g")),
                    at(&format!("layer{l}.ln1.b")),
                    at(&format!("layer{l}.attn.wq")),
                    at(&format!("layer{l}.attn.wk")),
                    at(&format!("layer{l}.attn.wv")),
                    at(&format!("layer{l}.attn.wo")),
                    at(&format!("layer{l}.ln2.g")),
                    at(&format!("layer{l}.ln2.b")),
                    at(&format!("layer{l}.mlp.fc1")),
                    at(&format!("layer{l}.mlp.fc2")),
                ]
            })
            .collect();
        Self {
            text_emb: at("text_emb"),
            cond_proj: at("cond_proj"),
            type_emb: at("type_emb"),
            per_bits,
            layers,
            ln_f_g: at("ln_f.g"),
            ln_f_b: at("ln_f.b"),
        }
    }

    fn bits_entry(&self, bits: u32) -> Result<(usize, usize, usize), ModelError> {
        self.per_bits
            .iter()
            .find(|(b, ..)| *b == bits)
            .map(|&(_, i, hw, hb)| (i, hw, hb))
            .ok_or(ModelError::UnknownBitwidth { bits })
    }
}

/// The transformer: config, named-tensor layout, and the flat parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<T>,
    offsets: Offsets,
}

impl<T: Float> Model<T> {
    /// Deterministic initialization: embeddings and projections are normal
    /// with `init_std` (residual-writing matrices shrunk by `1/sqrt(2L)`),
    /// norms start at identity, and the bit heads start at zero so every
    /// initial logit is exactly zero (per-bit loss exactly `ln 2`).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::build(&config);
        let mut params = alloc::vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for spec in &layout.tensors {
            let scale = match spec.name.as_str() {
                name if name.starts_with("head_") => 0.0,
                name if name.ends_with(".g") => {
                    for slot in &mut params[spec.offset..spec.offset + spec.len] {
                        *slot = T::one();
                    }
                    continue;
                }
                name if name.ends_with(".b") => continue,
                name if name.ends_with("attn.wo") || name.ends_with("mlp.fc2") => {
                    config.init_std * residual_scale
                }
                _ => config.init_std,
            };
            for slot in &mut params[spec.offset..spec.offset + spec.len] {
                let value: f64 = rng.sample(StandardNormal);
                *slot = T::from(value * scale).unwrap();
            }
        }
        let offsets = Offsets::resolve(&layout, &config);
        Ok(Self { config, layout, params, offsets })
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Read-only view of a named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.entry(name).map(|(o, l)| &self.params[o..o + l])
    }

    /// Adds normal noise to every parameter — used to make gradients flow
    /// through the zero-initialized heads when checking derivatives.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &mut self.params {
            let value: f64 = rng.sample(StandardNormal);
            *slot = *slot + T::from(value * scale).unwrap();
        }
    }

    /// Extends the model with heads and input projections for bitwidths it
    /// has not seen (progressive schedule growth). Existing tensors are
    /// preserved by name; new input projections initialize fresh, new heads
    /// start at zero.
    pub fn extend_bitwidths(&mut self, extra: &[u32], seed: u64) -> Result<(), ModelError> {
        let mut bits = self.config.bitwidths.clone();
        for &b in extra {
            if !bits.contains(&b) {
                bits.push(b);
            }
        }
        bits.sort_unstable();
        if bits == self.config.bitwidths {
            return Ok(());
        }
        let mut config = self.config.clone();
        config.bitwidths = bits;
        config.validate()?;
        let layout = ParamLayout::build(&config);
        let mut params = alloc::vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &layout.tensors {
            let target = &mut params[spec.offset..spec.offset + spec.len];
            if let Some((old_off, old_len)) = self.layout.entry(&spec.name) {
                debug_assert_eq!(old_len, spec.len);
                target.copy_from_slice(&self.params[old_off..old_off + old_len]);
            } else if spec.name.starts_with("in_proj.") {
                for slot in target.iter_mut() {
                    let value: f64 = rng.sample(StandardNormal);
                    *slot = T::from(value * config.init_std).unwrap();
                }
            }
            // New heads stay zero: fresh blocks begin at ln 2 loss.
        }
        self.offsets = Offsets::resolve(&layout, &config);
        self.config = config;
        self.layout = layout;
        self.params = params;
        Ok(())
    }
}

/// What one sequence position is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Caption token id, embedded through the text table.
    Text(u32),
    /// Latent condition token of the given type (0 sem, 1 det, 2 anchor).
    Cond(u32),
    /// Teacher-forced block-input token predicting bits at `bitwidth`.
    Content { bitwidth: u32 },
}

/// One content block's span within the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamBlock {
    pub span: (usize, usize),
    pub bitwidth: u32,
}

/// A fully assembled model sequence: kinds, input vectors, bit labels,
/// attention mask, and rotary ids.
#[derive(Debug, Clone)]
pub struct TokenStream<T> {
    pub kinds: Vec<TokenKind>,
    /// `n_tokens x channels` input vectors; text rows are unused zeros.
    pub vectors: Vec<T>,
    pub channels: usize,
    /// Packed label bits per content token, in sequence order.
    pub labels: Vec<u64>,
    pub n_cond: usize,
    pub mask: AttentionMask,
    pub ids: RopeIds,
    pub blocks: Vec<StreamBlock>,
    pub total_bits: usize,
}

impl<T> TokenStream<T> {
    pub fn n_tokens(&self) -> usize {
        self.kinds.len()
    }
}

/// Builds the teacher-forced training sequence for one encoded video:
/// text prefix, optional latent condition tokens, then every retained block
/// (its input being the corrupted reconstruction left by the previous
/// block — the first block reads zeros).
pub fn assemble<T: Float>(
    text: &[usize],
    conditions: &[(usize, &LatentVolume)],
    codec_out: &CodecOutput,
    layout: &VideoLayout,
    channels: usize,
    variant: MaskVariant,
) -> Result<TokenStream<T>, ModelError> {
    if codec_out.labels.len() != layout.flat_blocks.len() {
        return Err(ModelError::BlockCount {
            got: codec_out.labels.len(),
            expected: layout.flat_blocks.len(),
        });
    }
    let mut kinds = Vec::new();
    let mut vectors: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let mut blocks = Vec::new();
    for &token in text {
        kinds.push(TokenKind::Text(token as u32));
        vectors.extend(core::iter::repeat_n(T::zero(), channels));
    }
    for &(type_id, volume) in conditions {
        if type_id >= COND_TYPES {
            return Err(ModelError::TypeRange { id: type_id });
        }
        let (c, t, h, w) = volume.shape();
        if c != channels {
            return Err(ModelError::Channels { got: c, expected: channels });
        }
        let mut vector = alloc::vec![0.0f64; channels];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    volume.position_vector(ti, y, x, &mut vector);
                    kinds.push(TokenKind::Cond(type_id as u32));
                    vectors.extend(vector.iter().map(|&v| T::from(v).unwrap()));
                }
            }
        }
    }
    let n_cond = kinds.len();
    let mut total_bits = 0usize;
    let mut vector = alloc::vec![0.0f64; channels];
    for (index, block) in layout.flat_blocks.iter().enumerate() {
        if codec_out.block_index[index] != index {
            return Err(ModelError::BlockShape { index });
        }
        let tuple = layout.block_tuple(block);
        let label = &codec_out.labels[index];
        if label.dims() != (tuple.t, tuple.h, tuple.w) || label.bitwidth() != tuple.bitwidth {
            return Err(ModelError::BlockShape { index });
        }
        let input = if index == 0 { None } else { Some(&codec_out.inputs[index - 1]) };
        if let Some(volume) = input {
            let (c, t, h, w) = volume.shape();
            if (c, t, h, w) != (channels, tuple.t, tuple.h, tuple.w) {
                return Err(ModelError::BlockShape { index });
            }
        }
        let start = kinds.len();
        for ti in 0..tuple.t {
            for y in 0..tuple.h {
                for x in 0..tuple.w {
                    kinds.push(TokenKind::Content { bitwidth: tuple.bitwidth });
                    match input {
                        Some(volume) => {
                            volume.position_vector(ti, y, x, &mut vector);
                            vectors.extend(vector.iter().map(|&v| T::from(v).unwrap()));
                        }
                        None => {
                            vectors.extend(core::iter::repeat_n(T::zero(), channels));
                        }
                    }
                    labels.push(label.code_u64(label.position(ti, y, x)));
                }
            }
        }
        blocks.push(StreamBlock { span: (start, kinds.len()), bitwidth: tuple.bitwidth });
        total_bits += tuple.tokens() * tuple.bitwidth as usize;
    }
    let mask = build_mask(layout, n_cond, variant)?;
    let ids = rope_ids(layout, n_cond);
    Ok(TokenStream { kinds, vectors, channels, labels, n_cond, mask, ids, blocks, total_bits })
}

/// Per-query allowed key intervals, flattened for the attention loops.
struct RowPlan {
    /// Per query: (first interval index, interval count).
    rows: Vec<(usize, usize)>,
    intervals: Vec<(usize, usize)>,
}

impl RowPlan {
    /// Allowed keys of one query row, as an interval slice.
    fn row(&self, q: usize) -> &[(usize, usize)] {
        let (start, count) = self.rows[q];
        &self.intervals[start..start + count]
    }

    /// Number of allowed keys for one query row.
    fn row_keys(&self, q: usize) -> usize {
        self.row(q).iter().map(|&(s, e)| e - s).sum()
    }
}

fn build_row_plan(mask: &AttentionMask) -> RowPlan {
    let mut rows = Vec::with_capacity(mask.n_tokens);
    let mut intervals = Vec::new();
    for _ in 0..mask.n_cond.min(mask.n_tokens) {
        let start = intervals.len();
        if mask.n_cond > 0 {
            intervals.push((0, mask.n_cond));
        }
        rows.push((start, intervals.len() - start));
    }
    for block in &mask.blocks {
        for _ in block.span.0..block.span.1 {
            let start = intervals.len();
            intervals.extend(block.keys.iter().copied());
            rows.push((start, block.keys.len()));
        }
    }
    RowPlan { rows, intervals }
}

/// Activations cached by the forward pass for backpropagation.
struct LayerCache<T> {
    ln1_out: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    /// Post-rotation queries/keys and plain values, `n x width` each.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `heads x pairs`, row-sparse.
    probs: Vec<T>,
    /// Concatenated head outputs before the output projection.
    att_out: Vec<T>,
    /// Input to the MLP half (after the attention residual).
    mid: Vec<T>,
    ln2_out: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fc1_out: Vec<T>,
    gelu_out: Vec<T>,
}

/// Everything forward produces: per-content-token bit logits plus the
/// cached activations.
pub struct ForwardPass<T> {
    /// Flat logits; content token `i` owns `logit_offsets[i]..[i+1]`.
    pub logits: Vec<T>,
    pub logit_offsets: Vec<usize>,
    /// Sequence position of each content token.
    pub content_positions: Vec<usize>,
    layer_inputs: Vec<Vec<T>>,
    caches: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    lnf_out: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    plan: RowPlan,
}

#[allow(clippy::too_many_arguments)]
fn layer_norm<T: Float>(
    out: &mut [T],
    mean_out: &mut [T],
    rstd_out: &mut [T],
    x: &[T],
    g: &[T],
    b: &[T],
    n: usize,
    w: usize,
) {
    let eps = T::from(1e-5).unwrap();
    let wt = T::from(w as f64).unwrap();
    for i in 0..n {
        let row = &x[i * w..(i + 1) * w];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / wt;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / wt;
        let rstd = (var + eps).powf(T::from(-0.5).unwrap());
        mean_out[i] = mean;
        rstd_out[i] = rstd;
        let out_row = &mut out[i * w..(i + 1) * w];
        for j in 0..w {
            out_row[j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Float>(
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
    dy: &[T],
    x: &[T],
    mean: &[T],
    rstd: &[T],
    g: &[T],
    n: usize,
    w: usize,
) {
    let wt = T::from(w as f64).unwrap();
    for i in 0..n {
        let dy_row = &dy[i * w..(i + 1) * w];
        let x_row = &x[i * w..(i + 1) * w];
        let mut dxhat_sum = T::zero();
        let mut dxhat_xhat_sum = T::zero();
        for j in 0..w {
            let xhat = (x_row[j] - mean[i]) * rstd[i];
            let dxhat = dy_row[j] * g[j];
            dxhat_sum = dxhat_sum + dxhat;
            dxhat_xhat_sum = dxhat_xhat_sum + dxhat * xhat;
            dg[j] = dg[j] + dy_row[j] * xhat;
            db[j] = db[j] + dy_row[j];
        }
        let dx_row = &mut dx[i * w..(i + 1) * w];
        for j in 0..w {
            let xhat = (x_row[j] - mean[i]) * rstd[i];
            let dxhat = dy_row[j] * g[j];
            dx_row[j] = dx_row[j]
                + rstd[i] * (dxhat - dxhat_sum / wt - xhat * dxhat_xhat_sum / wt);
        }
    }
}

/// `y += x · W` for row-major `x: n x d_in`, `W: d_in x d_out`.
fn matmul<T: Float>(y: &mut [T], x: &[T], w: &[T], n: usize, d_in: usize, d_out: usize) {
    for i in 0..n {
        let x_row = &x[i * d_in..(i + 1) * d_in];
        let y_row = &mut y[i * d_out..(i + 1) * d_out];
        for (j, &a) in x_row.iter().enumerate() {
            let w_row = &w[j * d_out..(j + 1) * d_out];
            for o in 0..d_out {
                y_row[o] = y_row[o] + a * w_row[o];
            }
        }
    }
}

/// Accumulates `dx += dy · Wᵀ` and `dW += xᵀ · dy`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Float>(
    dx: &mut [T],
    dw: &mut [T],
    dy: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    d_in: usize,
    d_out: usize,
) {
    for i in 0..n {
        let dy_row = &dy[i * d_out..(i + 1) * d_out];
        let x_row = &x[i * d_in..(i + 1) * d_in];
        let dx_row = &mut dx[i * d_in..(i + 1) * d_in];
        for j in 0..d_in {
            let w_row = &w[j * d_out..(j + 1) * d_out];
            let mut acc = T::zero();
            for o in 0..d_out {
                acc = acc + dy_row[o] * w_row[o];
            }
            dx_row[j] = dx_row[j] + acc;
            let a = x_row[j];
            let dw_row = &mut dw[j * d_out..(j + 1) * d_out];
            for o in 0..d_out {
                dw_row[o] = dw_row[o] + a * dy_row[o];
            }
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu<T: Float>(x: T) -> T {
    let s = T::from(GELU_SCALE).unwrap();
    let c = T::from(GELU_CUBIC).unwrap();
    let half = T::from(0.5).unwrap();
    let inner = s * (x + c * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let s = T::from(GELU_SCALE).unwrap();
    let c = T::from(GELU_CUBIC).unwrap();
    let half = T::from(0.5).unwrap();
    let three = T::from(3.0).unwrap();
    let inner = s * (x + c * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * s * (T::one() + three * c * x * x)
}

impl<T: Float> Model<T> {
    /// Embeds every token into model width.
    fn embed(&self, stream: &TokenStream<T>) -> Result<Vec<T>, ModelError> {
        let w = self.config.width();
        let c = self.config.channels;
        if stream.channels != c {
            return Err(ModelError::Channels { got: stream.channels, expected: c });
        }
        let n = stream.n_tokens();
        let mut x0 = alloc::vec![T::zero(); n * w];
        for (i, kind) in stream.kinds.iter().enumerate() {
            let out = &mut x0[i * w..(i + 1) * w];
            match *kind {
                TokenKind::Text(token) => {
                    let token = token as usize;
                    if token >= self.config.text_vocab {
                        return Err(ModelError::TextRange {
                            id: token,
                            vocab: self.config.text_vocab,
                        });
                    }
                    let row = &self.params[self.offsets.text_emb + token * w..];
                    out.copy_from_slice(&row[..w]);
                }
                TokenKind::Cond(type_id) => {
                    let vec = &stream.vectors[i * c..(i + 1) * c];
                    let proj = &self.params[self.offsets.cond_proj..self.offsets.cond_proj + c * w];
                    for (j, &a) in vec.iter().enumerate() {
                        let w_row = &proj[j * w..(j + 1) * w];
                        for o in 0..w {
                            out[o] = out[o] + a * w_row[o];
                        }
                    }
                    let ty = &self.params[self.offsets.type_emb + type_id as usize * w..];
                    for o in 0..w {
                        out[o] = out[o] + ty[o];
                    }
                }
                TokenKind::Content { bitwidth } => {
                    let (in_proj, _, _) = self.offsets.bits_entry(bitwidth)?;
                    let vec = &stream.vectors[i * c..(i + 1) * c];
                    let proj = &self.params[in_proj..in_proj + c * w];
                    for (j, &a) in vec.iter().enumerate() {
                        let w_row = &proj[j * w..(j + 1) * w];
                        for o in 0..w {
                            out[o] = out[o] + a * w_row[o];
                        }
                    }
                }
            }
        }
        Ok(x0)
    }

    /// One transformer stack pass over selected rows, writing keys/values
    /// at their absolute positions. `forward` calls it over all rows at
    /// once; generation calls it block by block over the same buffers, so
    /// both paths run identical arithmetic.
    #[allow(clippy::too_many_arguments)]
    fn run_rows(
        &self,
        x: &mut [T],
        row_start: usize,
        row_end: usize,
        plan: &RowPlan,
        ids: &RopeIds,
        keys: &mut [Vec<T>],
        values: &mut [Vec<T>],
        caches: Option<&mut ForwardBuild<T>>,
    ) -> Result<(), ModelError> {
        let w = self.config.width();
        let hd = self.config.head_dim;
        let heads = self.config.heads;
        let rows = row_end - row_start;
        let scale = T::from(1.0 / (hd as f64).sqrt()).unwrap();
        let mut build = caches;
        for l in 0..self.config.layers {
            if let Some(builder) = build.as_deref_mut() {
                builder.layer_inputs.push(x[row_start * w..row_end * w].to_vec());
            }
            let off = &self.offsets.layers[l];
            let p = &self.params;
            let (ln1g, ln1b) = (&p[off[0]..off[0] + w], &p[off[1]..off[1] + w]);
            let mut ln1 = alloc::vec![T::zero(); rows * w];
            let mut mean1 = alloc::vec![T::zero(); rows];
            let mut rstd1 = alloc::vec![T::zero(); rows];
            layer_norm(
                &mut ln1,
                &mut mean1,
                &mut rstd1,
                &x[row_start * w..row_end * w],
                ln1g,
                ln1b,
                rows,
                w,
            );
            let mut q = alloc::vec![T::zero(); rows * w];
            matmul(&mut q, &ln1, &p[off[2]..off[2] + w * w], rows, w, w);
            {
                let k_buf = &mut keys[l];
                let v_buf = &mut values[l];
                matmul(
                    &mut k_buf[row_start * w..row_end * w],
                    &ln1,
                    &p[off[3]..off[3] + w * w],
                    rows,
                    w,
                    w,
                );
                matmul(
                    &mut v_buf[row_start * w..row_end * w],
                    &ln1,
                    &p[off[4]..off[4] + w * w],
                    rows,
                    w,
                    w,
                );
            }
            for r in 0..rows {
                let abs = row_start + r;
                let id4 = ids.at(abs);
                for h in 0..heads {
                    apply_rope(&mut q[r * w + h * hd..r * w + (h + 1) * hd], id4, self.config.rope_bases)?;
                    apply_rope(
                        &mut keys[l][abs * w + h * hd..abs * w + (h + 1) * hd],
                        id4,
                        self.config.rope_bases,
                    )?;
                }
            }
            let mut att = alloc::vec![T::zero(); rows * w];
            let mut probs_store: Vec<T> = match &build {
                Some(_) => {
                    let pairs: usize = (row_start..row_end).map(|r| plan.row_keys(r)).sum();
                    Vec::with_capacity(pairs * heads)
                }
                None => Vec::new(),
            };
            let mut scores: Vec<T> = Vec::new();
            for h in 0..heads {
                let hc = h * hd;
                for r in 0..rows {
                    let abs = row_start + r;
                    let q_row = &q[r * w + hc..r * w + hc + hd];
                    scores.clear();
                    let mut max = T::from(-1e30).unwrap();
                    for &(s, e) in plan.row(abs) {
                        for key in s..e {
                            let k_row = &keys[l][key * w + hc..key * w + hc + hd];
                            let mut dot = T::zero();
                            for d in 0..hd {
                                dot = dot + q_row[d] * k_row[d];
                            }
                            let s_val = dot * scale;
                            if s_val > max {
                                max = s_val;
                            }
                            scores.push(s_val);
                        }
                    }
                    let mut denom = T::zero();
                    for s_val in scores.iter_mut() {
                        *s_val = (*s_val - max).exp();
                        denom = denom + *s_val;
                    }
                    let out = &mut att[r * w + hc..r * w + hc + hd];
                    let mut cursor = 0usize;
                    for &(s, e) in plan.row(abs) {
                        for key in s..e {
                            let prob = scores[cursor] / denom;
                            cursor += 1;
                            let v_row = &values[l][key * w + hc..key * w + hc + hd];
                            for d in 0..hd {
                                out[d] = out[d] + prob * v_row[d];
                            }
                            if build.is_some() {
                                probs_store.push(prob);
                            }
                        }
                    }
                }
            }
            let mut proj = alloc::vec![T::zero(); rows * w];
            matmul(&mut proj, &att, &p[off[5]..off[5] + w * w], rows, w, w);
            for (slot, &delta) in x[row_start * w..row_end * w].iter_mut().zip(&proj) {
                *slot = *slot + delta;
            }
            let (ln2g, ln2b) = (&p[off[6]..off[6] + w], &p[off[7]..off[7] + w]);
            let mut ln2 = alloc::vec![T::zero(); rows * w];
            let mut mean2 = alloc::vec![T::zero(); rows];
            let mut rstd2 = alloc::vec![T::zero(); rows];
            layer_norm(
                &mut ln2,
                &mut mean2,
                &mut rstd2,
                &x[row_start * w..row_end * w],
                ln2g,
                ln2b,
                rows,
                w,
            );
            let hidden = self.config.mlp_ratio * w;
            let mut fc1 = alloc::vec![T::zero(); rows * hidden];
            matmul(&mut fc1, &ln2, &p[off[8]..off[8] + w * hidden], rows, w, hidden);
            let mut act = alloc::vec![T::zero(); rows * hidden];
            for (a, &z) in act.iter_mut().zip(&fc1) {
                *a = gelu(z);
            }
            let mut fc2 = alloc::vec![T::zero(); rows * w];
            matmul(&mut fc2, &act, &p[off[9]..off[9] + hidden * w], rows, hidden, w);
            if let Some(builder) = build.as_deref_mut() {
                builder.caches.push(LayerCache {
                    ln1_out: ln1,
                    ln1_mean: mean1,
                    ln1_rstd: rstd1,
                    q,
                    k: Vec::new(),
                    v: Vec::new(),
                    probs: probs_store,
                    att_out: att,
                    mid: x[row_start * w..row_end * w].to_vec(),
                    ln2_out: ln2,
                    ln2_mean: mean2,
                    ln2_rstd: rstd2,
                    fc1_out: fc1,
                    gelu_out: act,
                });
            }
            for (slot, &delta) in x[row_start * w..row_end * w].iter_mut().zip(&fc2) {
                *slot = *slot + delta;
            }
        }
        Ok(())
    }
}

/// Scratch collector used while forward builds its cache.
struct ForwardBuild<T> {
    /// Residual-stream snapshot at the entry of each layer.
    layer_inputs: Vec<Vec<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Float> Model<T> {
    /// Teacher-forced forward pass over a full sequence, producing bit
    /// logits per content token and the activation cache for backward.
    pub fn forward(&self, stream: &TokenStream<T>) -> Result<ForwardPass<T>, ModelError> {
        let w = self.config.width();
        let n = stream.n_tokens();
        if stream.ids.len() != n || stream.mask.n_tokens != n {
            return Err(ModelError::BlockCount { got: stream.ids.len(), expected: n });
        }
        let plan = build_row_plan(&stream.mask);
        let mut x = self.embed(stream)?;
        let mut keys: Vec<Vec<T>> =
            (0..self.config.layers).map(|_| alloc::vec![T::zero(); n * w]).collect();
        let mut values: Vec<Vec<T>> =
            (0..self.config.layers).map(|_| alloc::vec![T::zero(); n * w]).collect();
        let mut build = ForwardBuild { layer_inputs: Vec::new(), caches: Vec::new() };
        self.run_rows(&mut x, 0, n, &plan, &stream.ids, &mut keys, &mut values, Some(&mut build))?;
        // Move shared key/value buffers into their layer caches.
        for (l, cache) in build.caches.iter_mut().enumerate() {
            cache.k = core::mem::take(&mut keys[l]);
            cache.v = core::mem::take(&mut values[l]);
        }
        let layer_inputs = build.layer_inputs;

        let (lnf_g, lnf_b) = (
            &self.params[self.offsets.ln_f_g..self.offsets.ln_f_g + w],
            &self.params[self.offsets.ln_f_b..self.offsets.ln_f_b + w],
        );
        let mut lnf_out = alloc::vec![T::zero(); n * w];
        let mut lnf_mean = alloc::vec![T::zero(); n];
        let mut lnf_rstd = alloc::vec![T::zero(); n];
        layer_norm(&mut lnf_out, &mut lnf_mean, &mut lnf_rstd, &x, lnf_g, lnf_b, n, w);

        let mut logits = Vec::new();
        let mut logit_offsets = alloc::vec![0usize];
        let mut content_positions = Vec::new();
        for (i, kind) in stream.kinds.iter().enumerate() {
            if let TokenKind::Content { bitwidth } = *kind {
                let (_, head_w, head_b) = self.offsets.bits_entry(bitwidth)?;
                let b = bitwidth as usize;
                let h_row = &lnf_out[i * w..(i + 1) * w];
                let head = &self.params[head_w..head_w + w * b];
                let bias = &self.params[head_b..head_b + b];
                let start = logits.len();
                logits.extend(bias.iter().copied());
                let out = &mut logits[start..start + b];
                for (j, &a) in h_row.iter().enumerate() {
                    let w_row = &head[j * b..(j + 1) * b];
                    for o in 0..b {
                        out[o] = out[o] + a * w_row[o];
                    }
                }
                logit_offsets.push(logits.len());
                content_positions.push(i);
            }
        }
        Ok(ForwardPass {
            logits,
            logit_offsets,
            content_positions,
            layer_inputs,
            caches: build.caches,
            x_final: x,
            lnf_out,
            lnf_mean,
            lnf_rstd,
            plan,
        })
    }
}

/// Scalar statistics of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    /// Mean binary cross-entropy per predicted bit.
    pub loss: f64,
    /// Fraction of bits whose thresholded logit matches the label.
    pub bit_accuracy: f64,
    pub n_bits: usize,
}

/// Numerically stable per-bit binary cross-entropy:
/// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
fn bce_terms<T: Float>(z: T, y: bool) -> (T, T) {
    let zero = T::zero();
    let pos = if z > zero { z } else { zero };
    let yz = if y { z } else { zero };
    let loss = pos - yz + (-z.abs()).exp().ln_1p();
    // sigmoid(z) - y, computed stably.
    let sig = if z >= zero {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    let grad = sig - if y { T::one() } else { T::zero() };
    (loss, grad)
}

/// Mean binary cross-entropy of one block's logits against its bit labels.
pub fn bitwise_bce<T: Float>(logits: &[T], labels: &BitTensor) -> T {
    let b = labels.bitwidth() as usize;
    let n = labels.n_positions();
    assert_eq!(logits.len(), n * b, "logit count must match label bits");
    let mut total = T::zero();
    for pos in 0..n {
        for bit in 0..b {
            let (loss, _) = bce_terms(logits[pos * b + bit], labels.get_bit(pos, bit as u32));
            total = total + loss;
        }
    }
    total / T::from((n * b) as f64).unwrap()
}

/// Loss over a forward pass, without gradients.
pub fn stream_loss<T: Float>(pass: &ForwardPass<T>, stream: &TokenStream<T>) -> TrainStats {
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut bits = 0usize;
    for token in 0..pass.content_positions.len() {
        let span = pass.logit_offsets[token]..pass.logit_offsets[token + 1];
        let label = stream.labels[token];
        for (bit, &z) in pass.logits[span].iter().enumerate() {
            let y = (label >> bit) & 1 == 1;
            let (l, _) = bce_terms(z, y);
            loss += l.to_f64().unwrap();
            correct += usize::from((z >= T::zero()) == y);
            bits += 1;
        }
    }
    TrainStats { loss: loss / bits.max(1) as f64, bit_accuracy: correct as f64 / bits.max(1) as f64, n_bits: bits }
}

impl<T: Float> Model<T> {
    /// Full loss and parameter gradients for one teacher-forced sequence.
    /// The returned gradient buffer matches `params` element-for-element.
    pub fn loss_and_grad(
        &self,
        stream: &TokenStream<T>,
    ) -> Result<(TrainStats, Vec<T>), ModelError> {
        let pass = self.forward(stream)?;
        let stats = stream_loss(&pass, stream);
        let grads = self.backward(&pass, stream)?;
        Ok((stats, grads))
    }

    fn backward(
        &self,
        pass: &ForwardPass<T>,
        stream: &TokenStream<T>,
    ) -> Result<Vec<T>, ModelError> {
        let w = self.config.width();
        let hd = self.config.head_dim;
        let heads = self.config.heads;
        let n = stream.n_tokens();
        let hidden = self.config.mlp_ratio * w;
        let scale = T::from(1.0 / (hd as f64).sqrt()).unwrap();
        let inv_bits = T::from(1.0 / stream.total_bits.max(1) as f64).unwrap();
        let mut grads = alloc::vec![T::zero(); self.params.len()];

        // Head backward: d(lnf_out).
        let mut d_lnf = alloc::vec![T::zero(); n * w];
        for (token, &position) in pass.content_positions.iter().enumerate() {
            let bitwidth = match stream.kinds[position] {
                TokenKind::Content { bitwidth } => bitwidth,
                _ => unreachable!("content positions index content tokens"),
            };
            let (_, head_w, head_b) = self.offsets.bits_entry(bitwidth)?;
            let b = bitwidth as usize;
            let label = stream.labels[token];
            let z = &pass.logits[pass.logit_offsets[token]..pass.logit_offsets[token + 1]];
            let h_row = &pass.lnf_out[position * w..(position + 1) * w];
            let d_row = &mut d_lnf[position * w..(position + 1) * w];
            for (bit, &logit) in z.iter().enumerate() {
                let y = (label >> bit) & 1 == 1;
                let (_, g) = bce_terms(logit, y);
                let dz = g * inv_bits;
                grads[head_b + bit] = grads[head_b + bit] + dz;
                let head = &self.params[head_w..head_w + w * b];
                for j in 0..w {
                    d_row[j] = d_row[j] + dz * head[j * b + bit];
                    grads[head_w + j * b + bit] = grads[head_w + j * b + bit] + dz * h_row[j];
                }
            }
        }

        // Final layer norm backward.
        let mut dx = alloc::vec![T::zero(); n * w];
        {
            let (go, bo) = (self.offsets.ln_f_g, self.offsets.ln_f_b);
            let g = self.params[go..go + w].to_vec();
            let (dg, db) = {
                let mut dg = alloc::vec![T::zero(); w];
                let mut db = alloc::vec![T::zero(); w];
                layer_norm_backward(
                    &mut dx,
                    &mut dg,
                    &mut db,
                    &d_lnf,
                    &pass.x_final,
                    &pass.lnf_mean,
                    &pass.lnf_rstd,
                    &g,
                    n,
                    w,
                );
                (dg, db)
            };
            for j in 0..w {
                grads[go + j] = grads[go + j] + dg[j];
                grads[bo + j] = grads[bo + j] + db[j];
            }
        }

        // Layers in reverse.
        for l in (0..self.config.layers).rev() {
            let off = &self.offsets.layers[l];
            let cache = &pass.caches[l];
            let layer_in = &pass.layer_inputs[l];

            // MLP half: x_out = mid + fc2(gelu(fc1(ln2(mid)))).
            let mut d_act = alloc::vec![T::zero(); n * hidden];
            // d through fc2.
            {
                let w2 = &self.params[off[9]..off[9] + hidden * w];
                let dw2 = &mut grads[off[9]..off[9] + hidden * w];
                matmul_backward(&mut d_act, dw2, &dx, &cache.gelu_out, w2, n, hidden, w);
            }
            let mut d_fc1 = alloc::vec![T::zero(); n * hidden];
            for i in 0..n * hidden {
                d_fc1[i] = d_act[i] * gelu_grad(cache.fc1_out[i]);
            }
            let mut d_ln2 = alloc::vec![T::zero(); n * w];
            {
                let w1 = &self.params[off[8]..off[8] + w * hidden];
                let dw1 = &mut grads[off[8]..off[8] + w * hidden];
                matmul_backward(&mut d_ln2, dw1, &d_fc1, &cache.ln2_out, w1, n, w, hidden);
            }
            // ln2 backward adds into d(mid); dx (residual) also flows.
            {
                let g = self.params[off[6]..off[6] + w].to_vec();
                let mut dg = alloc::vec![T::zero(); w];
                let mut db = alloc::vec![T::zero(); w];
                let mut d_mid = alloc::vec![T::zero(); n * w];
                layer_norm_backward(
                    &mut d_mid,
                    &mut dg,
                    &mut db,
                    &d_ln2,
                    &cache.mid,
                    &cache.ln2_mean,
                    &cache.ln2_rstd,
                    &g,
                    n,
                    w,
                );
                for j in 0..w {
                    grads[off[6] + j] = grads[off[6] + j] + dg[j];
                    grads[off[7] + j] = grads[off[7] + j] + db[j];
                }
                for (slot, &d) in dx.iter_mut().zip(&d_mid) {
                    *slot = *slot + d;
                }
            }

            // Attention half: mid = layer_in + wo(att_out).
            let mut d_att = alloc::vec![T::zero(); n * w];
            {
                let wo = &self.params[off[5]..off[5] + w * w];
                let dwo = &mut grads[off[5]..off[5] + w * w];
                matmul_backward(&mut d_att, dwo, &dx, &cache.att_out, wo, n, w, w);
            }
            // Attention core backward using cached probabilities.
            let mut dq = alloc::vec![T::zero(); n * w];
            let mut dk = alloc::vec![T::zero(); n * w];
            let mut dv = alloc::vec![T::zero(); n * w];
            let mut prob_cursor = 0usize;
            for h in 0..heads {
                let hc = h * hd;
                for r in 0..n {
                    let d_out = &d_att[r * w + hc..r * w + hc + hd];
                    let q_row = &cache.q[r * w + hc..r * w + hc + hd];
                    // First pass: dp and the softmax dot.
                    let row_probs = {
                        let count = pass.plan.row_keys(r);
                        let slice = &cache.probs[prob_cursor..prob_cursor + count];
                        prob_cursor += count;
                        slice
                    };
                    let mut s_dot = T::zero();
                    let mut cursor = 0usize;
                    let mut dps: Vec<T> = Vec::with_capacity(row_probs.len());
                    for &(s, e) in pass.plan.row(r) {
                        for key in s..e {
                            let v_row = &cache.v[key * w + hc..key * w + hc + hd];
                            let mut dp = T::zero();
                            for d in 0..hd {
                                dp = dp + d_out[d] * v_row[d];
                            }
                            s_dot = s_dot + row_probs[cursor] * dp;
                            dps.push(dp);
                            cursor += 1;
                        }
                    }
                    cursor = 0;
                    for &(s, e) in pass.plan.row(r) {
                        for key in s..e {
                            let prob = row_probs[cursor];
                            let ds = prob * (dps[cursor] - s_dot) * scale;
                            cursor += 1;
                            let k_row = &cache.k[key * w + hc..key * w + hc + hd];
                            let dq_row = &mut dq[r * w + hc..r * w + hc + hd];
                            for d in 0..hd {
                                dq_row[d] = dq_row[d] + ds * k_row[d];
                            }
                            let dk_row = &mut dk[key * w + hc..key * w + hc + hd];
                            for d in 0..hd {
                                dk_row[d] = dk_row[d] + ds * q_row[d];
                            }
                            let dv_row = &mut dv[key * w + hc..key * w + hc + hd];
                            for d in 0..hd {
                                dv_row[d] = dv_row[d] + prob * d_out[d];
                            }
                        }
                    }
                }
            }
            // Undo the rotations to reach pre-rotation q/k gradients.
            for r in 0..n {
                let id4 = stream.ids.at(r);
                for h in 0..heads {
                    apply_rope_inverse(
                        &mut dq[r * w + h * hd..r * w + (h + 1) * hd],
                        id4,
                        self.config.rope_bases,
                    )?;
                    apply_rope_inverse(
                        &mut dk[r * w + h * hd..r * w + (h + 1) * hd],
                        id4,
                        self.config.rope_bases,
                    )?;
                }
            }
            // Project back through wq/wk/wv into d(ln1).
            let mut d_ln1 = alloc::vec![T::zero(); n * w];
            {
                let wq = &self.params[off[2]..off[2] + w * w];
                let dwq = &mut grads[off[2]..off[2] + w * w];
                matmul_backward(&mut d_ln1, dwq, &dq, &cache.ln1_out, wq, n, w, w);
            }
            {
                let wk = &self.params[off[3]..off[3] + w * w];
                let dwk = &mut grads[off[3]..off[3] + w * w];
                matmul_backward(&mut d_ln1, dwk, &dk, &cache.ln1_out, wk, n, w, w);
            }
            {
                let wv = &self.params[off[4]..off[4] + w * w];
                let dwv = &mut grads[off[4]..off[4] + w * w];
                matmul_backward(&mut d_ln1, dwv, &dv, &cache.ln1_out, wv, n, w, w);
            }
            // ln1 backward into the layer input; residual dx flows through.
            {
                let g = self.params[off[0]..off[0] + w].to_vec();
                let mut dg = alloc::vec![T::zero(); w];
                let mut db = alloc::vec![T::zero(); w];
                let mut d_in = alloc::vec![T::zero(); n * w];
                layer_norm_backward(
                    &mut d_in,
                    &mut dg,
                    &mut db,
                    &d_ln1,
                    layer_in,
                    &cache.ln1_mean,
                    &cache.ln1_rstd,
                    &g,
                    n,
                    w,
                );
                for j in 0..w {
                    grads[off[0] + j] = grads[off[0] + j] + dg[j];
                    grads[off[1] + j] = grads[off[1] + j] + db[j];
                }
                for (slot, &d) in dx.iter_mut().zip(&d_in) {
                    *slot = *slot + d;
                }
            }
        }

        // Embedding backward from dx (= d x0).
        let c = self.config.channels;
        for (i, kind) in stream.kinds.iter().enumerate() {
            let d_row = &dx[i * w..(i + 1) * w];
            match *kind {
                TokenKind::Text(token) => {
                    let base = self.offsets.text_emb + token as usize * w;
                    for j in 0..w {
                        grads[base + j] = grads[base + j] + d_row[j];
                    }
                }
                TokenKind::Cond(type_id) => {
                    let vec = &stream.vectors[i * c..(i + 1) * c];
                    for (j, &a) in vec.iter().enumerate() {
                        let base = self.offsets.cond_proj + j * w;
                        for o in 0..w {
                            grads[base + o] = grads[base + o] + a * d_row[o];
                        }
                    }
                    let base = self.offsets.type_emb + type_id as usize * w;
                    for o in 0..w {
                        grads[base + o] = grads[base + o] + d_row[o];
                    }
                }
                TokenKind::Content { bitwidth } => {
                    let (in_proj, _, _) = self.offsets.bits_entry(bitwidth)?;
                    let vec = &stream.vectors[i * c..(i + 1) * c];
                    for (j, &a) in vec.iter().enumerate() {
                        let base = in_proj + j * w;
                        for o in 0..w {
                            grads[base + o] = grads[base + o] + a * d_row[o];
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Optimizer wrapper holding the moment state for one model.
pub struct Trainer<T: Float> {
    pub opt: MomentOptimizer<T>,
    steps: usize,
}

impl<T: Float> Trainer<T> {
    /// Fresh optimizer state sized for the model, at the config's rate.
    pub fn new(model: &Model<T>) -> Self {
        Self {
            opt: MomentOptimizer::new(model.n_params(), T::from(model.config.lr).unwrap()),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update over a batch: gradients of the bit-mean loss across all
    /// items, applied with bias-corrected moments. Deterministic.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        batch: &[TokenStream<T>],
    ) -> Result<TrainStats, ModelError> {
        let mut total_bits = 0usize;
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut grads = alloc::vec![T::zero(); model.n_params()];
        for stream in batch {
            let (stats, item_grads) = model.loss_and_grad(stream)?;
            let weight = T::from(stats.n_bits as f64).unwrap();
            for (acc, &g) in grads.iter_mut().zip(&item_grads) {
                *acc = *acc + g * weight;
            }
            total_bits += stats.n_bits;
            loss_sum += stats.loss * stats.n_bits as f64;
            acc_sum += stats.bit_accuracy * stats.n_bits as f64;
        }
        let loss = loss_sum / total_bits.max(1) as f64;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: self.steps });
        }
        let norm = T::from(1.0 / total_bits.max(1) as f64).unwrap();
        for g in grads.iter_mut() {
            *g = *g * norm;
        }
        self.opt.step(&mut model.params, &grads);
        self.steps += 1;
        Ok(TrainStats {
            loss,
            bit_accuracy: acc_sum / total_bits.max(1) as f64,
            n_bits: total_bits,
        })
    }
}

/// Result of sampling a full layout.
#[derive(Debug, Clone)]
pub struct GenerateOutput<T> {
    /// One code block per layout block (history blocks pass through).
    pub labels: Vec<BitTensor>,
    /// Bit logits per block, `tokens x bitwidth` flattened.
    pub logits: Vec<Vec<T>>,
    /// Peak resident KV tokens implied by the mask (eviction accounting).
    pub peak_cached: usize,
}

/// Autoregressive block-by-block generation (inference mirror of the
/// training codec, without flips).
///
/// Blocks covered by `history` are teacher-forced: their codes pass through
/// unchanged (their logits are still produced, so prefix consistency can be
/// checked). Remaining blocks sample each bit from `sigmoid(z / temperature)`;
/// temperature zero thresholds at logit zero. Random draws happen only for
/// sampled blocks, position-major then bit-ascending.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Float, R: Rng>(
    model: &Model<T>,
    quantizer: &Quantizer,
    layout: &VideoLayout,
    text: &[usize],
    conditions: &[(usize, &LatentVolume)],
    history: &[BitTensor],
    temperature: f64,
    variant: MaskVariant,
    rng: &mut R,
) -> Result<GenerateOutput<T>, ModelError> {
    if quantizer.channels() != model.config.channels {
        return Err(ModelError::Channels {
            got: quantizer.channels(),
            expected: model.config.channels,
        });
    }
    if history.len() > layout.flat_blocks.len() {
        return Err(ModelError::HistoryLength {
            got: history.len(),
            expected: layout.flat_blocks.len(),
        });
    }
    for (i, (codes, block)) in history.iter().zip(&layout.flat_blocks).enumerate() {
        let tuple = layout.block_tuple(block);
        if codes.dims() != (tuple.t, tuple.h, tuple.w) || codes.bitwidth() != tuple.bitwidth {
            return Err(ModelError::HistoryShape { index: i });
        }
    }

    let w = model.config.width();
    let c = model.config.channels;
    let mode = ResizeMode::Bilinear;
    // Assemble the condition prefix as a stream with zero content blocks.
    let mut kinds = Vec::new();
    let mut cond_vectors: Vec<T> = Vec::new();
    for &token in text {
        kinds.push(TokenKind::Text(token as u32));
        cond_vectors.extend(core::iter::repeat_n(T::zero(), c));
    }
    for &(type_id, volume) in conditions {
        if type_id >= COND_TYPES {
            return Err(ModelError::TypeRange { id: type_id });
        }
        let (vc, t, h, wd) = volume.shape();
        if vc != c {
            return Err(ModelError::Channels { got: vc, expected: c });
        }
        let mut vector = alloc::vec![0.0f64; c];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..wd {
                    volume.position_vector(ti, y, x, &mut vector);
                    kinds.push(TokenKind::Cond(type_id as u32));
                    cond_vectors.extend(vector.iter().map(|&v| T::from(v).unwrap()));
                }
            }
        }
    }
    let n_cond = kinds.len();
    let mask = build_mask(layout, n_cond, variant)?;
    let ids = rope_ids(layout, n_cond);
    let plan = build_row_plan(&mask);
    let n = mask.n_tokens;
    let peak_cached = kv_cache_profile(&mask).peak;

    // Whole-sequence activation buffer plus per-layer key/value caches.
    let mut x = alloc::vec![T::zero(); n * w];
    let mut keys: Vec<Vec<T>> =
        (0..model.config.layers).map(|_| alloc::vec![T::zero(); n * w]).collect();
    let mut values: Vec<Vec<T>> =
        (0..model.config.layers).map(|_| alloc::vec![T::zero(); n * w]).collect();

    // Embed and run the condition prefix.
    let prefix_stream = TokenStream {
        kinds: kinds.clone(),
        vectors: cond_vectors,
        channels: c,
        labels: Vec::new(),
        n_cond,
        mask: mask.clone(),
        ids: ids.clone(),
        blocks: Vec::new(),
        total_bits: 0,
    };
    let prefix_embed = model.embed(&prefix_stream)?;
    x[..n_cond * w].copy_from_slice(&prefix_embed);
    if n_cond > 0 {
        model.run_rows(&mut x, 0, n_cond, &plan, &ids, &mut keys, &mut values, None)?;
    }

    // Per-pyramid reconstruction state mirrors the codec loop.
    let mut labels: Vec<BitTensor> = Vec::with_capacity(layout.flat_blocks.len());
    let mut logits_out: Vec<Vec<T>> = Vec::with_capacity(layout.flat_blocks.len());
    let mut recon: Option<(usize, LatentVolume)> = None; // (pyramid, volume)
    let mut next_input: Option<LatentVolume> = None;
    let (lnf_g, lnf_b) = (
        &model.params[model.offsets.ln_f_g..model.offsets.ln_f_g + w],
        &model.params[model.offsets.ln_f_b..model.offsets.ln_f_b + w],
    );

    for (index, block) in layout.flat_blocks.iter().enumerate() {
        let tuple = *layout.block_tuple(block);
        let schedule = layout.pyramid(block.pyramid);
        let (full_h, full_w) = schedule.largest().expect("pyramid has scales");
        if recon.as_ref().map(|(p, _)| *p) != Some(block.pyramid) {
            recon = Some((block.pyramid, LatentVolume::zeros(c, tuple.t, full_h, full_w)));
        }
        // Input volume for this block: zeros for the very first block,
        // otherwise the running reconstruction sized for this block.
        let input = match next_input.take() {
            Some(volume) => volume,
            None => LatentVolume::zeros(c, tuple.t, tuple.h, tuple.w),
        };
        // Embed this block's rows.
        let row_start = n_cond + block.offset;
        let row_end = row_start + block.tokens;
        {
            let (in_proj, _, _) = model.offsets.bits_entry(tuple.bitwidth)?;
            let proj = &model.params[in_proj..in_proj + c * w];
            let mut vector = alloc::vec![0.0f64; c];
            let mut row = row_start;
            for ti in 0..tuple.t {
                for y in 0..tuple.h {
                    for xx in 0..tuple.w {
                        input.position_vector(ti, y, xx, &mut vector);
                        let out = &mut x[row * w..(row + 1) * w];
                        for slot in out.iter_mut() {
                            *slot = T::zero();
                        }
                        for (j, &a) in vector.iter().enumerate() {
                            let a = T::from(a).unwrap();
                            let w_row = &proj[j * w..(j + 1) * w];
                            for o in 0..w {
                                out[o] = out[o] + a * w_row[o];
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        model.run_rows(&mut x, row_start, row_end, &plan, &ids, &mut keys, &mut values, None)?;

        // Final norm + head over this block's rows.
        let rows = block.tokens;
        let mut lnf = alloc::vec![T::zero(); rows * w];
        let mut mean = alloc::vec![T::zero(); rows];
        let mut rstd = alloc::vec![T::zero(); rows];
        layer_norm(
            &mut lnf,
            &mut mean,
            &mut rstd,
            &x[row_start * w..row_end * w],
            lnf_g,
            lnf_b,
            rows,
            w,
        );
        let (_, head_w, head_b) = model.offsets.bits_entry(tuple.bitwidth)?;
        let b = tuple.bitwidth as usize;
        let head = &model.params[head_w..head_w + w * b];
        let bias = &model.params[head_b..head_b + b];
        let mut block_logits = alloc::vec![T::zero(); rows * b];
        for r in 0..rows {
            let h_row = &lnf[r * w..(r + 1) * w];
            let out = &mut block_logits[r * b..(r + 1) * b];
            out.copy_from_slice(bias);
            for (j, &a) in h_row.iter().enumerate() {
                let w_row = &head[j * b..(j + 1) * b];
                for o in 0..b {
                    out[o] = out[o] + a * w_row[o];
                }
            }
        }

        // Choose codes: history pass-through or bit sampling.
        let codes = if index < history.len() {
            history[index].clone()
        } else {
            let mut codes = BitTensor::zeros(tuple.t, tuple.h, tuple.w, tuple.bitwidth);
            for pos in 0..codes.n_positions() {
                for bit in 0..b {
                    let z = block_logits[pos * b + bit].to_f64().unwrap();
                    let one = if temperature <= 0.0 {
                        z >= 0.0
                    } else {
                        let p = {
                            let t = z / temperature;
                            if t >= 0.0 {
                                1.0 / (1.0 + (-t).exp())
                            } else {
                                let e = t.exp();
                                e / (1.0 + e)
                            }
                        };
                        rng.random::<f64>() < p
                    };
                    codes.set_bit(pos, bit as u32, one);
                }
            }
            codes
        };

        // Accumulate the reconstruction and prepare the next block's input,
        // mirroring the codec's op order exactly.
        let (_, volume) = recon.as_mut().expect("reconstruction initialized");
        let dequant = quantizer.dequantize_block(&codes)?;
        let fine = resize_spatial(&dequant, full_h, full_w, mode)?;
        volume.add_assign(&fine)?;
        if index + 1 < layout.flat_blocks.len() {
            let next_block = &layout.flat_blocks[index + 1];
            let next_tuple = layout.block_tuple(next_block);
            let sized = resize_spatial(volume, next_tuple.h, next_tuple.w, mode)?;
            let sized = if sized.t() == next_tuple.t {
                sized
            } else {
                sized.broadcast_frames(next_tuple.t)?
            };
            next_input = Some(sized);
        }
        labels.push(codes);
        logits_out.push(block_logits);
    }
    Ok(GenerateOutput { labels, logits: logits_out, peak_cached })
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub n_params: usize,
}

/// Compares analytic gradients against central finite differences on
/// `samples` deterministically chosen parameters (all of them when the
/// model is small enough). Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(
    model: &mut Model<f64>,
    stream: &TokenStream<f64>,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = model.loss_and_grad(stream)?;
    let n_params = model.n_params();
    let indices: Vec<usize> = if samples >= n_params {
        (0..n_params).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n_params, samples).into_vec()
    };
    let mut max_rel = 0.0f64;
    for &i in &indices {
        let original = model.params[i];
        model.params[i] = original + step;
        let plus = {
            let pass = model.forward(stream)?;
            stream_loss(&pass, stream).loss
        };
        model.params[i] = original - step;
        let minus = {
            let pass = model.forward(stream)?;
            stream_loss(&pass, stream).loss
        };
        model.params[i] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, checked: indices.len(), n_params })
}

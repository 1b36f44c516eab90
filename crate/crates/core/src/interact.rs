//! Long interactive generation: chunk planning, semantic/detail/anchor
//! condition construction, and single-round clip generation.
//!
//! A long video is decomposed into overlapping two-clip chunks. To generate
//! the next clip, the previous clip's reconstruction is compressed into a
//! spatially-downsampled semantic volume plus the last `K` full-scale
//! detail frames, and the very first frame of the whole session rides along
//! as an anchor against drift. These three volumes become condition tokens
//! in the sequence prefix.

use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;

use crate::attention::MaskVariant;
use crate::bsq::{BitTensor, BsqError, Quantizer};
use crate::codec::{reconstruct, CodecError};
use crate::model::{generate, Model, ModelError};
use crate::schedule::VideoLayout;
use crate::volume::{resize_spatial, LatentVolume, ResizeMode, VolumeError};

/// Errors raised by interactive-generation machinery.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InteractError {
    #[error("interactive sessions need at least 2 clips, got {got}")]
    TooFewClips { got: usize },
    #[error("detail frame count {k} outside 1..={t}")]
    DetailRange { k: usize, t: usize },
    #[error("stride {stride} must be at least 1")]
    StrideRange { stride: f64 },
    #[error("chunk clip length must be positive")]
    ClipLength,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("volume error: {0}")]
    Volume(#[from] VolumeError),
    #[error("quantizer error: {0}")]
    Bsq(#[from] BsqError),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
}

/// One sliding-window chunk: two consecutive clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chunk {
    /// Wall-clock start of the chunk in seconds.
    pub start_time: f64,
    /// Indices of the chunk's two clips; the second clip of chunk `i` is
    /// the first clip of chunk `i+1`.
    pub clips: (usize, usize),
}

/// Sliding-window decomposition of a long video into two-clip chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    pub chunks: Vec<Chunk>,
    /// Chunk-to-chunk stride in seconds (one clip).
    pub stride: f64,
    /// Single-clip duration in seconds; chunks last twice this.
    pub clip_len: f64,
}

/// Plans the chunk decomposition: chunk `i` covers clips `(i, i+1)`, so
/// `total_clips` clips yield `total_clips - 1` chunks overlapping by one
/// clip each.
pub fn plan_chunks(total_clips: usize, clip_len: f64) -> Result<ChunkPlan, InteractError> {
    if total_clips < 2 {
        return Err(InteractError::TooFewClips { got: total_clips });
    }
    if clip_len.is_nan() || clip_len <= 0.0 {
        return Err(InteractError::ClipLength);
    }
    let chunks = (0..total_clips - 1)
        .map(|i| Chunk { start_time: i as f64 * clip_len, clips: (i, i + 1) })
        .collect();
    Ok(ChunkPlan { chunks, stride: clip_len, clip_len })
}

/// Condition volumes for one generation round, with their token budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct SemDetCondition {
    /// Whole previous clip, spatially downsampled (semantic continuity).
    pub sem: LatentVolume,
    /// Last `K` frames of the previous clip at full scale (detail).
    pub det: LatentVolume,
    /// First frame of the session's first clip (drift anchor).
    pub anchor: LatentVolume,
    pub sem_tokens: usize,
    pub det_tokens: usize,
    pub anchor_tokens: usize,
    /// True when sem+det is strictly smaller than the full previous clip
    /// at full scale; false means compression failed (e.g. stride 1 and
    /// K = t) and callers should warn.
    pub compressed: bool,
}

impl SemDetCondition {
    /// Total condition tokens (sem + det + anchor).
    pub fn total_tokens(&self) -> usize {
        self.sem_tokens + self.det_tokens + self.anchor_tokens
    }

    /// The `(type id, volume)` list in prefix order: sem, det, anchor.
    pub fn as_condition_list(&self) -> [(usize, &LatentVolume); 3] {
        [(0, &self.sem), (1, &self.det), (2, &self.anchor)]
    }
}

/// Builds the semantic/detail/anchor condition from the previous clip's
/// full-scale features. `stride` spatially downsamples the semantic part
/// to `ceil(H/stride) x ceil(W/stride)`; `k` keeps that many trailing
/// frames at full scale.
pub fn build_condition(
    f_prev: &LatentVolume,
    anchor: &LatentVolume,
    k: usize,
    stride: f64,
) -> Result<SemDetCondition, InteractError> {
    let (_, t, h, w) = f_prev.shape();
    if k == 0 || k > t {
        return Err(InteractError::DetailRange { k, t });
    }
    if stride.is_nan() || stride < 1.0 {
        return Err(InteractError::StrideRange { stride });
    }
    let down = |len: usize| -> usize {
        let scaled = Float::ceil(len as f64 / stride) as usize;
        scaled.max(1)
    };
    let (sh, sw) = (down(h), down(w));
    let sem = resize_spatial(f_prev, sh, sw, ResizeMode::Bilinear)?;
    let det = f_prev.select_frames(t - k, k)?;
    let sem_tokens = t * sh * sw;
    let det_tokens = k * h * w;
    let anchor_tokens = anchor.t() * anchor.h() * anchor.w();
    let compressed = sem_tokens + det_tokens < t * h * w;
    Ok(SemDetCondition {
        sem,
        det,
        anchor: anchor.clone(),
        sem_tokens,
        det_tokens,
        anchor_tokens,
        compressed,
    })
}

/// One generated clip round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    /// Sampled code blocks for the clip pyramid.
    pub codes: Vec<BitTensor>,
    /// Full-scale reconstruction of the generated clip (next round's
    /// `F_prev`).
    pub features: LatentVolume,
    /// Condition tokens consumed (text + sem + det + anchor).
    pub prefix_tokens: usize,
}

/// Generates one new clip conditioned on text plus the semantic/detail/
/// anchor volumes, over a clip-only layout. The condition tokens sit in
/// the sequence prefix, visible to every query.
#[allow(clippy::too_many_arguments)]
pub fn interactive_generate<T: Float, R: Rng>(
    model: &Model<T>,
    quantizer: &Quantizer,
    layout: &VideoLayout,
    text: &[usize],
    condition: &SemDetCondition,
    temperature: f64,
    variant: MaskVariant,
    rng: &mut R,
) -> Result<RoundOutput, InteractError> {
    let conditions = condition.as_condition_list();
    let out =
        generate(model, quantizer, layout, text, &conditions, &[], temperature, variant, rng)?;
    let volumes = reconstruct(quantizer, &out.labels, layout, out.labels.len() - 1)?;
    let features = volumes.into_iter().next_back().expect("layout has a pyramid");
    Ok(RoundOutput {
        codes: out.labels,
        features,
        prefix_tokens: text.len() + condition.total_tokens(),
    })
}

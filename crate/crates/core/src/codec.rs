//! Video codec: multi-scale residual encoding with bitwise self-correction.
//!
//! Training pairs come from encoding every pyramid of a layout while
//! injecting label noise. At each retained scale the clean residual is
//! quantized and recorded as the label, *then* each label bit is flipped
//! independently with probability `flip_p`, and it is the flipped code's
//! dequantization that joins the running reconstruction. Every later label is
//! therefore defined against the corrupted history the model will actually
//! see at inference time, which teaches it to correct its own sampling
//! mistakes. With `flip_p = 0` the codec degenerates to plain encoding.
//!
//! The per-block inputs are the downsampled corrupted reconstructions sized
//! for the *next* block — exactly the teacher-forced model inputs — and the
//! flattened token sequence orders blocks pyramid-major, scale-major, with
//! positions `(t, h, w)` row-major inside a block.

use alloc::vec::Vec;
use rand::Rng;

use crate::bsq::{BitTensor, BsqError, Quantizer, SqdMask};
use crate::schedule::VideoLayout;
use crate::volume::{resize_spatial, LatentVolume, ResizeMode, VolumeError};

/// Errors raised by codec operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("quantizer error: {0}")]
    Bsq(#[from] BsqError),
    #[error("volume error: {0}")]
    Volume(#[from] VolumeError),
    #[error("layout has {expected} pyramids, got {got} feature volumes")]
    FeatureCount { got: usize, expected: usize },
    #[error("pyramid {pyramid} features have dims ({t}, {h}, {w}), expected ({et}, {eh}, {ew})")]
    FeatureDims { pyramid: usize, t: usize, h: usize, w: usize, et: usize, eh: usize, ew: usize },
    #[error("depth plan covers {got} pyramids, layout has {expected}")]
    PlanLength { got: usize, expected: usize },
    #[error("flip probability {p} outside [0, 1]")]
    FlipRange { p: f64 },
    #[error("label count {got} does not cover blocks up to {upto}")]
    PrefixIncomplete { got: usize, upto: usize },
    #[error("label {index} dims do not match its block")]
    LabelDims { index: usize },
    #[error("token sequence references block {flat_index} outside the layout")]
    BadBlockIndex { flat_index: usize },
}

/// Per-pyramid quantizer-depth masks for one layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqdPlan {
    /// One mask per pyramid, in layout order (image pyramid first when
    /// present).
    pub per_pyramid: Vec<SqdMask>,
}

impl SqdPlan {
    /// Plan retaining every scale of every pyramid.
    pub fn all(layout: &VideoLayout) -> Self {
        let mut per_pyramid = Vec::new();
        if !layout.image_pyramid.tuples.is_empty() {
            per_pyramid.push(SqdMask::all(layout.image_pyramid.tuples.len()));
        }
        for clip in &layout.clip_pyramids {
            per_pyramid.push(SqdMask::all(clip.tuples.len()));
        }
        Self { per_pyramid }
    }
}

/// Everything the transformer needs from one encoded video.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecOutput {
    /// Clean labels, one per retained block, recorded before flipping.
    pub labels: Vec<BitTensor>,
    /// The flipped codes whose dequantizations built the corrupted history.
    pub flipped: Vec<BitTensor>,
    /// Teacher-forced inputs: `inputs[j]` is the corrupted reconstruction
    /// after block `j`, sized for block `j + 1`. The final entry is sized
    /// for a continuation clip's first scale and is unused in training.
    pub inputs: Vec<LatentVolume>,
    /// Flat-block index of every retained block, ascending.
    pub block_index: Vec<usize>,
}

/// Flips each bit of `codes` independently with probability `flip_p`.
/// Bits are visited position-major, then bit-ascending, one uniform draw
/// per bit, so the stream is reproducible from the seed.
pub fn random_flip<R: Rng>(codes: &BitTensor, flip_p: f64, rng: &mut R) -> BitTensor {
    let mut flipped = codes.clone();
    if flip_p <= 0.0 {
        return flipped;
    }
    for pos in 0..codes.n_positions() {
        for bit in 0..codes.bitwidth() {
            if rng.random::<f64>() < flip_p {
                flipped.flip_bit(pos, bit);
            }
        }
    }
    flipped
}

/// Pyramids of a layout paired with their feature-volume dims, in order.
fn pyramid_dims(layout: &VideoLayout) -> Vec<(usize, (usize, usize, usize))> {
    let mut dims = Vec::new();
    for pyramid in 0..=layout.clip_pyramids.len() {
        let schedule = layout.pyramid(pyramid);
        if let (Some(first), Some((h, w))) = (schedule.tuples.first(), schedule.largest()) {
            dims.push((pyramid, (first.t, h, w)));
        }
    }
    dims
}

/// Splits a full latent video into per-pyramid feature volumes: the first
/// frame for the image pyramid (when present), then one run of `t_latent`
/// frames per clip. The video's frame count and spatial dims must match
/// what the layout expects.
pub fn split_features(
    video: &LatentVolume,
    layout: &VideoLayout,
) -> Result<Vec<LatentVolume>, CodecError> {
    let dims = pyramid_dims(layout);
    let expected_frames: usize = dims.iter().map(|&(_, (t, _, _))| t).sum();
    let (_, vt, vh, vw) = video.shape();
    if vt != expected_frames {
        return Err(CodecError::FeatureDims {
            pyramid: 0,
            t: vt,
            h: vh,
            w: vw,
            et: expected_frames,
            eh: vh,
            ew: vw,
        });
    }
    let mut features = Vec::with_capacity(dims.len());
    let mut start = 0usize;
    for &(pyramid, (t, h, w)) in &dims {
        if (vh, vw) != (h, w) {
            return Err(CodecError::FeatureDims { pyramid, t: vt, h: vh, w: vw, et: t, eh: h, ew: w });
        }
        features.push(video.select_frames(start, t)?);
        start += t;
    }
    Ok(features)
}

/// Encodes every pyramid of a layout with bitwise self-correction.
///
/// `features` holds one volume per non-empty pyramid in layout order; each
/// must match that pyramid's latent duration and finest scale. The returned
/// labels/inputs cover the blocks retained by `sqd`, in flat order.
pub fn encode_with_bsc<R: Rng>(
    quantizer: &Quantizer,
    features: &[LatentVolume],
    layout: &VideoLayout,
    sqd: &SqdPlan,
    flip_p: f64,
    rng: &mut R,
) -> Result<CodecOutput, CodecError> {
    if !(0.0..=1.0).contains(&flip_p) {
        return Err(CodecError::FlipRange { p: flip_p });
    }
    let dims = pyramid_dims(layout);
    if features.len() != dims.len() {
        return Err(CodecError::FeatureCount { got: features.len(), expected: dims.len() });
    }
    if sqd.per_pyramid.len() != dims.len() {
        return Err(CodecError::PlanLength { got: sqd.per_pyramid.len(), expected: dims.len() });
    }
    for (volume, &(pyramid, (t, h, w))) in features.iter().zip(&dims) {
        let (_, vt, vh, vw) = volume.shape();
        if (vt, vh, vw) != (t, h, w) {
            return Err(CodecError::FeatureDims {
                pyramid,
                t: vt,
                h: vh,
                w: vw,
                et: t,
                eh: h,
                ew: w,
            });
        }
    }

    let mode = ResizeMode::Bilinear;
    let mut out = CodecOutput {
        labels: Vec::new(),
        flipped: Vec::new(),
        inputs: Vec::new(),
        block_index: Vec::new(),
    };
    // Dims of every retained block in flat order, plus one continuation
    // entry, so each block can look up the size its input must take.
    let mut retained_dims: Vec<(usize, usize, usize)> = Vec::new();
    for (seq, &(pyramid, _)) in dims.iter().enumerate() {
        let schedule = layout.pyramid(pyramid);
        for (tuple, &keep) in schedule.tuples.iter().zip(&sqd.per_pyramid[seq].retained) {
            if keep {
                retained_dims.push((tuple.t, tuple.h, tuple.w));
            }
        }
    }
    // Continuation: a further clip would restart at the clip schedule's
    // first scale; image-only layouts continue with their own first scale.
    let continuation = {
        let schedule = layout
            .clip_pyramids
            .first()
            .filter(|s| !s.tuples.is_empty())
            .unwrap_or(&layout.image_pyramid);
        let first = schedule.tuples.first().expect("layout has at least one block");
        (first.t, first.h, first.w)
    };
    retained_dims.push(continuation);

    let mut emitted = 0usize;
    for (seq, &(pyramid, (t, h, w))) in dims.iter().enumerate() {
        let schedule = layout.pyramid(pyramid);
        let mask = &sqd.per_pyramid[seq];
        if mask.len() != schedule.tuples.len() {
            return Err(CodecError::Bsq(BsqError::MaskLength {
                got: mask.len(),
                len: schedule.tuples.len(),
            }));
        }
        let volume = &features[seq];
        let channels = quantizer.channels();
        let mut corrupted = LatentVolume::zeros(channels, t, h, w);
        let block_base: usize = layout
            .flat_blocks
            .iter()
            .position(|b| b.pyramid == pyramid)
            .expect("pyramid has blocks");
        for (scale, (tuple, &keep)) in
            schedule.tuples.iter().zip(&mask.retained).enumerate()
        {
            if !keep {
                continue;
            }
            let residual = volume.sub(&corrupted)?;
            let coarse = resize_spatial(&residual, tuple.h, tuple.w, mode)?;
            let (label, _) = quantizer.quantize_block(&coarse, tuple.bitwidth)?;
            let flipped = random_flip(&label, flip_p, rng);
            let dequant = quantizer.dequantize_block(&flipped)?;
            let fine = resize_spatial(&dequant, h, w, mode)?;
            corrupted.add_assign(&fine)?;
            // Input for the next block: the corrupted reconstruction so far,
            // downsampled to the next block's spatial dims; the temporal axis
            // is broadcast when the next pyramid runs longer.
            let (nt, nh, nw) = retained_dims[emitted + 1];
            let input = resize_spatial(&corrupted, nh, nw, mode)?;
            let input =
                if input.t() == nt { input } else { input.broadcast_frames(nt)? };
            out.labels.push(label);
            out.flipped.push(flipped);
            out.inputs.push(input);
            out.block_index.push(block_base + scale);
            emitted += 1;
        }
    }
    Ok(out)
}

/// The layout left after dropping the scales a depth plan discards; dropped
/// blocks vanish from the flat order entirely, which is exactly the sequence
/// the transformer trains on.
pub fn retained_layout(layout: &VideoLayout, plan: &SqdPlan) -> Result<VideoLayout, CodecError> {
    let dims = pyramid_dims(layout);
    if plan.per_pyramid.len() != dims.len() {
        return Err(CodecError::PlanLength { got: plan.per_pyramid.len(), expected: dims.len() });
    }
    let mut masks = plan.per_pyramid.iter();
    let image_pyramid = if layout.image_pyramid.tuples.is_empty() {
        layout.image_pyramid.clone()
    } else {
        layout.image_pyramid.retain(&masks.next().expect("plan covers image").retained)
    };
    let clip_pyramids = layout
        .clip_pyramids
        .iter()
        .map(|clip| clip.retain(&masks.next().expect("plan covers clips").retained))
        .collect();
    Ok(VideoLayout::from_schedules(image_pyramid, clip_pyramids, layout.t_latent, layout.pseudo))
}

/// One block of a flattened token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqBlock {
    /// Index into `layout.flat_blocks`.
    pub flat_index: usize,
    pub bitwidth: u32,
    /// Token offset within the flattened sequence.
    pub offset: usize,
    pub tokens: usize,
}

/// A flattened token sequence: one integer code per position, blocks in
/// pyramid-major, scale-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub codes: Vec<u64>,
    pub blocks: Vec<SeqBlock>,
}

impl TokenSequence {
    /// Block boundaries: every block's start offset plus the total length.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.blocks.iter().map(|b| b.offset).collect();
        out.push(self.codes.len());
        out
    }
}

/// Flattens encoded labels into a token sequence. Dropped blocks are simply
/// absent, so offsets compact over the retained blocks.
pub fn flatten(out: &CodecOutput, layout: &VideoLayout) -> Result<TokenSequence, CodecError> {
    let mut sequence = TokenSequence { codes: Vec::new(), blocks: Vec::new() };
    for (label, &flat_index) in out.labels.iter().zip(&out.block_index) {
        let block = layout
            .flat_blocks
            .get(flat_index)
            .ok_or(CodecError::BadBlockIndex { flat_index })?;
        let tuple = layout.block_tuple(block);
        if label.dims() != (tuple.t, tuple.h, tuple.w) || label.bitwidth() != tuple.bitwidth {
            return Err(CodecError::LabelDims { index: sequence.blocks.len() });
        }
        let offset = sequence.codes.len();
        for pos in 0..label.n_positions() {
            sequence.codes.push(label.code_u64(pos));
        }
        sequence.blocks.push(SeqBlock {
            flat_index,
            bitwidth: label.bitwidth(),
            offset,
            tokens: label.n_positions(),
        });
    }
    Ok(sequence)
}

/// Rebuilds per-block code tensors from a flattened sequence.
pub fn unflatten(
    sequence: &TokenSequence,
    layout: &VideoLayout,
) -> Result<(Vec<BitTensor>, Vec<usize>), CodecError> {
    let mut labels = Vec::with_capacity(sequence.blocks.len());
    let mut block_index = Vec::with_capacity(sequence.blocks.len());
    for block in &sequence.blocks {
        let flat = layout
            .flat_blocks
            .get(block.flat_index)
            .ok_or(CodecError::BadBlockIndex { flat_index: block.flat_index })?;
        let tuple = layout.block_tuple(flat);
        let mut codes = BitTensor::zeros(tuple.t, tuple.h, tuple.w, tuple.bitwidth);
        for pos in 0..block.tokens {
            codes.set_code_u64(pos, sequence.codes[block.offset + pos]);
        }
        labels.push(codes);
        block_index.push(block.flat_index);
    }
    Ok((labels, block_index))
}

/// Cumulative per-pyramid reconstruction from the first `upto + 1` blocks.
///
/// `labels` must align with `layout.flat_blocks` (no dropped scales) and be
/// prefix-complete through `upto`. Pyramids with no included block come back
/// as zero volumes at their own dims, so the result always holds one volume
/// per non-empty pyramid.
pub fn reconstruct(
    quantizer: &Quantizer,
    labels: &[BitTensor],
    layout: &VideoLayout,
    upto: usize,
) -> Result<Vec<LatentVolume>, CodecError> {
    if labels.len() <= upto {
        return Err(CodecError::PrefixIncomplete { got: labels.len(), upto });
    }
    let dims = pyramid_dims(layout);
    let mut volumes = Vec::with_capacity(dims.len());
    for &(pyramid, (t, h, w)) in &dims {
        let schedule = layout.pyramid(pyramid);
        let included: Vec<BitTensor> = layout
            .flat_blocks
            .iter()
            .enumerate()
            .filter(|(flat_index, block)| *flat_index <= upto && block.pyramid == pyramid)
            .map(|(flat_index, block)| {
                let tuple = layout.block_tuple(block);
                let label = &labels[flat_index];
                if label.dims() != (tuple.t, tuple.h, tuple.w)
                    || label.bitwidth() != tuple.bitwidth
                {
                    return Err(CodecError::LabelDims { index: flat_index });
                }
                Ok(label.clone())
            })
            .collect::<Result<_, _>>()?;
        if included.is_empty() {
            volumes.push(LatentVolume::zeros(quantizer.channels(), t, h, w));
        } else {
            volumes.push(quantizer.decode_pyramid(&included, schedule, (h, w))?);
        }
    }
    Ok(volumes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_layout, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Toy-sized layout: ladder (1,1),(2,2),(4,4), T = 4, one clip.
    fn small_config() -> ScheduleConfig {
        ScheduleConfig {
            ladder: vec![(1, 1), (2, 2), (4, 4)],
            t_latent: 4,
            n_clips: 1,
            k_s: 0,
            reps: 1,
            small_bits: 4,
            large_bits: 8,
            small_bits_area_threshold: 3,
        }
    }

    fn random_features(layout: &VideoLayout, channels: usize, seed: u64) -> Vec<LatentVolume> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        for &(_, (t, h, w)) in pyramid_dims(layout).iter() {
            let mut v = LatentVolume::zeros(channels, t, h, w);
            for slot in v.as_mut_slice().iter_mut() {
                *slot = rng.random::<f64>() * 4.0 - 2.0;
            }
            features.push(v);
        }
        features
    }

    fn quantizer(channels: usize, seed: u64) -> Quantizer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Quantizer::with_adapters(channels, &[4, 8], &mut rng)
    }

    #[test]
    fn zero_flip_matches_plain_pyramid_encoding() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 1);
        let features = random_features(&layout, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.0, &mut rng)
            .unwrap();
        assert_eq!(out.labels, out.flipped);
        // Independent route: plain per-pyramid encoding.
        let mut expected = Vec::new();
        for (seq, &(pyramid, _)) in pyramid_dims(&layout).iter().enumerate() {
            let schedule = layout.pyramid(pyramid);
            let codes = q
                .encode_pyramid(&features[seq], schedule, &SqdMask::all(schedule.tuples.len()))
                .unwrap();
            expected.extend(codes);
        }
        assert_eq!(out.labels, expected);
    }

    #[test]
    fn full_flip_inverts_every_bit() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 4);
        let features = random_features(&layout, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 1.0, &mut rng)
            .unwrap();
        for (label, flipped) in out.labels.iter().zip(&out.flipped) {
            for pos in 0..label.n_positions() {
                for bit in 0..label.bitwidth() {
                    assert_ne!(label.get_bit(pos, bit), flipped.get_bit(pos, bit));
                }
            }
        }
    }

    #[test]
    fn flip_rate_approaches_probability() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 7);
        let features = random_features(&layout, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut flipped_bits = 0usize;
        let mut total_bits = 0usize;
        for _ in 0..40 {
            let out =
                encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.1, &mut rng)
                    .unwrap();
            for (label, flip) in out.labels.iter().zip(&out.flipped) {
                for pos in 0..label.n_positions() {
                    for bit in 0..label.bitwidth() {
                        total_bits += 1;
                        if label.get_bit(pos, bit) != flip.get_bit(pos, bit) {
                            flipped_bits += 1;
                        }
                    }
                }
            }
        }
        let rate = flipped_bits as f64 / total_bits as f64;
        assert!((rate - 0.1).abs() < 0.01, "empirical flip rate {rate}");
    }

    #[test]
    fn labels_rederive_from_corrupted_history() {
        // Self-correction soundness: replaying the flipped codes and
        // re-quantizing the residual at every step must reproduce the
        // stored labels exactly.
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 10);
        let features = random_features(&layout, 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.25, &mut rng)
            .unwrap();
        let mut cursor = 0usize;
        for (seq, &(pyramid, (t, h, w))) in pyramid_dims(&layout).iter().enumerate() {
            let schedule = layout.pyramid(pyramid);
            let mut corrupted = LatentVolume::zeros(6, t, h, w);
            for tuple in &schedule.tuples {
                let residual = features[seq].sub(&corrupted).unwrap();
                let coarse =
                    resize_spatial(&residual, tuple.h, tuple.w, ResizeMode::Bilinear).unwrap();
                let (label, _) = q.quantize_block(&coarse, tuple.bitwidth).unwrap();
                assert_eq!(label, out.labels[cursor], "block {cursor}");
                let dequant = q.dequantize_block(&out.flipped[cursor]).unwrap();
                let fine = resize_spatial(&dequant, h, w, ResizeMode::Bilinear).unwrap();
                corrupted.add_assign(&fine).unwrap();
                cursor += 1;
            }
        }
        assert_eq!(cursor, out.labels.len());
    }

    #[test]
    fn inputs_take_next_block_dims() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 13);
        let features = random_features(&layout, 6, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.1, &mut rng)
            .unwrap();
        assert_eq!(out.labels.len(), out.inputs.len());
        assert_eq!(out.labels.len(), 6);
        let shapes: Vec<(usize, usize, usize, usize)> =
            out.inputs.iter().map(|v| v.shape()).collect();
        // Image blocks (1,1),(2,2),(4,4) then clip blocks at T = 4; the
        // transition input is broadcast from 1 frame to 4, and the final
        // input is sized for a continuation clip's first scale.
        assert_eq!(
            shapes,
            vec![
                (6, 1, 2, 2),
                (6, 1, 4, 4),
                (6, 4, 1, 1),
                (6, 4, 2, 2),
                (6, 4, 4, 4),
                (6, 4, 1, 1),
            ]
        );
    }

    #[test]
    fn flatten_boundaries_match_layout() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 16);
        let features = random_features(&layout, 6, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.0, &mut rng)
            .unwrap();
        let sequence = flatten(&out, &layout).unwrap();
        assert_eq!(sequence.boundaries(), vec![0, 1, 5, 21, 25, 41, 105]);
        assert_eq!(sequence.codes.len(), 105);
    }

    #[test]
    fn dropped_blocks_compact_the_sequence() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 19);
        let features = random_features(&layout, 6, 20);
        let mut plan = SqdPlan::all(&layout);
        // Drop the last clip scale (16 tokens at 4x4 over 4 frames = 64).
        plan.per_pyramid[1].retained[2] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let out = encode_with_bsc(&q, &features, &layout, &plan, 0.0, &mut rng).unwrap();
        let sequence = flatten(&out, &layout).unwrap();
        assert_eq!(sequence.boundaries(), vec![0, 1, 5, 21, 25, 41]);
        assert_eq!(out.block_index, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 22);
        let features = random_features(&layout, 6, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.1, &mut rng)
            .unwrap();
        let sequence = flatten(&out, &layout).unwrap();
        let (labels, block_index) = unflatten(&sequence, &layout).unwrap();
        assert_eq!(labels, out.labels);
        assert_eq!(block_index, out.block_index);
    }

    #[test]
    fn reconstruct_prefixes() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 25);
        let features = random_features(&layout, 6, 26);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let out = encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.0, &mut rng)
            .unwrap();
        // upto = 0: only the coarsest image block; clips come back as zeros.
        let coarse = reconstruct(&q, &out.labels, &layout, 0).unwrap();
        assert_eq!(coarse.len(), 2);
        let expected =
            q.decode_pyramid(&out.labels[..1], &layout.image_pyramid, (4, 4)).unwrap();
        assert_eq!(coarse[0], expected);
        assert!(coarse[1].as_slice().iter().all(|&v| v == 0.0));
        // upto = all: equals a full per-pyramid decode.
        let full = reconstruct(&q, &out.labels, &layout, 5).unwrap();
        let image =
            q.decode_pyramid(&out.labels[..3], &layout.image_pyramid, (4, 4)).unwrap();
        let clip =
            q.decode_pyramid(&out.labels[3..], &layout.clip_pyramids[0], (4, 4)).unwrap();
        assert_eq!(full[0], image);
        assert_eq!(full[1], clip);
        // Short prefixes are rejected.
        assert!(matches!(
            reconstruct(&q, &out.labels[..2], &layout, 4),
            Err(CodecError::PrefixIncomplete { .. })
        ));
    }

    #[test]
    fn encoding_is_deterministic() {
        let layout = build_layout(&small_config()).unwrap();
        let q = quantizer(6, 28);
        let features = random_features(&layout, 6, 29);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(30);
            encode_with_bsc(&q, &features, &layout, &SqdPlan::all(&layout), 0.1, &mut rng)
                .unwrap()
        };
        assert_eq!(run(), run());
    }
}

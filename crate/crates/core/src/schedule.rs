//! Scale schedules and video layouts.
//!
//! A scale schedule is an ordered list of `(t, h, w)` tuples describing one
//! pyramid, coarse to fine. A video layout stitches pyramids together: one
//! image pyramid (`t = 1`) for the anchor frame, then `n_clips` identical
//! clip pyramids sharing the latent duration `T`. Spatial dims grow along the
//! ladder; `t` is constant within a pyramid. The first `k_s` ladder entries
//! of each clip pyramid may be repeated `reps` times as a group, which gives
//! the early (semantic) scales more sequence positions without changing any
//! spatial dims.

use alloc::vec::Vec;

/// Errors raised while validating a schedule configuration.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("scale ladder is empty")]
    EmptyLadder,
    #[error("ladder entry {index} has a zero dimension")]
    ZeroDim { index: usize },
    #[error("ladder areas must be strictly increasing (entry {index})")]
    LadderNotIncreasing { index: usize },
    #[error("latent duration must be at least 1")]
    ZeroDuration,
    #[error("k_s = {k_s} exceeds ladder length {len}")]
    KsOutOfRange { k_s: usize, len: usize },
    #[error("repetition count must be at least 1")]
    ZeroReps,
    #[error("bitwidth {bits} outside supported range 1..=64")]
    BitwidthRange { bits: u32 },
    #[error("single-pyramid layout requires n_clips = 1, got {n_clips}")]
    PseudoNeedsOneClip { n_clips: usize },
}

/// Configuration for building scale schedules and video layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    /// Spatial ladder `(h, w)` per scale, strictly increasing in area.
    pub ladder: Vec<(usize, usize)>,
    /// Latent frames per clip pyramid.
    pub t_latent: usize,
    /// Number of clip pyramids after the image pyramid.
    pub n_clips: usize,
    /// Leading ladder entries repeated in clip pyramids (0 = no repetition).
    pub k_s: usize,
    /// Total passes over those leading entries (1 = no repetition).
    pub reps: usize,
    /// Bitwidth for scales with area below `small_bits_area_threshold`.
    pub small_bits: u32,
    /// Bitwidth for all remaining scales.
    pub large_bits: u32,
    /// Area cutoff between the two bitwidths.
    pub small_bits_area_threshold: usize,
}

impl Default for ScheduleConfig {
    /// The toy configuration used throughout the tests and experiments.
    fn default() -> Self {
        Self {
            ladder: alloc::vec![(1, 1), (2, 2), (3, 3), (4, 4), (6, 6), (8, 8)],
            t_latent: 4,
            n_clips: 2,
            k_s: 2,
            reps: 2,
            small_bits: 16,
            large_bits: 32,
            small_bits_area_threshold: 10,
        }
    }
}

impl ScheduleConfig {
    fn validate(&self) -> Result<(), ScheduleError> {
        if self.ladder.is_empty() {
            return Err(ScheduleError::EmptyLadder);
        }
        let mut prev_area = 0usize;
        for (index, &(h, w)) in self.ladder.iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(ScheduleError::ZeroDim { index });
            }
            let area = h * w;
            if area <= prev_area {
                return Err(ScheduleError::LadderNotIncreasing { index });
            }
            prev_area = area;
        }
        if self.t_latent == 0 {
            return Err(ScheduleError::ZeroDuration);
        }
        if self.k_s > self.ladder.len() {
            return Err(ScheduleError::KsOutOfRange { k_s: self.k_s, len: self.ladder.len() });
        }
        if self.reps == 0 {
            return Err(ScheduleError::ZeroReps);
        }
        for bits in [self.small_bits, self.large_bits] {
            if bits == 0 || bits > 64 {
                return Err(ScheduleError::BitwidthRange { bits });
            }
        }
        Ok(())
    }

    /// Bitwidth assigned to a scale of the given spatial area.
    pub fn bits_for_area(&self, area: usize) -> u32 {
        if area < self.small_bits_area_threshold {
            self.small_bits
        } else {
            self.large_bits
        }
    }
}

/// One scale of a pyramid: latent dims plus the code bitwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleTuple {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub bitwidth: u32,
    /// True on the second and later passes of a repeated leading group.
    pub is_repeat: bool,
}

impl ScaleTuple {
    /// Tokens contributed by this scale.
    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// An ordered list of scales describing one pyramid, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    pub tuples: Vec<ScaleTuple>,
}

impl ScaleSchedule {
    /// Total tokens across all scales.
    pub fn token_count(&self) -> usize {
        self.tuples.iter().map(ScaleTuple::tokens).sum()
    }

    /// Spatial dims of the finest scale (the reconstruction target).
    pub fn largest(&self) -> Option<(usize, usize)> {
        self.tuples.iter().max_by_key(|s| s.h * s.w).map(|s| (s.h, s.w))
    }

    /// Schedule restricted to scales whose flag in `retained` is true.
    pub fn retain(&self, retained: &[bool]) -> ScaleSchedule {
        assert_eq!(retained.len(), self.tuples.len(), "retained mask length mismatch");
        ScaleSchedule {
            tuples: self
                .tuples
                .iter()
                .zip(retained)
                .filter(|(_, &keep)| keep)
                .map(|(s, _)| *s)
                .collect(),
        }
    }
}

/// Builds one pyramid from the ladder: `t` constant, optional leading-group
/// repetition, bitwidths assigned per area.
fn build_schedule(config: &ScheduleConfig, t: usize, with_repetition: bool) -> ScaleSchedule {
    let tuple_at = |index: usize, is_repeat: bool| {
        let (h, w) = config.ladder[index];
        ScaleTuple { t, h, w, bitwidth: config.bits_for_area(h * w), is_repeat }
    };
    let mut tuples = Vec::new();
    if with_repetition && config.k_s > 0 && config.reps > 1 {
        for pass in 0..config.reps {
            for index in 0..config.k_s {
                tuples.push(tuple_at(index, pass > 0));
            }
        }
        for index in config.k_s..config.ladder.len() {
            tuples.push(tuple_at(index, false));
        }
    } else {
        for index in 0..config.ladder.len() {
            tuples.push(tuple_at(index, false));
        }
    }
    ScaleSchedule { tuples }
}

/// One block of the flattened token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatBlock {
    /// Pyramid index: 0 is the image pyramid, 1.. are clips.
    pub pyramid: usize,
    /// Scale index within that pyramid's schedule.
    pub scale: usize,
    /// Token offset of the block in the flattened sequence.
    pub offset: usize,
    /// Tokens in the block (`t * h * w`).
    pub tokens: usize,
}

/// A full video layout: image pyramid, clip pyramids, and the flattened block
/// order used by the codec and the transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLayout {
    /// Anchor-frame pyramid (`t = 1`). Empty in single-pyramid layouts.
    pub image_pyramid: ScaleSchedule,
    /// Clip pyramids, all identical, sharing the latent duration.
    pub clip_pyramids: Vec<ScaleSchedule>,
    /// Blocks in generation order: image scales, then clip scales per clip.
    pub flat_blocks: Vec<FlatBlock>,
    /// Latent frames per clip pyramid.
    pub t_latent: usize,
    /// True when built as a single full-duration pyramid.
    pub pseudo: bool,
}

impl VideoLayout {
    /// Pyramids in sequence order; index 0 is the image pyramid (may be
    /// empty), followed by the clips.
    pub fn pyramid(&self, index: usize) -> &ScaleSchedule {
        if index == 0 {
            &self.image_pyramid
        } else {
            &self.clip_pyramids[index - 1]
        }
    }

    /// Number of pyramids with at least one scale.
    pub fn pyramid_count(&self) -> usize {
        let image = usize::from(!self.image_pyramid.tuples.is_empty());
        image + self.clip_pyramids.len()
    }

    /// Scale tuple backing a flat block.
    pub fn block_tuple(&self, block: &FlatBlock) -> &ScaleTuple {
        &self.pyramid(block.pyramid).tuples[block.scale]
    }

    /// Total tokens across all blocks.
    pub fn token_count(&self) -> usize {
        self.flat_blocks.iter().map(|b| b.tokens).sum()
    }

    fn push_blocks(&mut self, pyramid: usize) {
        let mut offset = self.flat_blocks.last().map(|b| b.offset + b.tokens).unwrap_or(0);
        for (scale, tuple) in self.pyramid(pyramid).tuples.clone().iter().enumerate() {
            let tokens = tuple.tokens();
            self.flat_blocks.push(FlatBlock { pyramid, scale, offset, tokens });
            offset += tokens;
        }
    }

    /// Assembles a layout directly from schedules, rebuilding the flat block
    /// order. Used to derive reduced layouts (e.g. with dropped scales).
    pub fn from_schedules(
        image_pyramid: ScaleSchedule,
        clip_pyramids: Vec<ScaleSchedule>,
        t_latent: usize,
        pseudo: bool,
    ) -> Self {
        let n_clips = clip_pyramids.len();
        let mut layout = Self {
            image_pyramid,
            clip_pyramids,
            flat_blocks: Vec::new(),
            t_latent,
            pseudo,
        };
        for pyramid in 0..=n_clips {
            layout.push_blocks(pyramid);
        }
        layout
    }
}

/// Builds the spacetime layout: image pyramid at `t = 1`, then `n_clips`
/// clip pyramids at `t = t_latent` with leading-group repetition.
pub fn build_layout(config: &ScheduleConfig) -> Result<VideoLayout, ScheduleError> {
    config.validate()?;
    let mut layout = VideoLayout {
        image_pyramid: build_schedule(config, 1, false),
        clip_pyramids: alloc::vec![build_schedule(config, config.t_latent, true); config.n_clips],
        flat_blocks: Vec::new(),
        t_latent: config.t_latent,
        pseudo: false,
    };
    for pyramid in 0..=config.n_clips {
        layout.push_blocks(pyramid);
    }
    Ok(layout)
}

/// Builds the single-pyramid baseline: one pyramid spanning the whole
/// duration, every scale at `t = t_latent`. Requires `n_clips = 1`.
pub fn pseudo_spacetime_layout(config: &ScheduleConfig) -> Result<VideoLayout, ScheduleError> {
    config.validate()?;
    if config.n_clips != 1 {
        return Err(ScheduleError::PseudoNeedsOneClip { n_clips: config.n_clips });
    }
    let mut layout = VideoLayout {
        image_pyramid: ScaleSchedule { tuples: Vec::new() },
        clip_pyramids: alloc::vec![build_schedule(config, config.t_latent, true)],
        flat_blocks: Vec::new(),
        t_latent: config.t_latent,
        pseudo: true,
    };
    layout.push_blocks(1);
    Ok(layout)
}

/// Builds a layout holding a single clip pyramid and no image pyramid, used
/// when a clip is generated against condition tokens instead of history.
pub fn clip_only_layout(config: &ScheduleConfig) -> Result<VideoLayout, ScheduleError> {
    config.validate()?;
    let mut layout = VideoLayout {
        image_pyramid: ScaleSchedule { tuples: Vec::new() },
        clip_pyramids: alloc::vec![build_schedule(config, config.t_latent, true)],
        flat_blocks: Vec::new(),
        t_latent: config.t_latent,
        pseudo: false,
    };
    layout.push_blocks(1);
    Ok(layout)
}

/// Per-pyramid and total token counts for a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCounts {
    /// One entry per pyramid, image first (absent when the layout has no
    /// image pyramid).
    pub per_pyramid: Vec<usize>,
    pub total: usize,
}

/// Counts tokens per pyramid and in total.
pub fn token_counts(layout: &VideoLayout) -> TokenCounts {
    let mut per_pyramid = Vec::new();
    if !layout.image_pyramid.tuples.is_empty() {
        per_pyramid.push(layout.image_pyramid.token_count());
    }
    for clip in &layout.clip_pyramids {
        per_pyramid.push(clip.token_count());
    }
    let total = per_pyramid.iter().sum();
    TokenCounts { per_pyramid, total }
}

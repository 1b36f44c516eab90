//! Block-sparse attention masks and 4-component rotary position embeddings.
//!
//! Tokens are generated block-by-block, so visibility is decided at block
//! granularity: a condition prefix is globally visible, and each variant
//! chooses which earlier blocks a query block may read. The sparse variant
//! keeps full block-causal visibility inside a pyramid but lets a clip see
//! only one trailing scale block of the pyramid before it, which is what
//! makes long multi-clip rollouts cheap: everything else in the history can
//! be evicted from the KV cache.

use alloc::vec::Vec;
use num_traits::Float;

use crate::schedule::VideoLayout;

/// Errors raised by mask construction and rotary application.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttentionError {
    #[error("sparse depth {depth} must be in 1..={len} for a preceding pyramid")]
    DepthRange { depth: usize, len: usize },
    #[error("head dim {dim} must be divisible by 8 (four components, rotary pairs)")]
    HeadDimAlignment { dim: usize },
    #[error("layout has no blocks")]
    EmptyLayout,
}

/// Which history a query block may attend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskVariant {
    /// Blocks at or before the query's block, across the whole sequence;
    /// the query's own block is fully visible.
    VarFull,
    /// Strictly earlier blocks of the query's own pyramid only.
    PrecedingOnly,
    /// Block-causal within the own pyramid, plus exactly the `depth`-th
    /// largest (i.e. `depth`-th from last) scale block of the immediately
    /// preceding pyramid.
    Ssa { depth: usize },
    /// Alias of `VarFull`: the full-history block-causal baseline.
    FullHistory,
}

/// One query block: its token span and the key intervals it may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBlock {
    /// Query tokens `[start, end)` in absolute sequence coordinates.
    pub span: (usize, usize),
    /// Allowed key intervals, disjoint and ascending, absolute coordinates.
    pub keys: Vec<(usize, usize)>,
}

/// A block-interval attention mask over `n_cond` prefix tokens plus the
/// layout's content blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n_tokens: usize,
    pub n_cond: usize,
    pub variant: MaskVariant,
    pub blocks: Vec<MaskBlock>,
}

/// Merges sorted-by-construction intervals, dropping empties and joining
/// overlapping or adjacent spans.
fn merge_intervals(mut intervals: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    intervals.retain(|&(s, e)| e > s);
    intervals.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(intervals.len());
    for (s, e) in intervals {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

/// Builds the attention mask for a layout under the chosen variant.
/// Condition tokens are visible to every query; condition queries see only
/// the condition prefix.
pub fn build_mask(
    layout: &VideoLayout,
    n_cond: usize,
    variant: MaskVariant,
) -> Result<AttentionMask, AttentionError> {
    if layout.flat_blocks.is_empty() {
        return Err(AttentionError::EmptyLayout);
    }
    // Token span of every block, shifted past the condition prefix.
    let spans: Vec<(usize, usize)> = layout
        .flat_blocks
        .iter()
        .map(|b| (n_cond + b.offset, n_cond + b.offset + b.tokens))
        .collect();
    let n_tokens = n_cond + layout.token_count();
    // Blocks of each pyramid, in flat order (pyramid ids are ascending).
    let mut pyramid_blocks: Vec<(usize, Vec<usize>)> = Vec::new();
    for (index, block) in layout.flat_blocks.iter().enumerate() {
        match pyramid_blocks.last_mut() {
            Some((pyramid, members)) if *pyramid == block.pyramid => members.push(index),
            _ => pyramid_blocks.push((block.pyramid, alloc::vec![index])),
        }
    }
    if let MaskVariant::Ssa { depth } = variant {
        for pair in pyramid_blocks.windows(2) {
            let len = pair[0].1.len();
            if depth == 0 || depth > len {
                return Err(AttentionError::DepthRange { depth, len });
            }
        }
        if depth == 0 {
            return Err(AttentionError::DepthRange { depth, len: 0 });
        }
    }

    let mut blocks = Vec::with_capacity(spans.len());
    for (group_index, (_, members)) in pyramid_blocks.iter().enumerate() {
        let pyramid_start = spans[members[0]].0;
        for &b in members {
            let mut keys = alloc::vec![(0, n_cond)];
            match variant {
                MaskVariant::VarFull | MaskVariant::FullHistory => {
                    keys.push((n_cond, spans[b].1));
                }
                MaskVariant::PrecedingOnly => {
                    keys.push((pyramid_start, spans[b].0));
                }
                MaskVariant::Ssa { depth } => {
                    if group_index > 0 {
                        let previous = &pyramid_blocks[group_index - 1].1;
                        let kept = previous[previous.len() - depth];
                        keys.push(spans[kept]);
                    }
                    keys.push((pyramid_start, spans[b].1));
                }
            }
            blocks.push(MaskBlock { span: spans[b], keys: merge_intervals(keys) });
        }
    }
    Ok(AttentionMask { n_tokens, n_cond, variant, blocks })
}

impl AttentionMask {
    /// Whether query token `q` may attend key token `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        if q < self.n_cond {
            return k < self.n_cond;
        }
        let block = match self.blocks.iter().find(|b| q >= b.span.0 && q < b.span.1) {
            Some(b) => b,
            None => return false,
        };
        block.keys.iter().any(|&(s, e)| k >= s && k < e)
    }

    /// Exact count of allowed query-key pairs.
    pub fn allowed_pairs(&self) -> usize {
        let mut pairs = self.n_cond * self.n_cond;
        for block in &self.blocks {
            let queries = block.span.1 - block.span.0;
            let keys: usize = block.keys.iter().map(|&(s, e)| e - s).sum();
            pairs += queries * keys;
        }
        pairs
    }

    /// Allowed fraction of the full `n_tokens x n_tokens` square.
    pub fn density(&self) -> f64 {
        if self.n_tokens == 0 {
            return 0.0;
        }
        self.allowed_pairs() as f64 / (self.n_tokens * self.n_tokens) as f64
    }
}

/// Pair count plus density, the mask's cost summary.
pub fn mask_density(mask: &AttentionMask) -> (usize, f64) {
    (mask.allowed_pairs(), mask.density())
}

/// KV-cache residency while generating block-by-block under a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCacheProfile {
    /// Cached key tokens at each generation step (one step per block),
    /// counting the condition prefix and every earlier block some present
    /// or future query still attends.
    pub resident: Vec<usize>,
    /// Maximum of `resident`.
    pub peak: usize,
}

/// Derives the cache profile from the mask alone: a block stays resident
/// until the last step whose key intervals still touch it.
pub fn kv_cache_profile(mask: &AttentionMask) -> KvCacheProfile {
    let n = mask.blocks.len();
    let mut last_needed = alloc::vec![0usize; n];
    for (step, block) in mask.blocks.iter().enumerate() {
        for (j, candidate) in mask.blocks.iter().enumerate().take(step + 1) {
            let touched = block
                .keys
                .iter()
                .any(|&(s, e)| s < candidate.span.1 && candidate.span.0 < e);
            if touched {
                last_needed[j] = last_needed[j].max(step);
            }
        }
    }
    let mut resident = Vec::with_capacity(n);
    let mut peak = 0usize;
    for step in 0..n {
        let mut cached = mask.n_cond;
        for (&last, block) in last_needed.iter().zip(&mask.blocks).take(step + 1) {
            if last >= step {
                cached += block.span.1 - block.span.0;
            }
        }
        peak = peak.max(cached);
        resident.push(cached);
    }
    KvCacheProfile { resident, peak }
}

/// Per-token rotary ids: one (scale, t, h, w) quadruple per sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RopeIds {
    pub scale: Vec<u32>,
    pub t: Vec<u32>,
    pub h: Vec<u32>,
    pub w: Vec<u32>,
}

impl RopeIds {
    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    /// The quadruple for token `index`.
    pub fn at(&self, index: usize) -> [u32; 4] {
        [self.scale[index], self.t[index], self.h[index], self.w[index]]
    }
}

/// Assigns rotary ids for a layout: condition tokens share the reserved
/// all-zero quadruple; content blocks count scales from 1; image-pyramid
/// tokens keep t = 0 while clip `c` frame `f` gets `(c-1)*T + f + 1`; h and
/// w are the position within the block grid.
pub fn rope_ids(layout: &VideoLayout, n_cond: usize) -> RopeIds {
    let n = n_cond + layout.token_count();
    let mut ids = RopeIds {
        scale: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        h: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
    };
    for _ in 0..n_cond {
        ids.scale.push(0);
        ids.t.push(0);
        ids.h.push(0);
        ids.w.push(0);
    }
    for (index, block) in layout.flat_blocks.iter().enumerate() {
        let tuple = layout.block_tuple(block);
        let scale_id = (index + 1) as u32;
        for f in 0..tuple.t {
            let t_id = if block.pyramid == 0 {
                0
            } else {
                ((block.pyramid - 1) * layout.t_latent + f + 1) as u32
            };
            for y in 0..tuple.h {
                for x in 0..tuple.w {
                    ids.scale.push(scale_id);
                    ids.t.push(t_id);
                    ids.h.push(y as u32);
                    ids.w.push(x as u32);
                }
            }
        }
    }
    ids
}

/// Rotates one head vector in place by its (scale, t, h, w) ids.
///
/// The head dim splits into four equal contiguous partitions, one per
/// component; within a partition, adjacent pairs rotate by `id / base^(2i/P)`
/// where `P` is the partition size. All-zero ids are the identity.
pub fn apply_rope<T: Float>(
    x: &mut [T],
    ids: [u32; 4],
    bases: [f64; 4],
) -> Result<(), AttentionError> {
    rotate(x, ids, bases, 1.0)
}

/// Undoes `apply_rope` (rotation by the negated angles); used to pull
/// gradients back through the rotary transform.
pub fn apply_rope_inverse<T: Float>(
    x: &mut [T],
    ids: [u32; 4],
    bases: [f64; 4],
) -> Result<(), AttentionError> {
    rotate(x, ids, bases, -1.0)
}

fn rotate<T: Float>(
    x: &mut [T],
    ids: [u32; 4],
    bases: [f64; 4],
    sign: f64,
) -> Result<(), AttentionError> {
    let dim = x.len();
    if !dim.is_multiple_of(8) {
        return Err(AttentionError::HeadDimAlignment { dim });
    }
    let part = dim / 4;
    for (component, chunk) in x.chunks_mut(part).enumerate() {
        let id = ids[component] as f64 * sign;
        let base = bases[component];
        for i in 0..part / 2 {
            let inv_freq = base.powf(-(2.0 * i as f64) / part as f64);
            let angle = id * inv_freq;
            let (sin, cos) = angle.sin_cos();
            let (sin, cos) = (T::from(sin).unwrap(), T::from(cos).unwrap());
            let a = chunk[2 * i];
            let b = chunk[2 * i + 1];
            chunk[2 * i] = a * cos - b * sin;
            chunk[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Default rotary frequency base for all four components.
pub const ROPE_BASE: f64 = 10000.0;

/// Convenience: the same base for scale, t, h, and w.
pub fn uniform_bases(base: f64) -> [f64; 4] {
    [base; 4]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_layout, ScheduleConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Image-only layout with block sizes [1, 4, 9].
    fn one_pyramid() -> VideoLayout {
        build_layout(&ScheduleConfig {
            ladder: vec![(1, 1), (2, 2), (3, 3)],
            t_latent: 1,
            n_clips: 0,
            k_s: 0,
            reps: 1,
            small_bits: 4,
            large_bits: 4,
            small_bits_area_threshold: 0,
        })
        .unwrap()
    }

    /// Two pyramids, block sizes [1, 4, 9] each.
    fn two_pyramids() -> VideoLayout {
        build_layout(&ScheduleConfig {
            ladder: vec![(1, 1), (2, 2), (3, 3)],
            t_latent: 1,
            n_clips: 1,
            k_s: 0,
            reps: 1,
            small_bits: 4,
            large_bits: 4,
            small_bits_area_threshold: 0,
        })
        .unwrap()
    }

    /// Brute-force visibility re-derived from the variant prose, with no
    /// intervals: the oracle the interval construction must match.
    struct Oracle {
        n_cond: usize,
        /// Per content token: (global block, pyramid id).
        tokens: Vec<(usize, usize)>,
        /// Per pyramid in flat order: its global block indices.
        pyramids: Vec<(usize, Vec<usize>)>,
    }

    impl Oracle {
        fn new(layout: &VideoLayout, n_cond: usize) -> Self {
            let mut tokens = Vec::new();
            let mut pyramids: Vec<(usize, Vec<usize>)> = Vec::new();
            for (index, block) in layout.flat_blocks.iter().enumerate() {
                for _ in 0..block.tokens {
                    tokens.push((index, block.pyramid));
                }
                match pyramids.last_mut() {
                    Some((p, members)) if *p == block.pyramid => members.push(index),
                    _ => pyramids.push((block.pyramid, vec![index])),
                }
            }
            Self { n_cond, tokens, pyramids }
        }

        fn allows(&self, variant: MaskVariant, q: usize, k: usize) -> bool {
            if q < self.n_cond {
                return k < self.n_cond;
            }
            if k < self.n_cond {
                return true;
            }
            let (qb, qp) = self.tokens[q - self.n_cond];
            let (kb, kp) = self.tokens[k - self.n_cond];
            match variant {
                MaskVariant::VarFull | MaskVariant::FullHistory => kb <= qb,
                MaskVariant::PrecedingOnly => kp == qp && kb < qb,
                MaskVariant::Ssa { depth } => {
                    if kp == qp {
                        kb <= qb
                    } else {
                        let q_group =
                            self.pyramids.iter().position(|(p, _)| *p == qp).unwrap();
                        if q_group == 0 || self.pyramids[q_group - 1].0 != kp {
                            return false;
                        }
                        let previous = &self.pyramids[q_group - 1].1;
                        kb == previous[previous.len() - depth]
                    }
                }
            }
        }
    }

    fn assert_matches_oracle(layout: &VideoLayout, n_cond: usize, variant: MaskVariant) {
        let mask = build_mask(layout, n_cond, variant).unwrap();
        let oracle = Oracle::new(layout, n_cond);
        let mut pairs = 0usize;
        for q in 0..mask.n_tokens {
            for k in 0..mask.n_tokens {
                let expected = oracle.allows(variant, q, k);
                assert_eq!(
                    mask.allows(q, k),
                    expected,
                    "variant {variant:?} q={q} k={k} n_cond={n_cond}"
                );
                pairs += usize::from(expected);
            }
        }
        assert_eq!(mask.allowed_pairs(), pairs);
    }

    #[test]
    fn var_full_single_pyramid_counts() {
        let mask = build_mask(&one_pyramid(), 0, MaskVariant::VarFull).unwrap();
        assert_eq!(mask.n_tokens, 14);
        assert_eq!(mask.allowed_pairs(), 147);
        assert!((mask.density() - 147.0 / 196.0).abs() < 1e-15);
        assert_matches_oracle(&one_pyramid(), 0, MaskVariant::VarFull);
    }

    #[test]
    fn preceding_only_single_pyramid_counts() {
        let mask = build_mask(&one_pyramid(), 0, MaskVariant::PrecedingOnly).unwrap();
        assert_eq!(mask.allowed_pairs(), 49);
        assert_matches_oracle(&one_pyramid(), 0, MaskVariant::PrecedingOnly);
    }

    #[test]
    fn sparse_two_pyramid_counts() {
        let layout = two_pyramids();
        let sparse = build_mask(&layout, 0, MaskVariant::Ssa { depth: 1 }).unwrap();
        let full = build_mask(&layout, 0, MaskVariant::FullHistory).unwrap();
        assert_eq!(sparse.n_tokens, 28);
        assert_eq!(sparse.allowed_pairs(), 420);
        assert_eq!(full.allowed_pairs(), 490);
        assert_matches_oracle(&layout, 0, MaskVariant::Ssa { depth: 1 });
        assert_matches_oracle(&layout, 0, MaskVariant::FullHistory);
    }

    #[test]
    fn all_variants_match_oracle_with_condition_prefix() {
        for layout in [one_pyramid(), two_pyramids()] {
            for n_cond in [0, 3] {
                for variant in [
                    MaskVariant::VarFull,
                    MaskVariant::PrecedingOnly,
                    MaskVariant::Ssa { depth: 1 },
                    MaskVariant::Ssa { depth: 3 },
                    MaskVariant::FullHistory,
                ] {
                    assert_matches_oracle(&layout, n_cond, variant);
                }
            }
        }
    }

    #[test]
    fn toy_layout_matches_oracle() {
        // The default schedule: 1210 tokens over 3 pyramids, checked
        // exhaustively against the brute-force oracle.
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        for variant in
            [MaskVariant::VarFull, MaskVariant::Ssa { depth: 1 }, MaskVariant::Ssa { depth: 6 }]
        {
            assert_matches_oracle(&layout, 4, variant);
        }
    }

    #[test]
    fn sparse_is_subset_of_full_history() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let sparse = build_mask(&layout, 2, MaskVariant::Ssa { depth: 1 }).unwrap();
        let full = build_mask(&layout, 2, MaskVariant::FullHistory).unwrap();
        for q in 0..sparse.n_tokens {
            for k in 0..sparse.n_tokens {
                if sparse.allows(q, k) {
                    assert!(full.allows(q, k), "sparse allows ({q},{k}) but full does not");
                }
            }
        }
    }

    #[test]
    fn no_variant_sees_a_later_block() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let oracle = Oracle::new(&layout, 1);
        for variant in [
            MaskVariant::VarFull,
            MaskVariant::PrecedingOnly,
            MaskVariant::Ssa { depth: 2 },
        ] {
            let mask = build_mask(&layout, 1, variant).unwrap();
            for q in 1..mask.n_tokens {
                for k in 1..mask.n_tokens {
                    if mask.allows(q, k) {
                        let (qb, _) = oracle.tokens[q - 1];
                        let (kb, _) = oracle.tokens[k - 1];
                        assert!(kb <= qb, "{variant:?} allows later block {kb} from {qb}");
                    }
                }
            }
        }
    }

    #[test]
    fn every_row_reaches_the_condition_prefix() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        for variant in [
            MaskVariant::VarFull,
            MaskVariant::PrecedingOnly,
            MaskVariant::Ssa { depth: 1 },
        ] {
            let mask = build_mask(&layout, 1, variant).unwrap();
            for q in 0..mask.n_tokens {
                assert!(mask.allows(q, 0), "{variant:?} row {q} misses the prefix");
            }
        }
    }

    #[test]
    fn sparse_pair_count_shrinks_with_depth() {
        // Trailing toy-ladder blocks grow toward the end, so deeper (further
        // from the end) kept blocks are smaller and the mask gets sparser.
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let pairs = |depth: usize| {
            build_mask(&layout, 0, MaskVariant::Ssa { depth }).unwrap().allowed_pairs()
        };
        assert!(pairs(6) <= pairs(3));
        assert!(pairs(3) <= pairs(1));
        assert!(pairs(1) < build_mask(&layout, 0, MaskVariant::FullHistory)
            .unwrap()
            .allowed_pairs());
    }

    #[test]
    fn sparse_depth_out_of_range_is_rejected() {
        let layout = two_pyramids();
        assert!(matches!(
            build_mask(&layout, 0, MaskVariant::Ssa { depth: 4 }),
            Err(AttentionError::DepthRange { depth: 4, len: 3 })
        ));
        assert!(matches!(
            build_mask(&layout, 0, MaskVariant::Ssa { depth: 0 }),
            Err(AttentionError::DepthRange { depth: 0, .. })
        ));
    }

    #[test]
    fn sparse_cache_peak_beats_full_history() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let full = kv_cache_profile(&build_mask(&layout, 4, MaskVariant::FullHistory).unwrap());
        let sparse =
            kv_cache_profile(&build_mask(&layout, 4, MaskVariant::Ssa { depth: 1 }).unwrap());
        // Full history can never evict: the final step caches everything.
        assert_eq!(full.peak, 4 + layout.token_count());
        assert_eq!(full.resident.last().copied(), Some(full.peak));
        assert!(
            sparse.peak < full.peak,
            "sparse peak {} should beat full {}",
            sparse.peak,
            full.peak
        );
    }

    #[test]
    fn two_pyramid_cache_profile_values() {
        // Blocks [1,4,9]+[1,4,9], sparse depth 1: after the first pyramid
        // finishes, only its 9-token last block stays resident.
        let layout = two_pyramids();
        let profile =
            kv_cache_profile(&build_mask(&layout, 0, MaskVariant::Ssa { depth: 1 }).unwrap());
        assert_eq!(profile.resident, vec![1, 5, 14, 10, 14, 23]);
        assert_eq!(profile.peak, 23);
    }

    #[test]
    fn image_pyramid_tokens_keep_time_zero() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let ids = rope_ids(&layout, 2);
        let image_tokens: usize = layout.image_pyramid.token_count();
        for i in 0..2 + image_tokens {
            assert_eq!(ids.t[i], 0, "token {i}");
        }
        // First content token: scale 1, anchor frame, origin cell.
        assert_eq!(ids.at(2), [1, 0, 0, 0]);
        // Condition tokens share the reserved zero quadruple.
        assert_eq!(ids.at(0), [0, 0, 0, 0]);
    }

    #[test]
    fn clip_time_ids_count_absolute_frames() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let ids = rope_ids(&layout, 0);
        // Clip 2, local frame 3, T = 4: t_id = (2-1)*4 + 3 + 1 = 8.
        let clip2_first_block = layout
            .flat_blocks
            .iter()
            .position(|b| b.pyramid == 2)
            .unwrap();
        let block = &layout.flat_blocks[clip2_first_block];
        let tuple = layout.block_tuple(block);
        let frame3 = block.offset + 3 * tuple.h * tuple.w;
        assert_eq!(ids.t[frame3], 8);
        // Maximum t over the whole sequence: clip 2, frame 3.
        assert_eq!(ids.t.iter().copied().max(), Some(8));
    }

    #[test]
    fn scale_ids_strictly_increase_across_blocks() {
        // Repetition passes are distinct blocks, so their ids stay distinct.
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let ids = rope_ids(&layout, 3);
        let mut seen = Vec::new();
        let mut cursor = 3;
        for block in &layout.flat_blocks {
            seen.push(ids.scale[cursor]);
            // Constant within the block.
            for offset in 0..block.tokens {
                assert_eq!(ids.scale[cursor + offset], seen[seen.len() - 1]);
            }
            cursor += block.tokens;
        }
        for pair in seen.windows(2) {
            assert!(pair[0] < pair[1]);
        }
        assert_eq!(seen[0], 1);
    }

    #[test]
    fn grid_ids_stay_inside_each_block() {
        let layout = build_layout(&ScheduleConfig::default()).unwrap();
        let ids = rope_ids(&layout, 0);
        let mut cursor = 0;
        for block in &layout.flat_blocks {
            let tuple = layout.block_tuple(block);
            for _ in 0..block.tokens {
                assert!((ids.h[cursor] as usize) < tuple.h);
                assert!((ids.w[cursor] as usize) < tuple.w);
                cursor += 1;
            }
        }
    }

    #[test]
    fn zero_ids_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut x: Vec<f64> = (0..32).map(|_| rng.random::<f64>() - 0.5).collect();
        let before = x.clone();
        apply_rope(&mut x, [0; 4], uniform_bases(ROPE_BASE)).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let mut x: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let ids = [
                rng.random_range(0..500u32),
                rng.random_range(0..500u32),
                rng.random_range(0..64u32),
                rng.random_range(0..64u32),
            ];
            let norm_before = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            apply_rope(&mut x, ids, uniform_bases(ROPE_BASE)).unwrap();
            let norm_after = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm_before - norm_after).abs() <= 1e-12);
        }
    }

    #[test]
    fn inner_products_depend_only_on_id_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let bases = uniform_bases(ROPE_BASE);
        for _ in 0..100 {
            let q: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let k: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let i: [u32; 4] = core::array::from_fn(|_| rng.random_range(0..100));
            let j: [u32; 4] = core::array::from_fn(|_| rng.random_range(0..100));
            let dot = |ids_q: [u32; 4], ids_k: [u32; 4]| {
                let mut qr = q.clone();
                let mut kr = k.clone();
                apply_rope(&mut qr, ids_q, bases).unwrap();
                apply_rope(&mut kr, ids_k, bases).unwrap();
                qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f64>()
            };
            let reference = dot(i, j);
            // Shift every component, then each component alone.
            for component in 0..5 {
                let delta: u32 = rng.random_range(0..50);
                let mut si = i;
                let mut sj = j;
                if component == 4 {
                    for c in 0..4 {
                        si[c] += delta;
                        sj[c] += delta;
                    }
                } else {
                    si[component] += delta;
                    sj[component] += delta;
                }
                assert!((dot(si, sj) - reference).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn inverse_rotation_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let original: Vec<f64> = (0..24).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let ids: [u32; 4] = core::array::from_fn(|_| rng.random_range(0..200));
            let mut x = original.clone();
            apply_rope(&mut x, ids, uniform_bases(ROPE_BASE)).unwrap();
            apply_rope_inverse(&mut x, ids, uniform_bases(ROPE_BASE)).unwrap();
            for (a, b) in x.iter().zip(&original) {
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn misaligned_head_dim_is_rejected() {
        let mut x = vec![0.0f64; 12];
        assert!(matches!(
            apply_rope(&mut x, [1; 4], uniform_bases(ROPE_BASE)),
            Err(AttentionError::HeadDimAlignment { dim: 12 })
        ));
    }
}

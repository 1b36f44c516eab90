//! The acceptance suite: eleven oracle- and property-based checks covering
//! quantization, self-correction, attention masks, rotary embeddings,
//! gradients, training, prefix consistency, interactive compression, and
//! bit-exact reproducibility. Every tolerance is pinned here as a constant.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stpyr_core::attention::{
    apply_rope, build_mask, kv_cache_profile, mask_density, rope_ids, uniform_bases, MaskVariant,
};
use stpyr_core::bsq::{Quantizer, SqdMask};
use stpyr_core::codec::{self, SqdPlan};
use stpyr_core::interact::build_condition;
use stpyr_core::model::{assemble, generate, gradient_check, ForwardPass, Model, TokenStream};
use stpyr_core::schedule::{
    build_layout, clip_only_layout, pseudo_spacetime_layout, ScheduleConfig, VideoLayout,
};
use stpyr_core::volume::{resize_spatial, LatentVolume, ResizeMode};

use crate::commands::{demo_layout, run_training, sqd_study, RunContext, TrainSpec};
use crate::config::{variant_name, Settings};
use crate::formats;
use crate::metric_row;
use crate::metrics::MetricsWriter;
use crate::pipeline::{
    self, caption_to_tokens, full_codes_to_istk, io_err, labels_to_video, make_quantizer,
    PipelineError,
};

/// Nearest-codeword oracle must finish under this many seconds.
pub const BSQ_ORACLE_SECONDS: f64 = 10.0;
/// Vectors checked per bitwidth by the nearest-codeword oracle.
pub const BSQ_ORACLE_VECTORS: usize = 1000;
/// Volumes checked by the self-correction degeneracy test.
pub const BSC_DEGENERACY_VOLUMES: usize = 50;
/// Rotary norm preservation tolerance (relative).
pub const ROPE_NORM_TOL: f64 = 1e-12;
/// Rotary relative-shift invariance tolerance (relative).
pub const ROPE_SHIFT_TOL: f64 = 1e-10;
/// Gradient check: max relative error bound and budget.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_SAMPLES: usize = 200;
pub const GRADCHECK_SECONDS: f64 = 120.0;
/// Training smoke: clean-eval BCE bound, overfit accuracy bound, budget.
pub const TRAIN_BCE_MAX: f64 = 0.45;
pub const OVERFIT_ACCURACY_MIN: f64 = 0.99;
pub const TRAIN_SECONDS: f64 = 1200.0;
/// Learning rate for the single-sample memorization run.
pub const OVERFIT_LR: f64 = 5e-3;
/// Interactive condition budget as a fraction of the full clip.
pub const CONDITION_RATIO_MAX: f64 = 0.6;

/// Outcome of one acceptance criterion.
pub struct CriterionResult {
    pub index: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    /// The one-line pass/fail report for this criterion.
    pub fn line(&self) -> String {
        format!(
            "[{:2}/11] {}  {} ({:.1}s): {}",
            self.index,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// All criterion outcomes of one acceptance run.
pub struct AcceptanceReport {
    pub results: Vec<CriterionResult>,
}

impl AcceptanceReport {
    /// True when every criterion passed.
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

type CriterionOutcome = Result<(bool, String), PipelineError>;

/// A named acceptance check, deferred so failures are caught one by one.
type Check<'a> = (&'static str, Box<dyn FnOnce() -> CriterionOutcome + 'a>);

/// Runs the full acceptance suite, printing one line per criterion and
/// writing artifacts plus a JSON report under `out`.
pub fn run_acceptance(ctx: &RunContext) -> Result<AcceptanceReport, PipelineError> {
    std::fs::create_dir_all(&ctx.out).map_err(|e| io_err(&ctx.out, e))?;
    let settings = &ctx.settings;
    let seed = ctx.seed;
    let checks: Vec<Check<'_>> = vec![
        ("bsq-nearest-codeword", Box::new(move || bsq_nearest_codeword(seed))),
        ("self-correction", Box::new(move || self_correction(settings, seed))),
        ("mask-oracles", Box::new(mask_oracles)),
        ("ssa-efficiency", Box::new(move || ssa_efficiency(settings))),
        ("rope-properties", Box::new(move || rope_properties(settings, seed))),
        ("gradient-check", Box::new(move || gradient_check_toy(seed))),
        ("training-smoke", Box::new(move || training_smoke(ctx))),
        ("sqd-prefix-quality", Box::new(move || sqd_prefix_quality(ctx))),
        ("prefix-consistency", Box::new(move || prefix_consistency(ctx))),
        ("interactive-compression", Box::new(move || interactive_compression(settings))),
        ("artifact-reproducibility", Box::new(move || artifact_reproducibility(ctx))),
    ];

    let mut report = MetricsWriter::create(&ctx.out.join("accept_report.jsonl"), &ctx.cfg)
        .map_err(|e| io_err(&ctx.out, e))?;
    let mut results = Vec::new();
    for (index, (name, check)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(outcome) => outcome,
            Err(error) => (false, format!("errored: {error}")),
        };
        let result = CriterionResult {
            index: index + 1,
            name,
            pass,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        println!("{}", result.line());
        report
            .row(metric_row! {
                "experiment": "accept",
                "criterion": result.index,
                "name": result.name,
                "pass": result.pass,
                "seconds": result.seconds,
                "detail": result.detail,
            })
            .map_err(|e| io_err(&ctx.out, e))?;
        results.push(result);
    }
    report.finish().map_err(|e| io_err(&ctx.out, e))?;
    Ok(AcceptanceReport { results })
}

/// Uniform random volume in [-1, 1]; values are almost surely nonzero, so
/// sign ties cannot occur.
fn uniform_volume(
    channels: usize,
    t: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> LatentVolume {
    let mut volume = LatentVolume::zeros(channels, t, h, w);
    for c in 0..channels {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    volume.set(c, ti, y, x, rng.random::<f64>() * 2.0 - 1.0);
                }
            }
        }
    }
    volume
}

/// Feature-volume dims `(t, h, w)` per non-empty pyramid, in layout order.
fn pyramid_feature_dims(layout: &VideoLayout) -> Vec<(usize, usize, usize)> {
    let mut dims = Vec::new();
    for p in 0..=layout.clip_pyramids.len() {
        let schedule = layout.pyramid(p);
        if let (Some(first), Some((h, w))) = (schedule.tuples.first(), schedule.largest()) {
            dims.push((first.t, h, w));
        }
    }
    dims
}

/// Random feature volumes matching a layout's pyramids.
fn random_features(
    layout: &VideoLayout,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LatentVolume> {
    pyramid_feature_dims(layout)
        .into_iter()
        .map(|(t, h, w)| uniform_volume(channels, t, h, w, rng))
        .collect()
}

// ------------------------------------------------ 1: BSQ codeword oracle --

/// Sign quantization must equal exhaustive nearest-codeword search.
fn bsq_nearest_codeword(seed: u64) -> CriterionOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x627371);
    let mut total = 0usize;
    let mut mismatches = 0usize;
    for b in [2usize, 4, 8] {
        let quantizer = Quantizer::identity(b);
        let volume = uniform_volume(b, 1, 1, BSQ_ORACLE_VECTORS, &mut rng);
        let (codes, dequant) = quantizer.quantize_block(&volume, b as u32)?;
        let amplitude = 1.0 / (b as f64).sqrt();
        for pos in 0..BSQ_ORACLE_VECTORS {
            let x: Vec<f64> = (0..b).map(|c| volume.get(c, 0, 0, pos)).collect();
            // Exhaustive search over all 2^b sign codewords on the sphere.
            let mut best_word = 0u64;
            let mut best_dot = f64::NEG_INFINITY;
            for word in 0..(1u64 << b) {
                let dot: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if word >> i & 1 == 1 { amplitude * v } else { -amplitude * v })
                    .sum();
                if dot > best_dot {
                    best_dot = dot;
                    best_word = word;
                }
            }
            let mut got = 0u64;
            for i in 0..b {
                if codes.get_bit(pos, i as u32) {
                    got |= 1 << i;
                }
            }
            total += 1;
            let mut ok = got == best_word;
            for i in 0..b {
                let expected = if best_word >> i & 1 == 1 { amplitude } else { -amplitude };
                ok &= dequant.get(i, 0, 0, pos) == expected;
            }
            if !ok {
                mismatches += 1;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && seconds < BSQ_ORACLE_SECONDS;
    Ok((
        pass,
        format!(
            "{total} vectors over bitwidths 2/4/8, {mismatches} mismatches, {seconds:.2}s < {BSQ_ORACLE_SECONDS}s"
        ),
    ))
}

// ------------------------------------- 2: self-correction encode checks --

/// Degeneracy at flip probability zero plus label soundness when bits flip.
fn self_correction(settings: &Settings, seed: u64) -> CriterionOutcome {
    let layout = build_layout(&settings.schedule)?;
    let channels = settings.model.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x627363);
    let quantizer = make_quantizer(settings, seed);
    let plan = SqdPlan::all(&layout);

    // Degeneracy: zero flips must reproduce the plain per-pyramid encode.
    let mut degenerate = 0usize;
    for _ in 0..BSC_DEGENERACY_VOLUMES {
        let features = random_features(&layout, channels, &mut rng);
        let out = codec::encode_with_bsc(&quantizer, &features, &layout, &plan, 0.0, &mut rng)?;
        let mut plain = Vec::new();
        for (p, volume) in features.iter().enumerate() {
            let schedule = layout.pyramid(p);
            let mask = SqdMask::all(schedule.tuples.len());
            plain.extend(quantizer.encode_pyramid(volume, schedule, &mask)?);
        }
        if out.labels == plain && out.flipped == plain {
            degenerate += 1;
        }
    }

    // Soundness: every label must quantize the residual left by the
    // *flipped* prefix, and every input must be that corrupted
    // reconstruction resized for the next block.
    let mut sound_blocks = 0usize;
    let mut unsound_blocks = 0usize;
    for flip_p in [0.1, 0.5, 1.0] {
        let features = random_features(&layout, channels, &mut rng);
        let out =
            codec::encode_with_bsc(&quantizer, &features, &layout, &plan, flip_p, &mut rng)?;
        // Dims each block's input must take: the next retained block's,
        // with a fresh clip's first scale as the continuation.
        let dims = pyramid_feature_dims(&layout);
        let mut block_dims: Vec<(usize, usize, usize)> = Vec::new();
        for p in 0..dims.len() {
            for tuple in &layout.pyramid(p).tuples {
                block_dims.push((tuple.t, tuple.h, tuple.w));
            }
        }
        let continuation = layout
            .clip_pyramids
            .first()
            .filter(|s| !s.tuples.is_empty())
            .unwrap_or(&layout.image_pyramid)
            .tuples
            .first()
            .map(|tuple| (tuple.t, tuple.h, tuple.w))
            .expect("layout has blocks");
        block_dims.push(continuation);

        let mut index = 0usize;
        for (p, volume) in features.iter().enumerate() {
            let (t, h, w) = dims[p];
            let mut corrupted = LatentVolume::zeros(channels, t, h, w);
            for tuple in &layout.pyramid(p).tuples {
                let residual = volume.sub(&corrupted)?;
                let coarse = resize_spatial(&residual, tuple.h, tuple.w, ResizeMode::Bilinear)?;
                let (expected_label, _) = quantizer.quantize_block(&coarse, tuple.bitwidth)?;
                let dequant = quantizer.dequantize_block(&out.flipped[index])?;
                let fine = resize_spatial(&dequant, h, w, ResizeMode::Bilinear)?;
                corrupted.add_assign(&fine)?;
                let (nt, nh, nw) = block_dims[index + 1];
                let mut expected_input =
                    resize_spatial(&corrupted, nh, nw, ResizeMode::Bilinear)?;
                if expected_input.t() != nt {
                    expected_input = expected_input.broadcast_frames(nt)?;
                }
                if out.labels[index] == expected_label && out.inputs[index] == expected_input {
                    sound_blocks += 1;
                } else {
                    unsound_blocks += 1;
                }
                index += 1;
            }
        }
    }

    let pass = degenerate == BSC_DEGENERACY_VOLUMES && unsound_blocks == 0;
    Ok((
        pass,
        format!(
            "degenerate {degenerate}/{BSC_DEGENERACY_VOLUMES} at flip 0; \
             {sound_blocks} blocks sound, {unsound_blocks} unsound at flips 0.1/0.5/1.0"
        ),
    ))
}

// ------------------------------------------------ 3: mask pair oracles --

/// Per-token metadata: pyramid index and block position within it.
fn token_pyramids(layout: &VideoLayout) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut meta = Vec::new();
    let mut blocks_per_pyramid: Vec<usize> = Vec::new();
    let mut current = usize::MAX;
    let mut block_in_pyramid = 0usize;
    for block in &layout.flat_blocks {
        if block.pyramid != current {
            current = block.pyramid;
            block_in_pyramid = 0;
            blocks_per_pyramid.push(0);
        }
        let pyramid_seq = blocks_per_pyramid.len() - 1;
        *blocks_per_pyramid.last_mut().expect("pushed") += 1;
        for _ in 0..block.tokens {
            meta.push((pyramid_seq, block_in_pyramid));
        }
        block_in_pyramid += 1;
    }
    (meta, blocks_per_pyramid)
}

/// Independent allow/deny rule for one query-key pair.
fn oracle_allows(
    meta: &[(usize, usize)],
    blocks_per_pyramid: &[usize],
    variant: MaskVariant,
    q: usize,
    k: usize,
) -> bool {
    let (qp, qb) = meta[q];
    let (kp, kb) = meta[k];
    match variant {
        MaskVariant::VarFull | MaskVariant::FullHistory => {
            (kp, kb) <= (qp, qb)
        }
        MaskVariant::PrecedingOnly => kp == qp && kb < qb,
        MaskVariant::Ssa { depth } => {
            if kp == qp {
                kb <= qb
            } else if qp > 0 && kp == qp - 1 {
                kb == blocks_per_pyramid[kp] - depth
            } else {
                false
            }
        }
    }
}

/// Interval-built masks must equal exhaustive per-pair oracles with the
/// three closed-form pair counts on the 1/4/9-token demo layouts.
fn mask_oracles() -> CriterionOutcome {
    let cases: [(VideoLayout, MaskVariant, usize); 3] = [
        (demo_layout(0), MaskVariant::VarFull, 147),
        (demo_layout(0), MaskVariant::PrecedingOnly, 49),
        (demo_layout(1), MaskVariant::Ssa { depth: 1 }, 420),
    ];
    let mut detail = Vec::new();
    let mut pass = true;
    for (layout, variant, expected) in cases {
        let mask = build_mask(&layout, 0, variant)?;
        let (meta, blocks_per_pyramid) = token_pyramids(&layout);
        let n = layout.token_count();
        let mut pairs = 0usize;
        let mut disagreements = 0usize;
        for q in 0..n {
            for k in 0..n {
                let want = oracle_allows(&meta, &blocks_per_pyramid, variant, q, k);
                if mask.allows(q, k) != want {
                    disagreements += 1;
                }
                if want {
                    pairs += 1;
                }
            }
        }
        let (mask_pairs, _) = mask_density(&mask);
        let ok = disagreements == 0 && pairs == expected && mask_pairs == expected;
        pass &= ok;
        detail.push(format!(
            "{}: {mask_pairs} pairs (oracle {pairs}, expected {expected}), {disagreements} disagreements",
            variant_name(variant)
        ));
    }
    Ok((pass, detail.join("; ")))
}

// -------------------------------------------------- 4: SSA efficiency --

/// A toy-ladder prefix with the image pyramid plus one clip pyramid.
fn two_pyramid_prefix(len: usize) -> ScheduleConfig {
    let toy = ScheduleConfig::default();
    ScheduleConfig {
        ladder: toy.ladder[..len].to_vec(),
        n_clips: 1,
        k_s: toy.k_s.min(len),
        ..toy
    }
}

/// Sparse attention must beat full history in pairs and peak KV, and pair
/// counts must shrink as the selected trailing block moves to coarser
/// (smaller) scales.
fn ssa_efficiency(settings: &Settings) -> CriterionOutcome {
    let mut detail = Vec::new();
    let mut pass = true;
    // Every nontrivial two-pyramid toy layout. (With a single-scale ladder
    // the sparse and full masks coincide, so prefixes start at length 2.)
    for len in 2..=ScheduleConfig::default().ladder.len() {
        let layout = build_layout(&two_pyramid_prefix(len))?;
        let sparse = build_mask(&layout, 0, MaskVariant::Ssa { depth: 1 })?;
        let full = build_mask(&layout, 0, MaskVariant::FullHistory)?;
        let (sparse_pairs, _) = mask_density(&sparse);
        let (full_pairs, _) = mask_density(&full);
        let sparse_peak = kv_cache_profile(&sparse).peak;
        let full_peak = kv_cache_profile(&full).peak;
        let ok = sparse_pairs < full_pairs && sparse_peak < full_peak;
        pass &= ok;
        if !ok {
            detail.push(format!(
                "ladder length {len}: pairs {sparse_pairs} vs {full_pairs}, peak {sparse_peak} vs {full_peak}"
            ));
        }
    }
    if pass {
        detail.push(String::from("pairs and peak KV strictly below full history on ladder prefixes 2..6"));
    }

    // Deeper selections point at coarser trailing blocks, so pair counts
    // must not grow as the depth increases.
    let layout = build_layout(&settings.schedule)?;
    let pairs_at = |depth: usize| -> Result<usize, PipelineError> {
        Ok(mask_density(&build_mask(&layout, 0, MaskVariant::Ssa { depth })?).0)
    };
    let (p1, p3, p6) = (pairs_at(1)?, pairs_at(3)?, pairs_at(6)?);
    let ordered = p6 <= p3 && p3 <= p1;
    pass &= ordered;
    let (full_pairs, _) = mask_density(&build_mask(&layout, 0, MaskVariant::FullHistory)?);
    detail.push(format!(
        "configured layout pairs: depth 6/3/1 = {p6}/{p3}/{p1} (ordered: {ordered}), \
         depth-1/full ratio {:.3}",
        p1 as f64 / full_pairs as f64
    ));
    Ok((pass, detail.join("; ")))
}

// ------------------------------------------------- 5: rotary properties --

/// Norm preservation, relative-shift invariance, and zero temporal ids on
/// image-pyramid tokens, across every layout shape the suite generates.
fn rope_properties(settings: &Settings, seed: u64) -> CriterionOutcome {
    let toy = &settings.schedule;
    let layouts: Vec<(&str, VideoLayout)> = vec![
        ("configured", build_layout(toy)?),
        ("clip-only", clip_only_layout(toy)?),
        (
            "continuation",
            build_layout(&ScheduleConfig { n_clips: settings.cont.n_clips, ..toy.clone() })?,
        ),
        (
            "pseudo-spacetime",
            pseudo_spacetime_layout(&ScheduleConfig { n_clips: 1, ..toy.clone() })?,
        ),
        ("demo", demo_layout(1)),
    ];
    let bases = settings.model.rope_bases;
    let dim = settings.model.head_dim.max(8) / 8 * 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x726f70);
    let mut max_norm_err = 0.0f64;
    let mut max_shift_err = 0.0f64;
    let mut image_t_violations = 0usize;
    let mut checked = 0usize;
    for (_, layout) in &layouts {
        for n_cond in [0usize, 5] {
            let ids = rope_ids(layout, n_cond);
            let n = n_cond + layout.token_count();
            // Image-pyramid tokens (and condition tokens) carry t id zero.
            let image_tokens: usize =
                layout.flat_blocks.iter().filter(|b| b.pyramid == 0).map(|b| b.tokens).sum();
            for i in 0..n_cond + image_tokens {
                if ids.t[i] != 0 {
                    image_t_violations += 1;
                }
            }
            // Sampled positions: norm preservation and shift invariance.
            for _ in 0..24 {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let k: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

                let mut qr = q.clone();
                apply_rope(&mut qr, ids.at(i), bases)?;
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let err = (norm(&qr) - norm(&q)).abs() / norm(&q).max(1.0);
                max_norm_err = max_norm_err.max(err);

                let mut kr = k.clone();
                apply_rope(&mut kr, ids.at(j), bases)?;
                let dot = |a: &[f64], b: &[f64]| -> f64 {
                    a.iter().zip(b).map(|(x, y)| x * y).sum()
                };
                let reference = dot(&qr, &kr);
                for component in 0..4 {
                    let delta = rng.random_range(1..9u32);
                    let shift = |mut ids: [u32; 4]| {
                        ids[component] += delta;
                        ids
                    };
                    let mut qs = q.clone();
                    let mut ks = k.clone();
                    apply_rope(&mut qs, shift(ids.at(i)), bases)?;
                    apply_rope(&mut ks, shift(ids.at(j)), bases)?;
                    let err = (dot(&qs, &ks) - reference).abs() / reference.abs().max(1.0);
                    max_shift_err = max_shift_err.max(err);
                }
                checked += 1;
            }
        }
    }
    let pass =
        max_norm_err <= ROPE_NORM_TOL && max_shift_err <= ROPE_SHIFT_TOL && image_t_violations == 0;
    Ok((
        pass,
        format!(
            "{} layouts, {checked} sampled rotations: norm err {max_norm_err:.2e} <= {ROPE_NORM_TOL:.0e}, \
             shift err {max_shift_err:.2e} <= {ROPE_SHIFT_TOL:.0e}, image t-id violations {image_t_violations}",
            layouts.len()
        ),
    ))
}

// --------------------------------------------------- 6: gradient check --

/// Analytic gradients of the full training loss vs central differences on
/// a two-layer model, in 64-bit mode.
fn gradient_check_toy(seed: u64) -> CriterionOutcome {
    let start = Instant::now();
    let schedule = ScheduleConfig {
        ladder: vec![(1, 1), (2, 2)],
        t_latent: 2,
        n_clips: 1,
        k_s: 2,
        reps: 2,
        small_bits: 4,
        large_bits: 4,
        small_bits_area_threshold: 0,
    };
    let layout = build_layout(&schedule)?;
    let config = stpyr_core::model::ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 8,
        mlp_ratio: 2,
        channels: 4,
        bitwidths: vec![4],
        text_vocab: 12,
        text_len: 4,
        rope_bases: uniform_bases(10000.0),
        lr: 1e-3,
        init_std: 0.02,
    };
    let mut model: Model<f64> = Model::init(config, seed)?;
    let quantizer = Quantizer::identity(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x676368);
    let features = random_features(&layout, 4, &mut rng);
    let out = codec::encode_with_bsc(
        &quantizer,
        &features,
        &layout,
        &SqdPlan::all(&layout),
        0.25,
        &mut rng,
    )?;
    let stream: TokenStream<f64> =
        assemble(&[1, 2, 3, 0], &[], &out, &layout, 4, MaskVariant::VarFull)?;
    let report = gradient_check(&mut model, &stream, GRADCHECK_SAMPLES, 1e-5, seed)?;
    let seconds = start.elapsed().as_secs_f64();
    let pass = report.max_rel_error < GRADCHECK_TOL
        && report.checked >= GRADCHECK_SAMPLES
        && seconds < GRADCHECK_SECONDS;
    Ok((
        pass,
        format!(
            "max relative error {:.2e} < {GRADCHECK_TOL:.0e} over {} of {} parameters, {seconds:.1}s < {GRADCHECK_SECONDS}s",
            report.max_rel_error, report.checked, report.n_params
        ),
    ))
}

// --------------------------------------------------- 7: training smoke --

/// Loss must fall well below chance on the synthetic set, and a single
/// sample must be memorized quickly.
fn training_smoke(ctx: &RunContext) -> CriterionOutcome {
    let start = Instant::now();
    let settings = &ctx.settings;
    let mut metrics = MetricsWriter::create(&ctx.out.join("train_metrics.jsonl"), &ctx.cfg)
        .map_err(|e| io_err(&ctx.out, e))?;
    let spec = TrainSpec::from_settings(settings, settings.train.variant);
    let outcome = run_training(settings, &spec, ctx.seed, Some(&mut metrics))?;

    let overfit_spec = TrainSpec {
        steps: settings.train.overfit_steps,
        videos: 1,
        flip_p: 0.0,
        lr_override: Some(OVERFIT_LR),
        ..spec
    };
    let overfit = run_training(settings, &overfit_spec, ctx.seed ^ 0x6f76, Some(&mut metrics))?;
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;

    let checkpoint = pipeline::to_checkpoint(&ctx.cfg, &outcome.model, &outcome.quantizer);
    formats::write_file(&ctx.out.join("model.isck"), &formats::encode_isck(&checkpoint))?;

    let seconds = start.elapsed().as_secs_f64();
    let pass = outcome.eval_loss < TRAIN_BCE_MAX
        && overfit.eval_accuracy > OVERFIT_ACCURACY_MIN
        && seconds < TRAIN_SECONDS;
    Ok((
        pass,
        format!(
            "{} steps on {} videos: eval BCE {:.4} < {TRAIN_BCE_MAX}; overfit accuracy {:.4} > {OVERFIT_ACCURACY_MIN} after {} steps; {seconds:.0}s < {TRAIN_SECONDS}s",
            spec.steps, spec.videos, outcome.eval_loss, overfit.eval_accuracy, overfit_spec.steps
        ),
    ))
}

// ----------------------------------------------- 8: SQD prefix quality --

/// Scale dropout must strictly improve held-out prefix reconstructions over
/// the first half of the scales.
fn sqd_prefix_quality(ctx: &RunContext) -> CriterionOutcome {
    let mut metrics = MetricsWriter::create(&ctx.out.join("sqd_metrics.jsonl"), &ctx.cfg)
        .map_err(|e| io_err(&ctx.out, e))?;
    let study = sqd_study(&ctx.settings, ctx.seed, Some(&mut metrics))?;
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    let pass = study.first_half_sqd > study.first_half_plain;
    Ok((
        pass,
        format!(
            "held-out first-half prefix PSNR: dropout {:.3} dB vs baseline {:.3} dB (per-scale dropout {:?} vs {:?})",
            study.first_half_sqd,
            study.first_half_plain,
            study.prefix_psnr_sqd.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
            study.prefix_psnr_plain.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
        ),
    ))
}

// ------------------------------------------- 9: prefix consistency + I2V --

/// Per-block logits of a teacher-forced stream, flattened tokens x bits.
fn teacher_block_logits<'a>(
    pass: &'a ForwardPass<f64>,
    stream: &TokenStream<f64>,
    block: usize,
) -> &'a [f64] {
    let (s, e) = stream.blocks[block].span;
    let first = s - stream.n_cond;
    let last = e - stream.n_cond;
    &pass.logits[pass.logit_offsets[first]..pass.logit_offsets[last]]
}

/// History-conditioned generation must reproduce teacher-forced logits
/// bit-for-bit, and four-clip extrapolation must decode cleanly.
fn prefix_consistency(ctx: &RunContext) -> CriterionOutcome {
    let settings = &ctx.settings;
    let layout = build_layout(&settings.schedule)?;
    let model: Model<f64> = pipeline::init_model(&settings.model, ctx.seed)?;
    let quantizer = make_quantizer(settings, ctx.seed);
    let samples = pipeline::synthesize_samples(settings, &layout, 1, ctx.seed)?;
    let sample = &samples[0];
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x706678);
    let out = codec::encode_with_bsc(
        &quantizer,
        &sample.features,
        &layout,
        &SqdPlan::all(&layout),
        0.0,
        &mut rng,
    )?;
    let variant = settings.train.variant;
    let stream: TokenStream<f64> = assemble(
        &sample.caption,
        &[],
        &out,
        &layout,
        settings.model.channels,
        variant,
    )?;
    let teacher = model.forward(&stream)?;

    // Teacher-force the image pyramid plus the first clip.
    let n_prefix = layout.flat_blocks.iter().filter(|b| b.pyramid <= 1).count();
    let generated = generate(
        &model,
        &quantizer,
        &layout,
        &sample.caption,
        &[],
        &out.labels[..n_prefix],
        settings.generate.temperature,
        variant,
        &mut rng,
    )?;
    let mut exact_blocks = 0usize;
    let mut mismatched = 0usize;
    for b in 0..n_prefix {
        if teacher_block_logits(&teacher, &stream, b) == generated.logits[b].as_slice() {
            exact_blocks += 1;
        } else {
            mismatched += 1;
        }
    }
    let passthrough = generated.labels[..n_prefix] == out.labels[..n_prefix];

    // Extrapolation: continue the full two-clip encoding out to four clips.
    let long_layout = build_layout(&ScheduleConfig {
        n_clips: settings.cont.n_clips,
        ..settings.schedule.clone()
    })?;
    let extended = generate(
        &model,
        &quantizer,
        &long_layout,
        &sample.caption,
        &[],
        &out.labels,
        settings.generate.temperature,
        variant,
        &mut rng,
    )?;
    let (latent, video) = labels_to_video(&quantizer, &extended.labels, &long_layout, settings)?;
    let finite = latent.is_finite();
    let istk = full_codes_to_istk(&long_layout, &extended.labels);
    formats::write_file(&ctx.out.join("continued.istk"), &formats::encode_istk(&istk))?;
    formats::write_file(&ctx.out.join("continued.isrv"), &formats::encode_isrv(&video))?;

    let pass = mismatched == 0 && exact_blocks == n_prefix && passthrough && finite;
    Ok((
        pass,
        format!(
            "{exact_blocks}/{n_prefix} prefix blocks with bit-exact logits ({mismatched} mismatched), \
             labels pass through: {passthrough}; {} extrapolated blocks decode to {} finite frames",
            extended.labels.len() - out.labels.len(),
            video.frames
        ),
    ))
}

// -------------------------------------------- 10: interactive compression --

/// The semantic/detail/anchor condition must undercut the full clip by the
/// pinned ratio, with token counts matching the closed-form schedule math.
fn interactive_compression(settings: &Settings) -> CriterionOutcome {
    let layout = build_layout(&settings.schedule)?;
    let clip = layout
        .clip_pyramids
        .first()
        .ok_or_else(|| PipelineError::Other(String::from("no clip pyramid configured")))?;
    let (h, w) = clip.largest().expect("clip has scales");
    let t = layout.t_latent;
    let mut rng = ChaCha8Rng::seed_from_u64(0x636f_6d70);
    let f_prev = uniform_volume(settings.model.channels, t, h, w, &mut rng);
    let anchor = uniform_volume(settings.model.channels, 1, h, w, &mut rng);
    let cond = build_condition(&f_prev, &anchor, settings.interact.k, settings.interact.stride)?;

    let down = |len: usize| ((len as f64 / settings.interact.stride).ceil() as usize).max(1);
    let expected_sem = t * down(h) * down(w);
    let expected_det = settings.interact.k * h * w;
    let expected_anchor = h * w;
    let full_clip = clip.token_count();
    let ratio = cond.total_tokens() as f64 / full_clip as f64;
    let counts_match = cond.sem_tokens == expected_sem
        && cond.det_tokens == expected_det
        && cond.anchor_tokens == expected_anchor;
    let pass = counts_match && ratio < CONDITION_RATIO_MAX && cond.compressed;
    Ok((
        pass,
        format!(
            "sem {} + det {} + anchor {} = {} tokens vs {} full-clip ({:.3} < {CONDITION_RATIO_MAX})",
            cond.sem_tokens,
            cond.det_tokens,
            cond.anchor_tokens,
            cond.total_tokens(),
            full_clip,
            ratio
        ),
    ))
}

// --------------------------------------- 11: artifact reproducibility --

/// One miniature pipeline pass: tokenize, train briefly, checkpoint, and
/// generate, returning every ISTK/ISCK artifact by name.
fn determinism_pass(
    ctx: &RunContext,
    dir: &Path,
) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let settings = &ctx.settings;
    let layout = build_layout(&settings.schedule)?;
    let quantizer = make_quantizer(settings, ctx.seed);
    let samples = pipeline::synthesize_samples(settings, &layout, 3, ctx.seed)?;
    let mut artifacts = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x746f6b);
    let plan = SqdPlan::all(&layout);
    for (i, sample) in samples.iter().enumerate() {
        let out = codec::encode_with_bsc(
            &quantizer,
            &sample.features,
            &layout,
            &plan,
            settings.train.flip_p,
            &mut rng,
        )?;
        let bytes = formats::encode_istk(&full_codes_to_istk(&layout, &out.labels));
        let name = format!("tokens_{i:04}.istk");
        formats::write_file(&dir.join(&name), &bytes)?;
        artifacts.push((name, bytes));
    }

    let spec = TrainSpec {
        steps: 30,
        batch: settings.train.batch,
        videos: 3,
        flip_p: settings.train.flip_p,
        conditions: false,
        variant: settings.train.variant,
        log_every: 0,
        lr_override: None,
    };
    let outcome = run_training(settings, &spec, ctx.seed, None)?;
    let ckpt_bytes =
        formats::encode_isck(&pipeline::to_checkpoint(&ctx.cfg, &outcome.model, &outcome.quantizer));
    formats::write_file(&dir.join("model.isck"), &ckpt_bytes)?;
    artifacts.push((String::from("model.isck"), ckpt_bytes.clone()));

    // Generate through the written checkpoint so the load path is covered.
    let decoded = formats::decode_isck(&ckpt_bytes)?;
    let (_, _, model, loaded_quantizer) = pipeline::from_checkpoint(&decoded)?;
    let text = caption_to_tokens(&settings.generate.caption)?;
    let mut gen_rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x67656e);
    let generated = generate(
        &model,
        &loaded_quantizer,
        &layout,
        &text,
        &[],
        &[],
        settings.generate.temperature,
        settings.train.variant,
        &mut gen_rng,
    )?;
    let bytes = formats::encode_istk(&full_codes_to_istk(&layout, &generated.labels));
    formats::write_file(&dir.join("sample.istk"), &bytes)?;
    artifacts.push((String::from("sample.istk"), bytes));
    Ok(artifacts)
}

/// Two identically seeded pipeline passes must produce byte-identical
/// token and checkpoint files.
fn artifact_reproducibility(ctx: &RunContext) -> CriterionOutcome {
    let first = determinism_pass(ctx, &ctx.out.join("rep1"))?;
    let second = determinism_pass(ctx, &ctx.out.join("rep2"))?;
    let mut identical = 0usize;
    let mut differing = Vec::new();
    for ((name_a, bytes_a), (name_b, bytes_b)) in first.iter().zip(&second) {
        if name_a == name_b && bytes_a == bytes_b {
            identical += 1;
        } else {
            differing.push(name_a.clone());
        }
    }
    let pass = differing.is_empty() && first.len() == second.len() && !first.is_empty();
    Ok((
        pass,
        format!(
            "{identical}/{} artifacts byte-identical across reruns{}",
            first.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", differing.join(", "))
            }
        ),
    ))
}

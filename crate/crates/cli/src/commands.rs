//! Subcommand drivers. Each validates its settings, runs fully
//! deterministically under the given seed, and emits JSON-lines metrics
//! stamped with the config hash.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stpyr_core::attention::{build_mask, kv_cache_profile, mask_density, MaskVariant};
use stpyr_core::bsq::train::AdapterTrainer;
use stpyr_core::bsq::{Quantizer, SqdMask};
use stpyr_core::codec::{self, SqdPlan};
use stpyr_core::interact::{build_condition, interactive_generate, plan_chunks};
use stpyr_core::model::{generate, stream_loss, Model, Trainer};
use stpyr_core::schedule::{build_layout, clip_only_layout, token_counts, ScheduleConfig};
use stpyr_core::volume::{psnr, LatentVolume};

use crate::config::{variant_name, Config, Settings};
use crate::formats::{self, IsckFile};
use crate::metric_row;
use crate::metrics::MetricsWriter;
use crate::pipeline::{
    self, caption_to_tokens, dataset, encode_stream, full_codes_to_istk, io_err, labels_to_video,
    make_quantizer, PipelineError, Sample,
};

/// Latent features live in [-1, 1], so PSNR uses a peak of 2.
pub const LATENT_PEAK: f64 = 2.0;

/// Everything a command invocation carries.
pub struct RunContext {
    pub cfg: Config,
    pub settings: Settings,
    pub seed: u64,
    pub out: PathBuf,
    pub variant_override: Option<MaskVariant>,
}

impl RunContext {
    /// The attention variant in effect: the `--variant` flag, else config.
    pub fn variant(&self) -> MaskVariant {
        self.variant_override.unwrap_or(self.settings.train.variant)
    }

    fn create_out(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))
    }

    fn metrics(&self, name: &str) -> Result<MetricsWriter, PipelineError> {
        let path = self.out.join(name);
        MetricsWriter::create(&path, &self.cfg).map_err(|e| io_err(&path, e))
    }
}

// ------------------------------------------------------------------ synth --

/// Renders the synthetic dataset to ISRV files plus a caption list.
pub fn cmd_synth(ctx: &RunContext) -> Result<(), PipelineError> {
    let layout = build_layout(&ctx.settings.schedule)?;
    let samples =
        pipeline::synthesize_samples(&ctx.settings, &layout, ctx.settings.data.count, ctx.seed)?;
    ctx.create_out()?;
    let mut metrics = ctx.metrics("metrics.jsonl")?;
    let mut captions = String::new();
    for (index, sample) in samples.iter().enumerate() {
        let path = ctx.out.join(format!("video_{index:04}.isrv"));
        let bytes = formats::encode_isrv(&sample.video);
        formats::write_file(&path, &bytes)?;
        let caption = stpyr_core::synth::caption_text(&sample.spec);
        captions.push_str(&caption);
        captions.push('\n');
        metrics
            .row(metric_row! {
                "experiment": "synth",
                "video": index,
                "caption": caption,
                "frames": sample.video.frames,
                "bytes": bytes.len(),
            })
            .map_err(|e| io_err(&path, e))?;
    }
    let captions_path = ctx.out.join("captions.txt");
    std::fs::write(&captions_path, captions).map_err(|e| io_err(&captions_path, e))?;
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!("wrote {} videos to {}", samples.len(), ctx.out.display());
    Ok(())
}

// --------------------------------------------------------------- tokenize --

/// Encodes the dataset into token files and reports reconstruction quality.
pub fn cmd_tokenize(ctx: &RunContext) -> Result<(), PipelineError> {
    let layout = build_layout(&ctx.settings.schedule)?;
    let quantizer = make_quantizer(&ctx.settings, ctx.seed);
    let samples = dataset(&ctx.settings, &layout, ctx.settings.data.count, ctx.seed)?;
    ctx.create_out()?;
    let mut metrics = ctx.metrics("metrics.jsonl")?;
    let plan = SqdPlan::all(&layout);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    for (index, sample) in samples.iter().enumerate() {
        let out =
            codec::encode_with_bsc(&quantizer, &sample.features, &layout, &plan, 0.0, &mut rng)?;
        let istk = full_codes_to_istk(&layout, &out.labels);
        let path = ctx.out.join(format!("tokens_{index:04}.istk"));
        formats::write_file(&path, &formats::encode_istk(&istk))?;

        let recons = codec::reconstruct(&quantizer, &out.labels, &layout, out.labels.len() - 1)?;
        let mut per_pyramid = Vec::new();
        for (recon, original) in recons.iter().zip(&sample.features) {
            per_pyramid.push(psnr(original, recon, LATENT_PEAK)?);
        }
        let mean = per_pyramid.iter().sum::<f64>() / per_pyramid.len() as f64;
        metrics
            .row(metric_row! {
                "experiment": "tokenize",
                "video": index,
                "psnr_per_pyramid": per_pyramid,
                "psnr_mean": mean,
            })
            .map_err(|e| io_err(&path, e))?;
    }

    // Training-pair dump of the first video for offline inspection, with
    // the configured self-correction noise.
    if let Some(sample) = samples.first() {
        let mut pair_rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x627363);
        let out = codec::encode_with_bsc(
            &quantizer,
            &sample.features,
            &layout,
            &plan,
            ctx.settings.train.flip_p,
            &mut pair_rng,
        )?;
        let dump = formats::IsbcFile {
            labels: full_codes_to_istk(&layout, &out.labels),
            inputs: out.inputs.clone(),
        };
        let path = ctx.out.join("pairs_0000.isbc");
        formats::write_file(&path, &formats::encode_isbc(&dump))?;
    }
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!("wrote {} token files to {}", samples.len(), ctx.out.display());
    Ok(())
}

// -------------------------------------------------------- tokenizer study --

/// Outcome of the scale-dropout tokenizer study.
pub struct SqdStudy {
    pub quantizer_sqd: Quantizer,
    pub quantizer_plain: Quantizer,
    /// Mean held-out PSNR per prefix length, dropout arm.
    pub prefix_psnr_sqd: Vec<f64>,
    /// Mean held-out PSNR per prefix length, baseline arm.
    pub prefix_psnr_plain: Vec<f64>,
    /// Means over the first half of the scales.
    pub first_half_sqd: f64,
    pub first_half_plain: f64,
}

/// Trains the channel adapters with and without stochastic scale dropout
/// and measures held-out prefix reconstruction quality per scale.
pub fn sqd_study(
    settings: &Settings,
    seed: u64,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<SqdStudy, PipelineError> {
    let layout = build_layout(&settings.schedule)?;
    let schedule = layout
        .clip_pyramids
        .first()
        .ok_or_else(|| PipelineError::Other(String::from("the study needs a clip pyramid")))?
        .clone();
    let tk = &settings.tokenizer;
    let train_samples = pipeline::synthesize_samples(settings, &layout, tk.videos, seed)?;
    let holdout_samples =
        pipeline::synthesize_samples(settings, &layout, tk.holdout, seed.wrapping_add(1))?;
    let clip_volumes = |samples: &[Sample]| -> Vec<LatentVolume> {
        samples.iter().flat_map(|s| s.features[1..].to_vec()).collect()
    };
    let train_volumes = clip_volumes(&train_samples);
    let holdout_volumes = clip_volumes(&holdout_samples);

    let n_scales = schedule.tuples.len();
    let droppable = tk.sqd_droppable.min(n_scales.saturating_sub(1));
    let mut trained: Vec<Quantizer> = Vec::new();
    for use_sqd in [true, false] {
        let mut quantizer = make_quantizer(settings, seed);
        let mut trainer = AdapterTrainer::new(&quantizer, tk.lr);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5144);
        for step in 0..tk.steps {
            let volume = &train_volumes[step % train_volumes.len()];
            let sqd = if use_sqd {
                stpyr_core::bsq::sample_sqd(&schedule, droppable, tk.sqd_p, &mut mask_rng)?
            } else {
                SqdMask::all(n_scales)
            };
            let (loss, grads) =
                stpyr_core::bsq::train::tokenizer_loss_and_grad(
                    &quantizer, volume, &schedule, &sqd, &tk.weights,
                )?;
            trainer.step(&mut quantizer, &grads);
            if let Some(writer) = metrics.as_deref_mut() {
                if step % 25 == 0 || step + 1 == tk.steps {
                    writer
                        .row(metric_row! {
                            "experiment": "tokenizer",
                            "arm": if use_sqd { "sqd" } else { "plain" },
                            "step": step,
                            "loss": loss.total,
                            "recon": loss.recon,
                            "commitment": loss.commitment,
                            "entropy_penalty": loss.entropy_penalty,
                        })
                        .map_err(|e| PipelineError::Other(e.to_string()))?;
                }
            }
        }
        trained.push(quantizer);
    }

    let prefix_curve = |quantizer: &Quantizer| -> Result<Vec<f64>, PipelineError> {
        let all = SqdMask::all(n_scales);
        let target = schedule.largest().expect("schedule has scales");
        let mut sums = vec![0.0f64; n_scales];
        for volume in &holdout_volumes {
            let codes = quantizer.encode_pyramid(volume, &schedule, &all)?;
            for k in 1..=n_scales {
                let recon = quantizer.decode_pyramid(&codes[..k], &schedule, target)?;
                sums[k - 1] += psnr(volume, &recon, LATENT_PEAK)?;
            }
        }
        Ok(sums.into_iter().map(|s| s / holdout_volumes.len() as f64).collect())
    };
    let prefix_psnr_sqd = prefix_curve(&trained[0])?;
    let prefix_psnr_plain = prefix_curve(&trained[1])?;
    let half = (n_scales / 2).max(1);
    let first_half_sqd = prefix_psnr_sqd[..half].iter().sum::<f64>() / half as f64;
    let first_half_plain = prefix_psnr_plain[..half].iter().sum::<f64>() / half as f64;

    if let Some(writer) = metrics {
        for (arm, curve) in
            [("sqd", &prefix_psnr_sqd), ("plain", &prefix_psnr_plain)]
        {
            for (k, value) in curve.iter().enumerate() {
                writer
                    .row(metric_row! {
                        "experiment": "prefix_psnr",
                        "arm": arm,
                        "prefix": k + 1,
                        "psnr": value,
                    })
                    .map_err(|e| PipelineError::Other(e.to_string()))?;
            }
        }
        writer
            .row(metric_row! {
                "experiment": "prefix_psnr_summary",
                "first_half_sqd": first_half_sqd,
                "first_half_plain": first_half_plain,
                "half_scales": half,
            })
            .map_err(|e| PipelineError::Other(e.to_string()))?;
    }

    let mut iter = trained.into_iter();
    Ok(SqdStudy {
        quantizer_sqd: iter.next().expect("two arms"),
        quantizer_plain: iter.next().expect("two arms"),
        prefix_psnr_sqd,
        prefix_psnr_plain,
        first_half_sqd,
        first_half_plain,
    })
}

/// Runs the scale-dropout study and writes adapters plus PSNR curves.
pub fn cmd_train_tokenizer(ctx: &RunContext) -> Result<(), PipelineError> {
    ctx.create_out()?;
    let mut metrics = ctx.metrics("metrics.jsonl")?;
    let study = sqd_study(&ctx.settings, ctx.seed, Some(&mut metrics))?;
    for (name, quantizer) in [
        ("adapters_sqd.isck", &study.quantizer_sqd),
        ("adapters_plain.isck", &study.quantizer_plain),
    ] {
        let file = IsckFile {
            config_text: ctx.cfg.canonical_text(),
            blobs: pipeline::adapter_blobs(quantizer),
        };
        formats::write_file(&ctx.out.join(name), &formats::encode_isck(&file))?;
    }
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!(
        "first-half prefix PSNR: dropout {:.3} dB vs baseline {:.3} dB",
        study.first_half_sqd, study.first_half_plain
    );
    Ok(())
}

// ------------------------------------------------------------ train-model --

/// What one training run should do.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub videos: usize,
    pub flip_p: f64,
    pub conditions: bool,
    pub variant: MaskVariant,
    /// Metric row cadence; 0 logs only the final step.
    pub log_every: usize,
    /// Overrides the config learning rate when set (memorization runs
    /// want a hotter optimizer than the main loop).
    pub lr_override: Option<f64>,
}

impl TrainSpec {
    /// The spec the config describes.
    pub fn from_settings(settings: &Settings, variant: MaskVariant) -> Self {
        Self {
            steps: settings.train.steps,
            batch: settings.train.batch,
            videos: settings.train.videos,
            flip_p: settings.train.flip_p,
            conditions: settings.train.conditions,
            variant,
            log_every: settings.train.log_every,
            lr_override: None,
        }
    }
}

/// A finished training run plus its clean-evaluation scores.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub quantizer: Quantizer,
    /// Mean per-bit BCE over the training set, clean labels.
    pub eval_loss: f64,
    /// Mean per-bit accuracy over the training set, clean labels.
    pub eval_accuracy: f64,
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

/// Builds the (stream, token count) pairs for one training step.
#[allow(clippy::type_complexity)]
fn condition_streams<T: num_traits::Float>(
    quantizer: &Quantizer,
    sample: &Sample,
    settings: &Settings,
    flip_p: f64,
    variant: MaskVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<stpyr_core::model::TokenStream<T>>, PipelineError> {
    // Condition training: each clip after the first is predicted from the
    // previous clip's semantic/detail condition plus the anchor frame.
    let clip_layout = clip_only_layout(&settings.schedule)?;
    let channels = settings.model.channels;
    let mut streams = Vec::new();
    for clip in 1..sample.features.len() - 1 {
        let cond = build_condition(
            &sample.features[clip],
            &sample.features[0],
            settings.interact.k,
            settings.interact.stride,
        )?;
        let features = vec![sample.features[clip + 1].clone()];
        let plan = SqdPlan::all(&clip_layout);
        let out =
            codec::encode_with_bsc(quantizer, &features, &clip_layout, &plan, flip_p, rng)?;
        let stream = stpyr_core::model::assemble(
            &sample.caption,
            &cond.as_condition_list(),
            &out,
            &clip_layout,
            channels,
            variant,
        )?;
        streams.push(stream);
    }
    Ok(streams)
}

/// Trains a transformer per the spec; deterministic given the seed.
pub fn run_training(
    settings: &Settings,
    spec: &TrainSpec,
    seed: u64,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome, PipelineError> {
    if spec.conditions && settings.schedule.n_clips < 2 {
        return Err(PipelineError::Other(String::from(
            "condition training needs at least two clips",
        )));
    }
    let layout = build_layout(&settings.schedule)?;
    let quantizer = make_quantizer(settings, seed);
    let samples = dataset(settings, &layout, spec.videos, seed)?;
    let mut model: Model<f32> = pipeline::init_model(&settings.model, seed)?;
    let mut trainer = Trainer::new(&model);
    if let Some(lr) = spec.lr_override {
        trainer.opt.lr = lr as f32;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x747261);

    let start = Instant::now();
    let mut tokens_done = 0usize;
    let mut next_sample = 0usize;
    for step in 0..spec.steps {
        let mut batch = Vec::with_capacity(spec.batch);
        while batch.len() < spec.batch {
            let sample = &samples[next_sample % samples.len()];
            next_sample += 1;
            if spec.conditions {
                batch.extend(condition_streams::<f32>(
                    &quantizer, sample, settings, spec.flip_p, spec.variant, &mut rng,
                )?);
            } else {
                let (stream, _) = encode_stream::<f32>(
                    &quantizer,
                    sample,
                    &layout,
                    &[],
                    spec.flip_p,
                    spec.variant,
                    settings.model.channels,
                    &mut rng,
                )?;
                batch.push(stream);
            }
        }
        tokens_done += batch.iter().map(|s| s.n_tokens()).sum::<usize>();
        let stats = trainer.step(&mut model, &batch)?;
        let log_now = spec.log_every > 0 && step % spec.log_every == 0;
        if log_now || step + 1 == spec.steps {
            if let Some(writer) = metrics.as_deref_mut() {
                let elapsed = start.elapsed().as_secs_f64();
                writer
                    .row(metric_row! {
                        "experiment": "train",
                        "step": step,
                        "loss": stats.loss,
                        "bit_accuracy": stats.bit_accuracy,
                        "tokens_per_sec": tokens_done as f64 / elapsed.max(1e-9),
                    })
                    .map_err(|e| PipelineError::Other(e.to_string()))?;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();

    // Clean evaluation: no flips, full layout, teacher forcing.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x657661);
    let mut loss_sum = 0.0f64;
    let mut acc_sum = 0.0f64;
    let mut bits = 0usize;
    for sample in &samples {
        let streams: Vec<stpyr_core::model::TokenStream<f32>> = if spec.conditions {
            condition_streams(&quantizer, sample, settings, 0.0, spec.variant, &mut eval_rng)?
        } else {
            let (stream, _) = encode_stream(
                &quantizer,
                sample,
                &layout,
                &[],
                0.0,
                spec.variant,
                settings.model.channels,
                &mut eval_rng,
            )?;
            vec![stream]
        };
        for stream in &streams {
            let pass = model.forward(stream)?;
            let stats = stream_loss(&pass, stream);
            loss_sum += stats.loss * stats.n_bits as f64;
            acc_sum += stats.bit_accuracy * stats.n_bits as f64;
            bits += stats.n_bits;
        }
    }
    let eval_loss = loss_sum / bits.max(1) as f64;
    let eval_accuracy = acc_sum / bits.max(1) as f64;

    if let Some(writer) = metrics {
        writer
            .row(metric_row! {
                "experiment": "train_eval",
                "loss": eval_loss,
                "bit_accuracy": eval_accuracy,
                "bits": bits,
                "seconds": seconds,
            })
            .map_err(|e| PipelineError::Other(e.to_string()))?;
    }

    Ok(TrainOutcome {
        model,
        quantizer,
        eval_loss,
        eval_accuracy,
        seconds,
        tokens_per_sec: tokens_done as f64 / seconds.max(1e-9),
    })
}

/// Trains per the config and writes the checkpoint plus metrics.
pub fn cmd_train_model(ctx: &RunContext) -> Result<(), PipelineError> {
    ctx.create_out()?;
    let mut metrics = ctx.metrics("metrics.jsonl")?;
    let spec = TrainSpec::from_settings(&ctx.settings, ctx.variant());
    let outcome = run_training(&ctx.settings, &spec, ctx.seed, Some(&mut metrics))?;
    let checkpoint = pipeline::to_checkpoint(&ctx.cfg, &outcome.model, &outcome.quantizer);
    let path = ctx.out.join("model.isck");
    formats::write_file(&path, &formats::encode_isck(&checkpoint))?;
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!(
        "trained {} steps in {:.1}s; clean eval: loss {:.4}, bit accuracy {:.4}",
        spec.steps, outcome.seconds, outcome.eval_loss, outcome.eval_accuracy
    );
    Ok(())
}

// --------------------------------------------------------------- generate --

/// Model + quantizer for sampling: the configured checkpoint, else a
/// fresh deterministic initialization.
fn sampling_model(
    ctx: &RunContext,
    checkpoint: Option<&Path>,
) -> Result<(Model<f64>, Quantizer), PipelineError> {
    match checkpoint {
        Some(path) => {
            let (_, _, model, quantizer) = pipeline::load_checkpoint(path)?;
            Ok((model, quantizer))
        }
        None => Ok((
            pipeline::init_model(&ctx.settings.model, ctx.seed)?,
            make_quantizer(&ctx.settings, ctx.seed),
        )),
    }
}

/// Samples one video from a caption and decodes it to pixels.
pub fn cmd_generate(ctx: &RunContext) -> Result<(), PipelineError> {
    let layout = build_layout(&ctx.settings.schedule)?;
    let text = caption_to_tokens(&ctx.settings.generate.caption)?;
    let (model, quantizer) = sampling_model(ctx, ctx.settings.generate.checkpoint.as_deref())?;
    ctx.create_out()?;
    let mut metrics = ctx.metrics("metrics.jsonl")?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x67656e);
    let start = Instant::now();
    let out = generate(
        &model,
        &quantizer,
        &layout,
        &text,
        &[],
        &[],
        ctx.settings.generate.temperature,
        ctx.variant(),
        &mut rng,
    )?;
    let seconds = start.elapsed().as_secs_f64();
    let istk = full_codes_to_istk(&layout, &out.labels);
    formats::write_file(&ctx.out.join("sample.istk"), &formats::encode_istk(&istk))?;
    let (latent, video) = labels_to_video(&quantizer, &out.labels, &layout, &ctx.settings)?;
    formats::write_file(&ctx.out.join("sample.isrv"), &formats::encode_isrv(&video))?;
    metrics
        .row(metric_row! {
            "experiment": "generate",
            "caption": ctx.settings.generate.caption,
            "temperature": ctx.settings.generate.temperature,
            "variant": variant_name(ctx.variant()),
            "tokens": layout.token_count(),
            "peak_cached": out.peak_cached,
            "latent_finite": latent.is_finite(),
            "seconds": seconds,
        })
        .map_err(|e| io_err(&ctx.out, e))?;
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!(
        "sampled {} tokens in {:.1}s (peak KV {} tokens) -> {}",
        layout.token_count(),
        seconds,
        out.peak_cached,
        ctx.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- continue --

/// Teacher-forces a real video prefix and extrapolates extra clips.
pub fn cmd_continue(ctx: &RunContext) -> Result<(), PipelineError> {
    let settings = &ctx.settings;
    let short_layout = build_layout(&settings.schedule)?;
    let long_config =
        ScheduleConfig { n_clips: settings.cont.n_clips, ..settings.schedule.clone() };
    let long_layout = build_layout(&long_config)?;
    let (model, quantizer) = sampling_model(ctx, settings.generate.checkpoint.as_deref())?;
    let samples = pipeline::synthesize_samples(settings, &short_layout, 1, ctx.seed)?;
    let sample = &samples[0];

    // Clean history codes for the trained-length prefix.
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let plan = SqdPlan::all(&short_layout);
    let out =
        codec::encode_with_bsc(&quantizer, &sample.features, &short_layout, &plan, 0.0, &mut rng)?;

    ctx.create_out()?;
    let mut metrics = ctx.metrics("metrics.jsonl")?;
    let mut gen_rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x636f6e);
    let generated = generate(
        &model,
        &quantizer,
        &long_layout,
        &sample.caption,
        &[],
        &out.labels,
        settings.generate.temperature,
        ctx.variant(),
        &mut gen_rng,
    )?;
    let istk = full_codes_to_istk(&long_layout, &generated.labels);
    formats::write_file(&ctx.out.join("continued.istk"), &formats::encode_istk(&istk))?;
    let (latent, video) = labels_to_video(&quantizer, &generated.labels, &long_layout, settings)?;
    formats::write_file(&ctx.out.join("continued.isrv"), &formats::encode_isrv(&video))?;
    metrics
        .row(metric_row! {
            "experiment": "continue",
            "history_blocks": out.labels.len(),
            "total_blocks": generated.labels.len(),
            "clips": settings.cont.n_clips,
            "frames": video.frames,
            "latent_finite": latent.is_finite(),
            "peak_cached": generated.peak_cached,
        })
        .map_err(|e| io_err(&ctx.out, e))?;
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!(
        "extrapolated {} -> {} clips ({} frames) -> {}",
        settings.schedule.n_clips,
        settings.cont.n_clips,
        video.frames,
        ctx.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- interact --

/// Runs a prompted multi-round session: each round generates one clip
/// conditioned on the previous clip's semantic/detail features plus the
/// anchor frame, logging a drift report.
pub fn cmd_interact(ctx: &RunContext) -> Result<(), PipelineError> {
    let settings = &ctx.settings;
    let prompts: Vec<String> = match &settings.interact.session {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        }
        None => {
            let defaults =
                ["red square moves right", "green circle moves up", "blue bar moves left", "red circle moves down"];
            (0..settings.interact.rounds)
                .map(|i| String::from(defaults[i % defaults.len()]))
                .collect()
        }
    };
    if prompts.is_empty() {
        return Err(PipelineError::Other(String::from("the session has no prompts")));
    }
    let captions: Vec<Vec<usize>> =
        prompts.iter().map(|p| caption_to_tokens(p)).collect::<Result<_, _>>()?;

    let full_layout = build_layout(&settings.schedule)?;
    let clip_layout = clip_only_layout(&settings.schedule)?;
    let clip_schedule = clip_layout.clip_pyramids[0].clone();
    let (model, quantizer) = sampling_model(ctx, settings.interact.checkpoint.as_deref())?;

    // Bootstrap clip: the tokenizer round trip of a real first clip.
    let samples = pipeline::synthesize_samples(settings, &full_layout, 1, ctx.seed)?;
    let anchor = samples[0].features[0].clone();
    let all = SqdMask::all(clip_schedule.tuples.len());
    let target = clip_schedule.largest().expect("clip schedule has scales");
    let boot_codes = quantizer.encode_pyramid(&samples[0].features[1], &clip_schedule, &all)?;
    let mut f_prev = quantizer.decode_pyramid(&boot_codes, &clip_schedule, target)?;

    let chunk_plan = plan_chunks(prompts.len() + 1, settings.interact.clip_len)?;
    ctx.create_out()?;
    let mut drift = ctx.metrics("drift.jsonl")?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x696e74);
    for (round, caption) in captions.iter().enumerate() {
        let cond = build_condition(
            &f_prev,
            &anchor,
            settings.interact.k,
            settings.interact.stride,
        )?;
        if !cond.compressed {
            eprintln!(
                "warning: round {round} condition ({} tokens) is not smaller than the clip",
                cond.total_tokens()
            );
        }
        let out = interactive_generate(
            &model,
            &quantizer,
            &clip_layout,
            caption,
            &cond,
            settings.generate.temperature,
            ctx.variant(),
            &mut rng,
        )?;
        let istk = full_codes_to_istk(&clip_layout, &out.codes);
        let path = ctx.out.join(format!("round_{round:02}.istk"));
        formats::write_file(&path, &formats::encode_istk(&istk))?;

        // Drift probe: the generated clip is the overlap shared with the
        // next chunk; compare it against its own teacher-forced
        // (re-encoded) reconstruction.
        let re_codes = quantizer.encode_pyramid(&out.features, &clip_schedule, &all)?;
        let re_recon = quantizer.decode_pyramid(&re_codes, &clip_schedule, target)?;
        let overlap_psnr = psnr(&out.features, &re_recon, LATENT_PEAK)?;
        let chunk = &chunk_plan.chunks[round.min(chunk_plan.chunks.len() - 1)];
        drift
            .row(metric_row! {
                "experiment": "interact",
                "round": round,
                "prompt": prompts[round],
                "start_time": chunk.start_time,
                "clips": [chunk.clips.0, chunk.clips.1],
                "condition_tokens": cond.total_tokens(),
                "compressed": cond.compressed,
                "prefix_tokens": out.prefix_tokens,
                "overlap_psnr": overlap_psnr,
                "finite": overlap_psnr.is_finite(),
            })
            .map_err(|e| io_err(&ctx.out, e))?;
        f_prev = out.features;
    }
    drift.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!("ran {} rounds -> {}", prompts.len(), ctx.out.display());
    Ok(())
}

// ------------------------------------------------------------------ masks --

/// Attention FLOPs of one masked pass: one multiply-accumulate per allowed
/// pair per head for scores and one for values, i.e. `4 * pairs * width`.
pub fn attention_flops(pairs: usize, width: usize) -> u64 {
    4 * pairs as u64 * width as u64
}

/// Reports mask statistics for the configured layout and the interactive
/// condition budget.
pub fn cmd_masks(ctx: &RunContext) -> Result<(), PipelineError> {
    let settings = &ctx.settings;
    let layout = build_layout(&settings.schedule)?;
    let counts = token_counts(&layout);
    ctx.create_out()?;
    let mut metrics = ctx.metrics("report.jsonl")?;
    metrics
        .row(metric_row! {
            "experiment": "layout",
            "pyramids": counts.per_pyramid,
            "tokens": counts.total,
            "blocks": layout.flat_blocks.len(),
        })
        .map_err(|e| io_err(&ctx.out, e))?;

    let mut variants = vec![
        MaskVariant::VarFull,
        MaskVariant::PrecedingOnly,
        MaskVariant::Ssa { depth: 1 },
        MaskVariant::FullHistory,
    ];
    if let Some(v) = ctx.variant_override {
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let width = settings.model.width();
    let mut baseline_pairs = None;
    for variant in variants {
        let mask = build_mask(&layout, 0, variant)?;
        let (pairs, density) = mask_density(&mask);
        let profile = kv_cache_profile(&mask);
        if variant == MaskVariant::FullHistory {
            baseline_pairs = Some(pairs);
        }
        metrics
            .row(metric_row! {
                "experiment": "mask",
                "variant": variant_name(variant),
                "tokens": mask.n_tokens,
                "pairs": pairs,
                "density": density,
                "attn_flops": attention_flops(pairs, width),
                "kv_peak": profile.peak,
                "kv_resident": profile.resident,
            })
            .map_err(|e| io_err(&ctx.out, e))?;
    }
    if let Some(full) = baseline_pairs {
        let mask = build_mask(&layout, 0, MaskVariant::Ssa { depth: 1 })?;
        let (pairs, _) = mask_density(&mask);
        metrics
            .row(metric_row! {
                "experiment": "mask_ratio",
                "ssa1_pairs": pairs,
                "full_history_pairs": full,
                "ratio": pairs as f64 / full as f64,
            })
            .map_err(|e| io_err(&ctx.out, e))?;
    }

    // The three-scale demo layouts whose pair counts have closed forms.
    for (clips, variant) in [
        (0, MaskVariant::VarFull),
        (0, MaskVariant::PrecedingOnly),
        (1, MaskVariant::Ssa { depth: 1 }),
    ] {
        let demo = demo_layout(clips);
        let mask = build_mask(&demo, 0, variant)?;
        let (got, density) = mask_density(&mask);
        metrics
            .row(metric_row! {
                "experiment": "mask_demo",
                "layout": "three-scale demo",
                "clip_pyramids": clips,
                "variant": variant_name(variant),
                "pairs": got,
                "density": density,
            })
            .map_err(|e| io_err(&ctx.out, e))?;
    }

    // Interactive condition budget, computed from dims alone.
    if let Some(clip) = layout.clip_pyramids.first() {
        let (h, w) = clip.largest().expect("clip has scales");
        let t = layout.t_latent;
        let probe = LatentVolume::zeros(1, t, h, w);
        let anchor = LatentVolume::zeros(1, 1, h, w);
        let cond = build_condition(&probe, &anchor, settings.interact.k, settings.interact.stride)?;
        let full_clip = clip.token_count();
        metrics
            .row(metric_row! {
                "experiment": "condition_budget",
                "sem_tokens": cond.sem_tokens,
                "det_tokens": cond.det_tokens,
                "anchor_tokens": cond.anchor_tokens,
                "total": cond.total_tokens(),
                "full_clip_tokens": full_clip,
                "ratio": cond.total_tokens() as f64 / full_clip as f64,
                "compressed": cond.compressed,
            })
            .map_err(|e| io_err(&ctx.out, e))?;
    }
    metrics.finish().map_err(|e| io_err(&ctx.out, e))?;
    println!("wrote mask report -> {}", ctx.out.join("report.jsonl").display());
    Ok(())
}

/// The three-scale demo layout: blocks of 1, 4, and 9 tokens per pyramid.
pub fn demo_layout(clip_pyramids: usize) -> stpyr_core::schedule::VideoLayout {
    use stpyr_core::schedule::{ScaleSchedule, ScaleTuple, VideoLayout};
    let ladder = |t: usize| -> ScaleSchedule {
        ScaleSchedule {
            tuples: (1..=3)
                .map(|s| ScaleTuple { t, h: s, w: s, bitwidth: 4, is_repeat: false })
                .collect(),
        }
    };
    let clips = vec![ladder(1); clip_pyramids];
    VideoLayout::from_schedules(ladder(1), clips, 1, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stpyr_core::synth::VOCAB;

    fn toy_context(out: &str) -> RunContext {
        let cfg = Config::default_toy();
        let settings = Settings::from_config(&cfg).unwrap();
        RunContext {
            cfg,
            settings,
            seed: 5,
            out: std::env::temp_dir().join(format!("stpyr-cmd-{}-{out}", std::process::id())),
            variant_override: None,
        }
    }

    #[test]
    fn demo_layouts_have_the_expected_blocks() {
        let single = demo_layout(0);
        assert_eq!(single.token_count(), 14);
        assert_eq!(single.flat_blocks.len(), 3);
        let double = demo_layout(1);
        assert_eq!(double.token_count(), 28);
        assert_eq!(double.flat_blocks.len(), 6);
    }

    #[test]
    fn synth_and_tokenize_write_expected_files() {
        let mut ctx = toy_context("synth");
        ctx.settings.data.count = 2;
        cmd_synth(&ctx).unwrap();
        assert!(ctx.out.join("video_0000.isrv").exists());
        assert!(ctx.out.join("video_0001.isrv").exists());
        let captions = std::fs::read_to_string(ctx.out.join("captions.txt")).unwrap();
        assert_eq!(captions.lines().count(), 2);
        for line in captions.lines() {
            caption_to_tokens(line).unwrap();
        }

        cmd_tokenize(&ctx).unwrap();
        let istk =
            formats::decode_istk(&std::fs::read(ctx.out.join("tokens_0000.istk")).unwrap())
                .unwrap();
        assert_eq!(istk.pyramids.len(), 3);
        assert_eq!(istk.flat_codes().len(), 22);
        let isbc =
            formats::decode_isbc(&std::fs::read(ctx.out.join("pairs_0000.isbc")).unwrap())
                .unwrap();
        assert_eq!(isbc.inputs.len(), 22);
        std::fs::remove_dir_all(&ctx.out).ok();
    }

    #[test]
    fn mask_report_runs_on_the_toy_config() {
        let ctx = toy_context("masks");
        cmd_masks(&ctx).unwrap();
        let text = std::fs::read_to_string(ctx.out.join("report.jsonl")).unwrap();
        let rows: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(rows.iter().any(|r| r["experiment"] == "mask_demo"));
        let budget = rows.iter().find(|r| r["experiment"] == "condition_budget").unwrap();
        assert_eq!(budget["total"], 208);
        assert_eq!(budget["full_clip_tokens"], 540);
        std::fs::remove_dir_all(&ctx.out).ok();
    }

    #[test]
    fn caption_prompts_cover_the_vocabulary() {
        for word in VOCAB {
            assert!(caption_to_tokens(word).is_ok());
        }
    }
}

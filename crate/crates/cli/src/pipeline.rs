//! Shared experiment plumbing: synthetic datasets, feature extraction,
//! stream assembly, and checkpoint conversion. Every routine is
//! deterministic given its seed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stpyr_core::bsq::{BitTensor, ChannelAdapter, Quantizer};
use stpyr_core::codec::{self, CodecOutput, SqdPlan};
use stpyr_core::model::{assemble, Model, ModelConfig, TokenStream};
use stpyr_core::attention::MaskVariant;
use stpyr_core::patch::PatchTransform;
use stpyr_core::schedule::VideoLayout;
use stpyr_core::synth::{self, RawVideo, SceneSpec, SceneTemplate, VOCAB};
use stpyr_core::volume::LatentVolume;
use num_traits::Float;

use crate::config::{Config, Settings};
use crate::formats::{self, FormatError, IsckFile, IstkFile, IstkPyramid};

/// Errors from experiment plumbing.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("{0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Patch(#[from] stpyr_core::patch::PatchError),
    #[error("{0}")]
    Codec(#[from] stpyr_core::codec::CodecError),
    #[error("{0}")]
    Bsq(#[from] stpyr_core::bsq::BsqError),
    #[error("{0}")]
    Model(#[from] stpyr_core::model::ModelError),
    #[error("{0}")]
    Volume(#[from] stpyr_core::volume::VolumeError),
    #[error("{0}")]
    Schedule(#[from] stpyr_core::schedule::ScheduleError),
    #[error("{0}")]
    Interact(#[from] stpyr_core::interact::InteractError),
    #[error("{0}")]
    Attention(#[from] stpyr_core::attention::AttentionError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown caption word {word:?}; vocabulary: {vocabulary}")]
    CaptionWord { word: String, vocabulary: String },
    #[error("checkpoint blob {name:?} {problem}")]
    Checkpoint { name: String, problem: String },
    #[error("{0}")]
    Other(String),
}

/// Wraps an IO error with its path.
pub fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

/// One synthetic training sample: scene, rendered pixels, caption tokens,
/// and per-pyramid latent features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub spec: SceneSpec,
    pub video: RawVideo,
    pub caption: Vec<usize>,
    pub features: Vec<LatentVolume>,
}

/// Deterministically synthesizes `count` scenes and extracts their
/// per-pyramid features under the layout.
pub fn synthesize_samples(
    settings: &Settings,
    layout: &VideoLayout,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>, PipelineError> {
    let template = SceneTemplate {
        width: settings.data.width,
        height: settings.data.height,
        frames: settings.data.frames,
    };
    let patch = PatchTransform::fixed(settings.patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let spec = synth::sample_scene(&template, &mut rng);
        let video = synth::render_scene(&spec);
        let caption = synth::caption_tokens(&spec);
        let latent = patch.patchify(&video)?;
        let features = codec::split_features(&latent, layout)?;
        samples.push(Sample { spec, video, caption, features });
    }
    Ok(samples)
}

/// Loads ISRV videos plus `captions.txt` from a dataset directory and
/// extracts their features (the on-disk alternative to synthesis).
pub fn load_samples(
    dir: &Path,
    settings: &Settings,
    layout: &VideoLayout,
) -> Result<Vec<Sample>, PipelineError> {
    let captions_path = dir.join("captions.txt");
    let captions_text =
        std::fs::read_to_string(&captions_path).map_err(|e| io_err(&captions_path, e))?;
    let patch = PatchTransform::fixed(settings.patch)?;
    let mut samples = Vec::new();
    for (index, line) in captions_text.lines().enumerate() {
        let path = dir.join(format!("video_{index:04}.isrv"));
        let video = formats::decode_isrv(&formats::read_file(&path)?)?;
        let caption = caption_to_tokens(line)?;
        let latent = patch.patchify(&video)?;
        let features = codec::split_features(&latent, layout)?;
        // The scene parameters are unknown for external data; store a
        // degenerate spec carrying only the geometry.
        let spec = SceneSpec {
            width: video.width,
            height: video.height,
            frames: video.frames,
            shapes: Vec::new(),
        };
        samples.push(Sample { spec, video, caption, features });
    }
    if samples.is_empty() {
        return Err(PipelineError::Other(format!(
            "dataset directory {} has no captioned videos",
            dir.display()
        )));
    }
    Ok(samples)
}

/// Synthesizes or loads the dataset per `data.dir`.
pub fn dataset(
    settings: &Settings,
    layout: &VideoLayout,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>, PipelineError> {
    match &settings.data.dir {
        Some(dir) => load_samples(dir, settings, layout),
        None => synthesize_samples(settings, layout, count, seed),
    }
}

/// Parses a caption into vocabulary token ids.
pub fn caption_to_tokens(text: &str) -> Result<Vec<usize>, PipelineError> {
    text.split_whitespace()
        .map(|word| {
            VOCAB.iter().position(|&v| v == word).ok_or_else(|| PipelineError::CaptionWord {
                word: word.to_string(),
                vocabulary: VOCAB.join(" "),
            })
        })
        .collect()
}

/// The quantizer every experiment shares: channel adapters for each
/// schedule bitwidth, deterministically initialized from the seed.
pub fn make_quantizer(settings: &Settings, seed: u64) -> Quantizer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Quantizer::with_adapters(settings.model.channels, &settings.model.bitwidths, &mut rng)
}

/// Samples a per-pyramid scale-dropout plan.
pub fn sample_sqd_plan(
    layout: &VideoLayout,
    n_droppable: usize,
    drop_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SqdPlan, PipelineError> {
    let mut per_pyramid = Vec::new();
    for index in 0..=layout.clip_pyramids.len() {
        let schedule = layout.pyramid(index);
        if schedule.tuples.is_empty() {
            continue;
        }
        let droppable = n_droppable.min(schedule.tuples.len().saturating_sub(1));
        per_pyramid.push(stpyr_core::bsq::sample_sqd(schedule, droppable, drop_p, rng)?);
    }
    Ok(SqdPlan { per_pyramid })
}

/// Encodes one sample into a token stream: self-corrected labels plus
/// assembled transformer inputs.
#[allow(clippy::too_many_arguments)]
pub fn encode_stream<T: Float>(
    quantizer: &Quantizer,
    sample: &Sample,
    layout: &VideoLayout,
    conditions: &[(usize, &LatentVolume)],
    flip_p: f64,
    variant: MaskVariant,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenStream<T>, CodecOutput), PipelineError> {
    let plan = SqdPlan::all(layout);
    let out = codec::encode_with_bsc(quantizer, &sample.features, layout, &plan, flip_p, rng)?;
    let stream = assemble(&sample.caption, conditions, &out, layout, channels, variant)?;
    Ok((stream, out))
}

// ----------------------------------------------------------- token files --

/// Packages per-block codes into the token-file structure. `retained`
/// marks the kept scales per pyramid (in sequence order); the codes must
/// already be restricted to those scales, flat across pyramids.
pub fn codes_to_istk(
    layout: &VideoLayout,
    plan: &SqdPlan,
    codes: &[BitTensor],
) -> IstkFile {
    let mut pyramids = Vec::new();
    let mut flat = codes.iter();
    let mut plan_iter = plan.per_pyramid.iter();
    for index in 0..=layout.clip_pyramids.len() {
        let schedule = layout.pyramid(index);
        if schedule.tuples.is_empty() {
            continue;
        }
        let mask = plan_iter.next().expect("plan covers every non-empty pyramid");
        let mut scales = Vec::new();
        let mut pyramid_codes = Vec::new();
        for (tuple, &retained) in schedule.tuples.iter().zip(&mask.retained) {
            scales.push((tuple.t, tuple.h, tuple.w, tuple.bitwidth, retained));
            if retained {
                pyramid_codes
                    .push(flat.next().expect("one code per retained scale").clone());
            }
        }
        pyramids.push(IstkPyramid { scales, codes: pyramid_codes });
    }
    IstkFile { pyramids }
}

/// Token file for a fully-retained encoding.
pub fn full_codes_to_istk(layout: &VideoLayout, codes: &[BitTensor]) -> IstkFile {
    codes_to_istk(layout, &SqdPlan::all(layout), codes)
}

// ----------------------------------------------------------- checkpoints --

/// Converts a model (plus the quantizer's adapters) into a checkpoint.
pub fn to_checkpoint<T: Float>(
    cfg: &Config,
    model: &Model<T>,
    quantizer: &Quantizer,
) -> IsckFile {
    let mut blobs = Vec::new();
    for spec in &model.layout.tensors {
        let values: Vec<f32> = model.params[spec.offset..spec.offset + spec.len]
            .iter()
            .map(|v| v.to_f64().expect("float widens") as f32)
            .collect();
        blobs.push((spec.name.clone(), values));
    }
    blobs.extend(adapter_blobs(quantizer));
    IsckFile { config_text: cfg.canonical_text(), blobs }
}

/// The quantizer's adapter weights as named f32 blobs.
pub fn adapter_blobs(quantizer: &Quantizer) -> Vec<(String, Vec<f32>)> {
    let mut blobs = Vec::new();
    for bits in quantizer.adapter_bitwidths() {
        let adapter = quantizer.adapter(bits).expect("listed adapter exists");
        blobs.push((
            format!("adapter.{bits}.w_in"),
            adapter.w_in.iter().map(|&v| v as f32).collect(),
        ));
        blobs.push((
            format!("adapter.{bits}.w_out"),
            adapter.w_out.iter().map(|&v| v as f32).collect(),
        ));
    }
    blobs
}

/// Rebuilds the run settings, model, and quantizer from a checkpoint.
pub fn from_checkpoint(
    file: &IsckFile,
) -> Result<(Config, Settings, Model<f64>, Quantizer), PipelineError> {
    let cfg = Config::parse(&file.config_text)?;
    let settings = Settings::from_config(&cfg)?;
    let mut model = Model::<f64>::init(settings.model.clone(), 0)?;
    let mut quantizer = make_quantizer(&settings, 0);
    for (name, values) in &file.blobs {
        if let Some(rest) = name.strip_prefix("adapter.") {
            let (bits_str, field) = rest.split_once('.').ok_or_else(|| {
                PipelineError::Checkpoint {
                    name: name.clone(),
                    problem: String::from("is not adapter.<bits>.<field>"),
                }
            })?;
            let bits: u32 = bits_str.parse().map_err(|_| PipelineError::Checkpoint {
                name: name.clone(),
                problem: String::from("has a non-numeric bitwidth"),
            })?;
            let channels = quantizer.channels();
            let adapter = match quantizer.adapter_mut(bits) {
                Some(adapter) => adapter,
                None => {
                    // An adapter the current config no longer implies;
                    // rebuild it so the checkpoint stays self-contained.
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    quantizer.insert_adapter(ChannelAdapter::init(channels, bits, &mut rng));
                    quantizer.adapter_mut(bits).expect("just inserted")
                }
            };
            let target = match field {
                "w_in" => &mut adapter.w_in,
                "w_out" => &mut adapter.w_out,
                other => {
                    return Err(PipelineError::Checkpoint {
                        name: name.clone(),
                        problem: format!("has unknown adapter field {other:?}"),
                    })
                }
            };
            if target.len() != values.len() {
                return Err(PipelineError::Checkpoint {
                    name: name.clone(),
                    problem: format!("has {} values, expected {}", values.len(), target.len()),
                });
            }
            for (slot, &value) in target.iter_mut().zip(values) {
                *slot = value as f64;
            }
        } else {
            let (offset, len) =
                model.layout.entry(name).ok_or_else(|| PipelineError::Checkpoint {
                    name: name.clone(),
                    problem: String::from("does not exist in this model configuration"),
                })?;
            if len != values.len() {
                return Err(PipelineError::Checkpoint {
                    name: name.clone(),
                    problem: format!("has {} values, expected {len}", values.len()),
                });
            }
            for (slot, &value) in model.params[offset..offset + len].iter_mut().zip(values) {
                *slot = value as f64;
            }
        }
    }
    Ok((cfg, settings, model, quantizer))
}

/// Loads a checkpoint file.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(Config, Settings, Model<f64>, Quantizer), PipelineError> {
    let file = formats::decode_isck(&formats::read_file(path)?)?;
    from_checkpoint(&file)
}

// -------------------------------------------------------------- assembly --

/// Concatenates volumes along time; all must share channels and spatial
/// dims. Used to stitch per-pyramid reconstructions into one video volume.
pub fn concat_time(volumes: &[LatentVolume]) -> Result<LatentVolume, PipelineError> {
    let first = volumes
        .first()
        .ok_or_else(|| PipelineError::Other(String::from("nothing to concatenate")))?;
    let (c, _, h, w) = first.shape();
    let total_t: usize = volumes.iter().map(|v| v.t()).sum();
    let mut out = LatentVolume::zeros(c, total_t, h, w);
    let mut t_base = 0usize;
    for volume in volumes {
        let (vc, vt, vh, vw) = volume.shape();
        if (vc, vh, vw) != (c, h, w) {
            return Err(PipelineError::Other(format!(
                "cannot concatenate {vc}x{vt}x{vh}x{vw} onto channels {c}, spatial {h}x{w}"
            )));
        }
        for ci in 0..c {
            for ti in 0..vt {
                for y in 0..h {
                    for x in 0..w {
                        out.set(ci, t_base + ti, y, x, volume.get(ci, ti, y, x));
                    }
                }
            }
        }
        t_base += vt;
    }
    Ok(out)
}

/// Decodes generated labels to pixels: per-pyramid reconstruction,
/// time-concatenation, and unpatchify.
pub fn labels_to_video(
    quantizer: &Quantizer,
    labels: &[BitTensor],
    layout: &VideoLayout,
    settings: &Settings,
) -> Result<(LatentVolume, RawVideo), PipelineError> {
    let volumes = codec::reconstruct(quantizer, labels, layout, labels.len() - 1)?;
    let latent = concat_time(&volumes)?;
    let patch = PatchTransform::fixed(settings.patch)?;
    let video = patch.unpatchify(&latent)?;
    Ok((latent, video))
}

/// Fresh model for the run: seeded init plus config echo.
pub fn init_model<T: Float>(config: &ModelConfig, seed: u64) -> Result<Model<T>, PipelineError> {
    Ok(Model::init(config.clone(), seed)?)
}

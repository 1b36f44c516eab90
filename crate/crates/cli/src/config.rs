//! Flat key-value run configuration: `key = value` lines, `#` comments,
//! section prefixes like `schedule.ladder`. Parsing and typed access carry
//! line/key diagnostics; every command validates its settings before any
//! output is written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stpyr_core::attention::{uniform_bases, MaskVariant};
use stpyr_core::bsq::train::TokenizerLossWeights;
use stpyr_core::model::ModelConfig;
use stpyr_core::patch::PatchDims;
use stpyr_core::schedule::ScheduleConfig;

/// Errors in configuration text or values.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found {found:?}")]
    Syntax { line: usize, found: String },
    #[error("line {line}: empty key")]
    EmptyKey { line: usize },
    #[error("line {line}: duplicate key {key:?} (first set on line {first})")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("line {line}: unknown key {key:?}")]
    Unknown { line: usize, key: String },
    #[error("key {key:?} (line {line}): cannot parse {value:?} as {expected}")]
    Value { key: String, line: usize, value: String, expected: &'static str },
    #[error("key {key:?} (line {line}): {reason}")]
    Invalid { key: String, line: usize, reason: String },
    #[error("invalid --variant {value:?}: expected var_full, preceding_only, ssa:M, or full_history")]
    Variant { value: String },
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// A parsed configuration file.
#[derive(Debug, Clone)]
pub struct Config {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

/// Every key a configuration file may set.
const KNOWN_KEYS: &[&str] = &[
    "schedule.ladder",
    "schedule.t_latent",
    "schedule.n_clips",
    "schedule.semantic_scales",
    "schedule.semantic_passes",
    "schedule.small_bits",
    "schedule.large_bits",
    "schedule.small_bits_area_threshold",
    "patch.t",
    "patch.h",
    "patch.w",
    "data.width",
    "data.height",
    "data.frames",
    "data.count",
    "data.dir",
    "model.layers",
    "model.heads",
    "model.head_dim",
    "model.mlp_ratio",
    "model.text_vocab",
    "model.text_len",
    "model.lr",
    "model.init_std",
    "model.rope_base",
    "train.steps",
    "train.batch",
    "train.videos",
    "train.log_every",
    "train.variant",
    "train.conditions",
    "train.overfit_steps",
    "bsc_flip_p",
    "sqd_droppable",
    "sqd_p",
    "tokenizer.steps",
    "tokenizer.lr",
    "tokenizer.videos",
    "tokenizer.holdout",
    "entropy_tau",
    "recon_weight",
    "commit_weight",
    "entropy_weight",
    "generate.temperature",
    "generate.caption",
    "generate.checkpoint",
    "continue.n_clips",
    "interact.k",
    "interact.stride",
    "interact.clip_len",
    "interact.session",
    "interact.rounds",
    "interact.checkpoint",
];

impl Config {
    /// Parses configuration text, rejecting malformed lines, duplicates,
    /// and unknown keys with line diagnostics.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (line_index, raw) in text.lines().enumerate() {
            let line = line_index + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some(eq) = stripped.find('=') else {
                return Err(ConfigError::Syntax { line, found: stripped.to_string() });
            };
            let key = stripped[..eq].trim().to_string();
            let value = stripped[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::EmptyKey { line });
            }
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::Unknown { line, key });
            }
            if let Some(&first) = index.get(&key) {
                let first_line: usize = entries[first].line;
                return Err(ConfigError::Duplicate { line, key, first: first_line });
            }
            index.insert(key, entries.len());
            entries.push(Entry { value, line });
        }
        Ok(Self { entries, index })
    }

    /// Reads and parses a configuration file.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// The built-in toy configuration (also shipped as `configs/toy.cfg`).
    pub fn default_toy() -> Self {
        Self::parse(include_str!("../../../configs/toy.cfg")).expect("toy config parses")
    }

    /// Canonical text: `key = value` lines sorted by key. The config hash
    /// and the checkpoint echo both use this form.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (key, &at) in &self.index {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.entries[at].value);
            out.push('\n');
        }
        out
    }

    fn lookup(&self, key: &str) -> Option<&Entry> {
        self.index.get(key).map(|&at| &self.entries[at])
    }

    /// Raw string value, if present.
    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.lookup(key).map(|e| e.value.as_str())
    }

    fn parse_with<T, F>(&self, key: &str, default: T, expected: &'static str, f: F) -> Result<T, ConfigError>
    where
        F: Fn(&str) -> Option<T>,
    {
        match self.lookup(key) {
            None => Ok(default),
            Some(entry) => f(&entry.value).ok_or_else(|| ConfigError::Value {
                key: key.to_string(),
                line: entry.line,
                value: entry.value.clone(),
                expected,
            }),
        }
    }

    /// Unsigned integer value with a default.
    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_with(key, default, "an unsigned integer", |v| v.parse().ok())
    }

    /// Bitwidth-sized integer value with a default.
    pub fn get_u32(&self, key: &str, default: u32) -> Result<u32, ConfigError> {
        self.parse_with(key, default, "an unsigned integer", |v| v.parse().ok())
    }

    /// Float value with a default.
    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_with(key, default, "a number", |v| v.parse().ok())
    }

    /// Boolean value (`true`/`false`) with a default.
    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(key, default, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    /// Spatial ladder value: comma-separated `HxW` pairs.
    pub fn get_ladder(
        &self,
        key: &str,
        default: &[(usize, usize)],
    ) -> Result<Vec<(usize, usize)>, ConfigError> {
        self.parse_with(key, default.to_vec(), "a ladder like 1x1,2x2,3x3", |v| {
            let mut ladder = Vec::new();
            for part in v.split(',') {
                let (h, w) = part.trim().split_once('x')?;
                ladder.push((h.trim().parse().ok()?, w.trim().parse().ok()?));
            }
            if ladder.is_empty() {
                None
            } else {
                Some(ladder)
            }
        })
    }

    /// Optional path value.
    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.get_str(key).map(PathBuf::from)
    }

    fn invalid(&self, key: &str, reason: String) -> ConfigError {
        let line = self.lookup(key).map(|e| e.line).unwrap_or(0);
        ConfigError::Invalid { key: key.to_string(), line, reason }
    }
}

/// Parses an attention-variant name (`var_full`, `preceding_only`,
/// `ssa:M`, `full_history`).
pub fn parse_variant(value: &str) -> Result<MaskVariant, ConfigError> {
    match value {
        "var_full" => Ok(MaskVariant::VarFull),
        "preceding_only" => Ok(MaskVariant::PrecedingOnly),
        "full_history" => Ok(MaskVariant::FullHistory),
        other => {
            if let Some(depth) = other.strip_prefix("ssa:") {
                if let Ok(depth) = depth.parse::<usize>() {
                    if depth >= 1 {
                        return Ok(MaskVariant::Ssa { depth });
                    }
                }
            }
            Err(ConfigError::Variant { value: value.to_string() })
        }
    }
}

/// Prints a variant the way the config spells it.
pub fn variant_name(variant: MaskVariant) -> String {
    match variant {
        MaskVariant::VarFull => String::from("var_full"),
        MaskVariant::PrecedingOnly => String::from("preceding_only"),
        MaskVariant::FullHistory => String::from("full_history"),
        MaskVariant::Ssa { depth } => format!("ssa:{depth}"),
    }
}

/// Synthetic-dataset geometry and size.
#[derive(Debug, Clone)]
pub struct DataSettings {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub count: usize,
    /// Directory of ISRV files to read instead of synthesizing in memory.
    pub dir: Option<PathBuf>,
}

/// Transformer-training settings.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub videos: usize,
    pub log_every: usize,
    pub variant: MaskVariant,
    /// Train with semantic/detail/anchor condition tokens enabled.
    pub conditions: bool,
    pub overfit_steps: usize,
    pub flip_p: f64,
    pub sqd_droppable: usize,
    pub sqd_p: f64,
}

/// Tokenizer-adapter training settings (the scale-dropout study).
#[derive(Debug, Clone)]
pub struct TokenizerSettings {
    pub steps: usize,
    pub lr: f64,
    pub videos: usize,
    pub holdout: usize,
    pub weights: TokenizerLossWeights,
    pub sqd_droppable: usize,
    pub sqd_p: f64,
}

/// Sampling settings.
#[derive(Debug, Clone)]
pub struct GenerateSettings {
    pub temperature: f64,
    pub caption: String,
    pub checkpoint: Option<PathBuf>,
}

/// Extrapolation settings.
#[derive(Debug, Clone)]
pub struct ContinueSettings {
    pub n_clips: usize,
}

/// Interactive-session settings.
#[derive(Debug, Clone)]
pub struct InteractSettings {
    /// Trailing full-scale detail frames.
    pub k: usize,
    /// Spatial downsampling stride of the semantic condition.
    pub stride: f64,
    /// Clip duration in seconds (chunk bookkeeping only).
    pub clip_len: f64,
    pub session: Option<PathBuf>,
    pub rounds: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a command needs, decoded and cross-validated.
#[derive(Debug, Clone)]
pub struct Settings {
    pub schedule: ScheduleConfig,
    pub patch: PatchDims,
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub tokenizer: TokenizerSettings,
    pub generate: GenerateSettings,
    pub cont: ContinueSettings,
    pub interact: InteractSettings,
}

impl Settings {
    /// Decodes and validates a parsed configuration.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let schedule_default = ScheduleConfig::default();
        let schedule = ScheduleConfig {
            ladder: cfg.get_ladder("schedule.ladder", &schedule_default.ladder)?,
            t_latent: cfg.get_usize("schedule.t_latent", schedule_default.t_latent)?,
            n_clips: cfg.get_usize("schedule.n_clips", schedule_default.n_clips)?,
            k_s: cfg.get_usize("schedule.semantic_scales", schedule_default.k_s)?,
            reps: cfg.get_usize("schedule.semantic_passes", schedule_default.reps)?,
            small_bits: cfg.get_u32("schedule.small_bits", schedule_default.small_bits)?,
            large_bits: cfg.get_u32("schedule.large_bits", schedule_default.large_bits)?,
            small_bits_area_threshold: cfg.get_usize(
                "schedule.small_bits_area_threshold",
                schedule_default.small_bits_area_threshold,
            )?,
        };

        let patch = PatchDims {
            pt: cfg.get_usize("patch.t", 2)?,
            ph: cfg.get_usize("patch.h", 4)?,
            pw: cfg.get_usize("patch.w", 4)?,
        };
        if patch.pt == 0 || patch.ph == 0 || patch.pw == 0 {
            return Err(cfg.invalid("patch.t", String::from("patch dims must be nonzero")));
        }

        let data = DataSettings {
            width: cfg.get_usize("data.width", 32)?,
            height: cfg.get_usize("data.height", 32)?,
            frames: cfg.get_usize("data.frames", 18)?,
            count: cfg.get_usize("data.count", 64)?,
            dir: cfg.get_path("data.dir"),
        };

        // The frame geometry must patchify into the schedule's latent
        // geometry: one image frame plus `n_clips` clips of `t_latent`.
        let latent_t = 1 + schedule.n_clips * schedule.t_latent;
        if data.frames != latent_t * patch.pt {
            return Err(cfg.invalid(
                "data.frames",
                format!(
                    "{} frames do not patchify into 1 + {} x {} latent frames (need {})",
                    data.frames,
                    schedule.n_clips,
                    schedule.t_latent,
                    latent_t * patch.pt
                ),
            ));
        }
        let (largest_h, largest_w) = *schedule.ladder.last().expect("ladder nonempty");
        if data.height != largest_h * patch.ph || data.width != largest_w * patch.pw {
            return Err(cfg.invalid(
                "data.height",
                format!(
                    "{}x{} pixels do not patchify into the {}x{} largest scale",
                    data.height, data.width, largest_h, largest_w
                ),
            ));
        }

        let mut bitwidths = vec![schedule.small_bits, schedule.large_bits];
        bitwidths.sort_unstable();
        bitwidths.dedup();
        let model_default = ModelConfig::default();
        let model = ModelConfig {
            layers: cfg.get_usize("model.layers", model_default.layers)?,
            heads: cfg.get_usize("model.heads", model_default.heads)?,
            head_dim: cfg.get_usize("model.head_dim", model_default.head_dim)?,
            mlp_ratio: cfg.get_usize("model.mlp_ratio", model_default.mlp_ratio)?,
            channels: 3 * patch.pt * patch.ph * patch.pw,
            bitwidths,
            text_vocab: cfg.get_usize("model.text_vocab", model_default.text_vocab)?,
            text_len: cfg.get_usize("model.text_len", model_default.text_len)?,
            rope_bases: uniform_bases(cfg.get_f64("model.rope_base", 10000.0)?),
            lr: cfg.get_f64("model.lr", model_default.lr)?,
            init_std: cfg.get_f64("model.init_std", model_default.init_std)?,
        };
        if model.text_vocab < stpyr_core::synth::VOCAB.len() {
            return Err(cfg.invalid(
                "model.text_vocab",
                format!("must cover the caption vocabulary ({})", stpyr_core::synth::VOCAB.len()),
            ));
        }

        let train = TrainSettings {
            steps: cfg.get_usize("train.steps", 2000)?,
            batch: cfg.get_usize("train.batch", 1)?,
            videos: cfg.get_usize("train.videos", 64)?,
            log_every: cfg.get_usize("train.log_every", 25)?,
            variant: parse_variant(cfg.get_str("train.variant").unwrap_or("ssa:1"))?,
            conditions: cfg.get_bool("train.conditions", false)?,
            overfit_steps: cfg.get_usize("train.overfit_steps", 500)?,
            flip_p: cfg.get_f64("bsc_flip_p", 0.1)?,
            sqd_droppable: cfg.get_usize("sqd_droppable", 2)?,
            sqd_p: cfg.get_f64("sqd_p", 0.5)?,
        };
        if !(0.0..=1.0).contains(&train.flip_p) {
            return Err(cfg.invalid("bsc_flip_p", String::from("must lie in [0, 1]")));
        }
        if !(0.0..=1.0).contains(&train.sqd_p) {
            return Err(cfg.invalid("sqd_p", String::from("must lie in [0, 1]")));
        }
        if train.batch == 0 {
            return Err(cfg.invalid("train.batch", String::from("must be nonzero")));
        }

        let tokenizer = TokenizerSettings {
            steps: cfg.get_usize("tokenizer.steps", 300)?,
            lr: cfg.get_f64("tokenizer.lr", 0.01)?,
            videos: cfg.get_usize("tokenizer.videos", 16)?,
            holdout: cfg.get_usize("tokenizer.holdout", 8)?,
            weights: TokenizerLossWeights {
                recon: cfg.get_f64("recon_weight", 1.0)?,
                commitment: cfg.get_f64("commit_weight", 0.25)?,
                entropy: cfg.get_f64("entropy_weight", 0.1)?,
                tau: cfg.get_f64("entropy_tau", 10.0)?,
            },
            sqd_droppable: train.sqd_droppable,
            sqd_p: train.sqd_p,
        };

        let generate = GenerateSettings {
            temperature: cfg.get_f64("generate.temperature", 1.0)?,
            caption: cfg
                .get_str("generate.caption")
                .unwrap_or("red square moves right")
                .to_string(),
            checkpoint: cfg.get_path("generate.checkpoint"),
        };

        let cont = ContinueSettings { n_clips: cfg.get_usize("continue.n_clips", 4)? };
        if cont.n_clips <= schedule.n_clips {
            return Err(cfg.invalid(
                "continue.n_clips",
                format!("must exceed the training clip count {}", schedule.n_clips),
            ));
        }

        let interact = InteractSettings {
            k: cfg.get_usize("interact.k", 2)?,
            stride: cfg.get_f64("interact.stride", 32f64.sqrt())?,
            clip_len: cfg.get_f64("interact.clip_len", schedule.t_latent as f64)?,
            session: cfg.get_path("interact.session"),
            rounds: cfg.get_usize("interact.rounds", 4)?,
            checkpoint: cfg.get_path("interact.checkpoint"),
        };
        if interact.k == 0 || interact.k > schedule.t_latent {
            return Err(cfg.invalid(
                "interact.k",
                format!("must lie in 1..={}", schedule.t_latent),
            ));
        }
        if interact.stride.is_nan() || interact.stride < 1.0 {
            return Err(cfg.invalid("interact.stride", String::from("must be at least 1")));
        }

        Ok(Self { schedule, patch, data, model, train, tokenizer, generate, cont, interact })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_decodes_to_the_defaults() {
        let cfg = Config::default_toy();
        let settings = Settings::from_config(&cfg).unwrap();
        assert_eq!(settings.schedule, ScheduleConfig::default());
        assert_eq!(settings.patch, PatchDims::default());
        assert_eq!(settings.model.channels, 96);
        assert_eq!(settings.model.bitwidths, vec![16, 32]);
        assert_eq!(settings.train.variant, MaskVariant::Ssa { depth: 1 });
        assert_eq!(settings.interact.k, 2);
        assert!((settings.interact.stride - 32f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let cfg = Config::parse(
            "# header\n\n  model.layers=3   # tail comment\n\tmodel.heads =  4\n",
        )
        .unwrap();
        assert_eq!(cfg.get_usize("model.layers", 0).unwrap(), 3);
        assert_eq!(cfg.get_usize("model.heads", 0).unwrap(), 4);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = Config::parse("model.layers = 2\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err}");

        let err = Config::parse("mode.layers = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Unknown { line: 1, .. }), "{err}");

        let err = Config::parse("model.layers = 2\nmodel.layers = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { line: 2, first: 1, .. }), "{err}");
    }

    #[test]
    fn value_errors_name_the_key_and_line() {
        let cfg = Config::parse("model.layers = two\n").unwrap();
        let err = cfg.get_usize("model.layers", 0).unwrap_err();
        match err {
            ConfigError::Value { key, line, value, .. } => {
                assert_eq!(key, "model.layers");
                assert_eq!(line, 1);
                assert_eq!(value, "two");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ladder_syntax_parses() {
        let cfg = Config::parse("schedule.ladder = 1x1, 2x2,4x6\n").unwrap();
        let ladder = cfg.get_ladder("schedule.ladder", &[]).unwrap();
        assert_eq!(ladder, vec![(1, 1), (2, 2), (4, 6)]);
    }

    #[test]
    fn geometry_cross_checks_are_enforced() {
        let text = "data.frames = 20\n";
        let cfg = Config::parse(text).unwrap();
        let err = Settings::from_config(&cfg).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }), "{err}");
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let a = Config::parse("model.heads = 2\nmodel.layers = 4\n").unwrap();
        let b = Config::parse("model.layers = 4\n# other order\nmodel.heads = 2\n").unwrap();
        assert_eq!(a.canonical_text(), b.canonical_text());
        assert_eq!(a.canonical_text(), "model.heads = 2\nmodel.layers = 4\n");
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["var_full", "preceding_only", "ssa:3", "full_history"] {
            let variant = parse_variant(name).unwrap();
            assert_eq!(variant_name(variant), name);
        }
        assert!(parse_variant("ssa:0").is_err());
        assert!(parse_variant("dense").is_err());
    }
}

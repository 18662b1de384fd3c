//! Run configuration: a flat `key = value` text format with a closed key
//! set.
//!
//! Unknown keys and duplicate keys are errors — a typo'd config must fail
//! loudly, not run with a silent default. `#` starts a full-line comment;
//! blank lines are ignored. [`RunConfig::to_text`] writes every key, and
//! parsing that text reproduces the struct exactly.
//!
//! The `grid_4x4` flag switches the whole layout family (4×4 grid of
//! 32-pixel frames, no gutter). Setting it alongside an explicitly
//! conflicting `grid_side` is rejected rather than second-guessed.

use crate::diffusion::{make_schedule, DiffusionError, DiffusionSchedule, FreezeMode};
use crate::grid::{GridError, GridLayout};
use crate::latent::{LatentCodec, LatentError};
use crate::schedule::{ScheduleError, ScheduleParams};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Errors from parsing or validating a [`RunConfig`].
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got {got:?}")]
    BadLine { line: usize, got: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("duplicate config key {key:?}")]
    DuplicateKey { key: String },
    #[error("config key {key}: cannot parse value {got:?}")]
    BadValue { key: &'static str, got: String },
    #[error("conflicting config keys: {what}")]
    Conflict { what: String },
    #[error("invalid config: {what}")]
    Invalid { what: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Every tunable of a run. Field defaults are the packaged training
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Grid side length G (2 or 4).
    pub grid_side: u32,
    /// Inside-frame edge length in pixels.
    pub frame_size: u32,
    /// Gutter width between cells in pixels.
    pub gutter: u32,
    /// Key-frame stride within a segment.
    pub key_stride: u64,
    /// Diffusion timestep count T.
    pub t_max: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampler steps for the key-grid role.
    pub steps_key: u32,
    /// Sampler steps for the interpolation / next-key roles.
    pub steps_interp: u32,
    /// Latent codec id (`identity` or `s2d:p`).
    pub latent_codec: String,
    /// Denoiser base width.
    pub base_channels: u32,
    /// Prompt embedding dimension.
    pub embed_dim: u32,
    /// Classifier-free guidance scale (1.0 = off).
    pub guidance_scale: f64,
    /// Ablation: interpolation ignores the previous-grid condition.
    pub non_ar: bool,
    /// Ablation: 4×4 grid layout family.
    pub grid_4x4: bool,
    /// Parameter-group freeze mode for training.
    pub freeze: FreezeMode,
    pub seed: u64,
    /// Optimizer steps per role.
    pub train_steps: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    /// Probability of replacing the prompt with the null embedding during
    /// training (classifier-free guidance dropout).
    pub p_uncond: f64,
    /// Default dataset directory ("" = must come from the command line).
    pub data_dir: String,
    /// Default checkpoint directory ("" = must come from the command line).
    pub ckpt_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_side: 2,
            frame_size: 30,
            gutter: 4,
            key_stride: 9,
            t_max: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps_key: 80,
            steps_interp: 20,
            latent_codec: "s2d:2".to_owned(),
            base_channels: 16,
            embed_dim: 32,
            guidance_scale: 1.0,
            non_ar: false,
            grid_4x4: false,
            freeze: FreezeMode::None,
            seed: 0,
            train_steps: 900,
            batch_size: 8,
            learning_rate: 2e-3,
            p_uncond: 0.1,
            data_dir: String::new(),
            ckpt_dir: String::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "grid_side",
    "frame_size",
    "gutter",
    "key_stride",
    "t_max",
    "beta_start",
    "beta_end",
    "steps_key",
    "steps_interp",
    "latent_codec",
    "base_channels",
    "embed_dim",
    "guidance_scale",
    "non_ar",
    "grid_4x4",
    "freeze",
    "seed",
    "train_steps",
    "batch_size",
    "learning_rate",
    "p_uncond",
    "data_dir",
    "ckpt_dir",
];

fn parse_num<T: std::str::FromStr>(key: &'static str, raw: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| ConfigError::BadValue {
        key,
        got: raw.to_owned(),
    })
}

fn parse_bool(key: &'static str, raw: &str) -> Result<bool, ConfigError> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key,
            got: raw.to_owned(),
        }),
    }
}

impl RunConfig {
    /// Parses config text. Applies `grid_4x4` layout rewriting, then
    /// validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    got: raw_line.to_owned(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    key: key.to_owned(),
                });
            }
            if seen.insert(key.to_owned(), value.to_owned()).is_some() {
                return Err(ConfigError::DuplicateKey {
                    key: key.to_owned(),
                });
            }
        }

        let mut cfg = RunConfig::default();
        let get = |key: &str| seen.get(key).map(String::as_str);

        if let Some(v) = get("grid_4x4") {
            cfg.grid_4x4 = parse_bool("grid_4x4", v)?;
        }
        if cfg.grid_4x4 {
            // Switch the layout family before explicit keys are applied.
            cfg.grid_side = 4;
            cfg.frame_size = 32;
            cfg.gutter = 0;
            cfg.key_stride = 1; // 16 consecutive frames per grid, keys only
            if let Some(v) = get("grid_side") {
                if v != "4" {
                    return Err(ConfigError::Conflict {
                        what: format!("grid_4x4 = true but grid_side = {v}"),
                    });
                }
            }
        }

        if let Some(v) = get("grid_side") {
            cfg.grid_side = parse_num("grid_side", v)?;
        }
        if let Some(v) = get("frame_size") {
            cfg.frame_size = parse_num("frame_size", v)?;
        }
        if let Some(v) = get("gutter") {
            cfg.gutter = parse_num("gutter", v)?;
        }
        if let Some(v) = get("key_stride") {
            cfg.key_stride = parse_num("key_stride", v)?;
        }
        if let Some(v) = get("t_max") {
            cfg.t_max = parse_num("t_max", v)?;
        }
        if let Some(v) = get("beta_start") {
            cfg.beta_start = parse_num("beta_start", v)?;
        }
        if let Some(v) = get("beta_end") {
            cfg.beta_end = parse_num("beta_end", v)?;
        }
        if let Some(v) = get("steps_key") {
            cfg.steps_key = parse_num("steps_key", v)?;
        }
        if let Some(v) = get("steps_interp") {
            cfg.steps_interp = parse_num("steps_interp", v)?;
        }
        if let Some(v) = get("latent_codec") {
            cfg.latent_codec = v.to_owned();
        }
        if let Some(v) = get("base_channels") {
            cfg.base_channels = parse_num("base_channels", v)?;
        }
        if let Some(v) = get("embed_dim") {
            cfg.embed_dim = parse_num("embed_dim", v)?;
        }
        if let Some(v) = get("guidance_scale") {
            cfg.guidance_scale = parse_num("guidance_scale", v)?;
        }
        if let Some(v) = get("non_ar") {
            cfg.non_ar = parse_bool("non_ar", v)?;
        }
        if let Some(v) = get("freeze") {
            cfg.freeze = FreezeMode::from_word(v)?;
        }
        if let Some(v) = get("seed") {
            cfg.seed = parse_num("seed", v)?;
        }
        if let Some(v) = get("train_steps") {
            cfg.train_steps = parse_num("train_steps", v)?;
        }
        if let Some(v) = get("batch_size") {
            cfg.batch_size = parse_num("batch_size", v)?;
        }
        if let Some(v) = get("learning_rate") {
            cfg.learning_rate = parse_num("learning_rate", v)?;
        }
        if let Some(v) = get("p_uncond") {
            cfg.p_uncond = parse_num("p_uncond", v)?;
        }
        if let Some(v) = get("data_dir") {
            cfg.data_dir = v.to_owned();
        }
        if let Some(v) = get("ckpt_dir") {
            cfg.ckpt_dir = v.to_owned();
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks every cross-key invariant. Called by [`parse`](Self::parse);
    /// call it again after mutating fields programmatically.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let layout = self.layout()?; // grid_side / frame sizes / gutter
        let codec = self.codec()?;
        self.schedule_params()?; // key_stride vs frames per grid
        self.diffusion_schedule()?; // t_max / betas

        let canvas = layout.canvas_size();
        let p = codec.factor();
        if canvas % p != 0 {
            return Err(ConfigError::Invalid {
                what: format!(
                    "canvas size {canvas} (frame_size, gutter) is not divisible by the \
                     codec factor {p}"
                ),
            });
        }
        let latent_side = canvas / p;
        if latent_side % 4 != 0 {
            return Err(ConfigError::Invalid {
                what: format!(
                    "latent size {latent_side} must divide by 4 (two pooling levels); \
                     adjust frame_size/gutter or latent_codec"
                ),
            });
        }
        for (name, v) in [
            ("steps_key", self.steps_key),
            ("steps_interp", self.steps_interp),
        ] {
            if v == 0 || v > self.t_max {
                return Err(ConfigError::Invalid {
                    what: format!("{name} = {v} outside 1..={}", self.t_max),
                });
            }
        }
        if self.base_channels == 0 || self.embed_dim == 0 {
            return Err(ConfigError::Invalid {
                what: "base_channels and embed_dim must be positive".into(),
            });
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(ConfigError::Invalid {
                what: format!("guidance_scale = {} must be finite and >= 0", self.guidance_scale),
            });
        }
        if self.train_steps == 0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid {
                what: "train_steps and batch_size must be positive".into(),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigError::Invalid {
                what: format!("learning_rate = {} must be positive", self.learning_rate),
            });
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(ConfigError::Invalid {
                what: format!("p_uncond = {} outside [0, 1]", self.p_uncond),
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<GridLayout, ConfigError> {
        Ok(GridLayout::new(self.grid_side, self.frame_size, self.gutter)?)
    }

    pub fn schedule_params(&self) -> Result<ScheduleParams, ConfigError> {
        Ok(ScheduleParams::new(
            self.grid_side * self.grid_side,
            self.key_stride,
        )?)
    }

    pub fn codec(&self) -> Result<LatentCodec, ConfigError> {
        Ok(LatentCodec::parse(&self.latent_codec)?)
    }

    pub fn diffusion_schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        Ok(make_schedule(self.t_max, self.beta_start, self.beta_end)?)
    }

    /// Canonical text form listing every key; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        format!(
            "# Grid layout\n\
             grid_side = {}\n\
             frame_size = {}\n\
             gutter = {}\n\
             \n\
             # Generation schedule\n\
             key_stride = {}\n\
             \n\
             # Diffusion\n\
             t_max = {}\n\
             beta_start = {}\n\
             beta_end = {}\n\
             steps_key = {}\n\
             steps_interp = {}\n\
             guidance_scale = {}\n\
             \n\
             # Model\n\
             latent_codec = {}\n\
             base_channels = {}\n\
             embed_dim = {}\n\
             \n\
             # Ablations\n\
             non_ar = {}\n\
             grid_4x4 = {}\n\
             freeze = {}\n\
             \n\
             # Training\n\
             seed = {}\n\
             train_steps = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             p_uncond = {}\n\
             \n\
             # Paths (may be overridden on the command line)\n\
             data_dir = {}\n\
             ckpt_dir = {}\n",
            self.grid_side,
            self.frame_size,
            self.gutter,
            self.key_stride,
            self.t_max,
            self.beta_start,
            self.beta_end,
            self.steps_key,
            self.steps_interp,
            self.guidance_scale,
            self.latent_codec,
            self.base_channels,
            self.embed_dim,
            self.non_ar,
            self.grid_4x4,
            self.freeze.word(),
            self.seed,
            self.train_steps,
            self.batch_size,
            self.learning_rate,
            self.p_uncond,
            self.data_dir,
            self.ckpt_dir,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        // Default layout: canvas 64, latent 32, divisible by 4.
        assert_eq!(cfg.layout().unwrap().canvas_size(), 64);
    }

    #[test]
    fn empty_text_yields_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected()  {
        assert!(matches!(
            RunConfig::parse("key_strid = 9"),
            Err(ConfigError::UnknownKey { key }) if key == "key_strid"
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::DuplicateKey { key }) if key == "seed"
        ));
        assert!(matches!(
            RunConfig::parse("just some words"),
            Err(ConfigError::BadLine { line: 1, .. })
        ));
    }

    #[test]
    fn value_parsing_errors_name_the_key() {
        assert!(matches!(
            RunConfig::parse("t_max = many"),
            Err(ConfigError::BadValue { key: "t_max", .. })
        ));
        assert!(matches!(
            RunConfig::parse("non_ar = yes"),
            Err(ConfigError::BadValue { key: "non_ar", .. })
        ));
        assert!(matches!(
            RunConfig::parse("freeze = glacier"),
            Err(ConfigError::Diffusion(DiffusionError::BadFreezeMode { .. }))
        ));
        assert!(matches!(
            RunConfig::parse("latent_codec = vae"),
            Err(ConfigError::Latent(LatentError::BadCodecId { .. }))
        ));
    }

    #[test]
    fn grid_4x4_switches_the_layout_family() {
        let cfg = RunConfig::parse("grid_4x4 = true").unwrap();
        assert_eq!(cfg.grid_side, 4);
        assert_eq!(cfg.frame_size, 32);
        assert_eq!(cfg.gutter, 0);
        assert_eq!(cfg.layout().unwrap().canvas_size(), 128);
        // 16 consecutive frames per grid, keys only.
        let sp = cfg.schedule_params().unwrap();
        assert_eq!(sp.frames_per_grid(), 16);
        assert_eq!(sp.key_stride(), 1);
        assert_eq!(sp.levels(), 0);

        // Explicit agreement is fine; contradiction is an error.
        assert!(RunConfig::parse("grid_4x4 = true\ngrid_side = 4").is_ok());
        assert!(matches!(
            RunConfig::parse("grid_4x4 = true\ngrid_side = 2"),
            Err(ConfigError::Conflict { .. })
        ));

        // Explicit frame sizing still applies on top of the family.
        let cfg = RunConfig::parse("grid_4x4 = true\nframe_size = 16").unwrap();
        assert_eq!(cfg.frame_size, 16);
        assert_eq!(cfg.layout().unwrap().canvas_size(), 64);
    }

    #[test]
    fn cross_key_invariants_are_checked() {
        // Canvas 2*31+4 = 66 -> latent 33, not divisible by 4.
        assert!(matches!(
            RunConfig::parse("frame_size = 31"),
            Err(ConfigError::Invalid { .. })
        ));
        // Odd canvas breaks the s2d:2 codec.
        assert!(matches!(
            RunConfig::parse("frame_size = 30\ngutter = 5"),
            Err(ConfigError::Invalid { .. }) | Err(ConfigError::Grid(_))
        ));
        // Sampler steps must not exceed t_max.
        assert!(matches!(
            RunConfig::parse("t_max = 50\nsteps_key = 80"),
            Err(ConfigError::Invalid { .. })
        ));
        // Stride/grid mismatch surfaces the schedule error.
        assert!(RunConfig::parse("key_stride = 7").is_err());
        // Probability out of range.
        assert!(matches!(
            RunConfig::parse("p_uncond = 1.5"),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn whitespace_and_comments_are_tolerated() {
        let cfg = RunConfig::parse(
            "  seed   =  42  \n\
             # a comment line\n\
             \n\
             train_steps = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train_steps, 10);
    }
}

//! Flat `key = value` run configuration.
//!
//! Values come from built-in defaults, then a config file, then command-line
//! overrides, each layer replacing the previous one key by key. All randomness
//! derives from `seed` through [`PipelineConfig::stage_seed`].

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnn::{FineTuneOptions, NetworkConfig, TrainSpec};
use crate::dataset::SplitCounts;
use crate::stain::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::tiler::TileOptions;
use crate::tissue::{DEFAULT_MIN_TISSUE, DEFAULT_WHITE_THRESHOLD};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key} = {value:?}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Root for every artifact; the other paths resolve against it.
    pub work_dir: PathBuf,
    /// Directory holding `slides.tsv`.
    pub slides_dir: PathBuf,
    pub tiles_dir: PathBuf,
    pub normalized_dir: PathBuf,
    pub profiles_dir: PathBuf,
    pub manifest: PathBuf,
    pub weights_dir: PathBuf,
    /// Stain profile text file; empty means the built-in reference.
    pub reference_profile: Option<PathBuf>,
    /// Weight file imported into the backbone before feature extraction.
    pub pretrained_weights: Option<PathBuf>,
    /// Skip slides whose barcode marks them as frozen sections.
    pub ffpe_only: bool,

    pub target_mag: f64,
    pub tile_size: usize,
    pub allow_upsampling: bool,
    pub white_threshold: u8,
    pub min_tissue: f64,
    pub normalize: bool,
    pub beta: f64,
    pub alpha: f64,

    pub train_n: usize,
    pub val_n: usize,
    pub test_n: usize,
    pub by_slide: bool,
    pub seed: u64,

    pub input_size: usize,
    pub width_scale: f64,
    pub fc1: usize,
    pub fc2: usize,

    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_blocks: usize,
    pub head_learning_rate: f64,
    pub head_epochs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainSpec::default();
        let net = NetworkConfig::default();
        let tiles = TileOptions::default();
        PipelineConfig {
            work_dir: PathBuf::from("."),
            slides_dir: PathBuf::from("slides"),
            tiles_dir: PathBuf::from("tiles"),
            normalized_dir: PathBuf::from("tiles_normalized"),
            profiles_dir: PathBuf::from("profiles"),
            manifest: PathBuf::from("manifest.tsv"),
            weights_dir: PathBuf::from("weights"),
            reference_profile: None,
            pretrained_weights: None,
            ffpe_only: false,
            target_mag: tiles.target_magnification,
            tile_size: tiles.tile_size_px,
            allow_upsampling: tiles.allow_upsampling,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
            min_tissue: DEFAULT_MIN_TISSUE,
            normalize: true,
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
            train_n: SplitCounts::PUBLISHED.train,
            val_n: SplitCounts::PUBLISHED.validation,
            test_n: SplitCounts::PUBLISHED.test,
            by_slide: false,
            seed: 0,
            input_size: net.input_size,
            width_scale: net.width_scale,
            fc1: net.fc_sizes.0,
            fc2: net.fc_sizes.1,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            epochs: train.epochs,
            batch_size: train.batch_size,
            freeze_blocks: FineTuneOptions::default().freeze_blocks,
            head_learning_rate: train.learning_rate,
            head_epochs: train.epochs,
        }
    }
}

pub const KEYS: &[&str] = &[
    "work_dir",
    "slides_dir",
    "tiles_dir",
    "normalized_dir",
    "profiles_dir",
    "manifest",
    "weights_dir",
    "reference_profile",
    "pretrained_weights",
    "ffpe_only",
    "target_mag",
    "tile_size",
    "allow_upsampling",
    "white_threshold",
    "min_tissue",
    "normalize",
    "beta",
    "alpha",
    "train_n",
    "val_n",
    "test_n",
    "by_slide",
    "seed",
    "input_size",
    "width_scale",
    "fc1",
    "fc2",
    "learning_rate",
    "momentum",
    "epochs",
    "batch_size",
    "freeze_blocks",
    "head_learning_rate",
    "head_epochs",
];

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| invalid(key, value, "not a valid number"))
}

/// Accepts decimals and simple fractions such as `1/8`.
fn parse_real(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v = match value.split_once('/') {
        Some((a, b)) => parse_num::<f64>(key, a.trim())? / parse_num::<f64>(key, b.trim())?,
        None => parse_num::<f64>(key, value)?,
    };
    if !v.is_finite() {
        return Err(invalid(key, value, "not finite"));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    /// Sets one key from its text form. Range checks happen in [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "work_dir" => self.work_dir = PathBuf::from(v),
            "slides_dir" => self.slides_dir = PathBuf::from(v),
            "tiles_dir" => self.tiles_dir = PathBuf::from(v),
            "normalized_dir" => self.normalized_dir = PathBuf::from(v),
            "profiles_dir" => self.profiles_dir = PathBuf::from(v),
            "manifest" => self.manifest = PathBuf::from(v),
            "weights_dir" => self.weights_dir = PathBuf::from(v),
            "reference_profile" => self.reference_profile = optional_path(v),
            "pretrained_weights" => self.pretrained_weights = optional_path(v),
            "ffpe_only" => self.ffpe_only = parse_bool(key, v)?,
            "target_mag" => self.target_mag = parse_real(key, v)?,
            "tile_size" => self.tile_size = parse_num(key, v)?,
            "allow_upsampling" => self.allow_upsampling = parse_bool(key, v)?,
            "white_threshold" => self.white_threshold = parse_num(key, v)?,
            "min_tissue" => self.min_tissue = parse_real(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "beta" => self.beta = parse_real(key, v)?,
            "alpha" => self.alpha = parse_real(key, v)?,
            "train_n" => self.train_n = parse_num(key, v)?,
            "val_n" => self.val_n = parse_num(key, v)?,
            "test_n" => self.test_n = parse_num(key, v)?,
            "by_slide" => self.by_slide = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "input_size" => self.input_size = parse_num(key, v)?,
            "width_scale" => self.width_scale = parse_real(key, v)?,
            "fc1" => self.fc1 = parse_num(key, v)?,
            "fc2" => self.fc2 = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_real(key, v)?,
            "momentum" => self.momentum = parse_real(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "freeze_blocks" => self.freeze_blocks = parse_num(key, v)?,
            "head_learning_rate" => self.head_learning_rate = parse_real(key, v)?,
            "head_epochs" => self.head_epochs = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "work_dir" => self.work_dir.display().to_string(),
            "slides_dir" => self.slides_dir.display().to_string(),
            "tiles_dir" => self.tiles_dir.display().to_string(),
            "normalized_dir" => self.normalized_dir.display().to_string(),
            "profiles_dir" => self.profiles_dir.display().to_string(),
            "manifest" => self.manifest.display().to_string(),
            "weights_dir" => self.weights_dir.display().to_string(),
            "reference_profile" => path_text(&self.reference_profile),
            "pretrained_weights" => path_text(&self.pretrained_weights),
            "ffpe_only" => self.ffpe_only.to_string(),
            "target_mag" => self.target_mag.to_string(),
            "tile_size" => self.tile_size.to_string(),
            "allow_upsampling" => self.allow_upsampling.to_string(),
            "white_threshold" => self.white_threshold.to_string(),
            "min_tissue" => self.min_tissue.to_string(),
            "normalize" => self.normalize.to_string(),
            "beta" => self.beta.to_string(),
            "alpha" => self.alpha.to_string(),
            "train_n" => self.train_n.to_string(),
            "val_n" => self.val_n.to_string(),
            "test_n" => self.test_n.to_string(),
            "by_slide" => self.by_slide.to_string(),
            "seed" => self.seed.to_string(),
            "input_size" => self.input_size.to_string(),
            "width_scale" => self.width_scale.to_string(),
            "fc1" => self.fc1.to_string(),
            "fc2" => self.fc2.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "freeze_blocks" => self.freeze_blocks.to_string(),
            "head_learning_rate" => self.head_learning_rate.to_string(),
            "head_epochs" => self.head_epochs.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax {
                    line: i + 1,
                    message: format!("unknown key {k:?}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(invalid(key, &self.get(key).unwrap_or_default(), reason))
            }
        };
        check(self.target_mag > 0.0, "target_mag", "must be positive")?;
        check(self.tile_size > 0, "tile_size", "must be positive")?;
        check((0.0..=1.0).contains(&self.min_tissue), "min_tissue", "must lie in [0, 1]")?;
        check(self.beta > 0.0, "beta", "must be positive")?;
        check(self.alpha > 0.0 && self.alpha < 50.0, "alpha", "must lie in (0, 50)")?;
        check(self.freeze_blocks <= 5, "freeze_blocks", "must be at most 5")?;
        check(self.head_learning_rate > 0.0, "head_learning_rate", "must be positive")?;
        self.network()
            .validate()
            .map_err(|e| invalid("network", "", e.to_string()))?;
        self.train_spec()
            .validate()
            .map_err(|e| invalid("train", "", e.to_string()))?;
        Ok(())
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Hex SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Seed for one stage: the config seed mixed with the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::digest(format!("{}:{stage}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }

    pub fn tile_options(&self) -> TileOptions {
        TileOptions {
            target_magnification: self.target_mag,
            tile_size_px: self.tile_size,
            allow_upsampling: self.allow_upsampling,
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_n,
            validation: self.val_n,
            test: self.test_n,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            input_size: self.input_size,
            width_scale: self.width_scale,
            fc_sizes: (self.fc1, self.fc2),
        }
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.stage_seed("train"),
        }
    }

    pub fn head_spec(&self) -> TrainSpec {
        TrainSpec {
            learning_rate: self.head_learning_rate,
            epochs: self.head_epochs,
            seed: self.stage_seed("features"),
            ..self.train_spec()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

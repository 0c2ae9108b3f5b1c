//! Stage runner over on-disk artifacts.
//!
//! Layout under the work directory (names configurable):
//!
//! ```text
//! manifest.tsv               one line per tile
//! tiles/<slide>__x<X>_y<Y>.ppm
//! tiles_normalized/...       same names, stain-normalized
//! profiles/<slide>.profile
//! features.bin               VGGW container: <split>.features, <split>.labels
//! weights/backbone.vggw      network used for feature extraction
//! weights/head.vggw          stage-1 logistic head
//! weights/model.vggw         fine-tuned network
//! stage1_history.tsv, history.tsv, stage1_report.tsv, eval_report.tsv
//! runlog.tsv                 stage, config hash, seed, timestamp
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnn::weights::{load_weights, save_weights, NamedTensor};
use crate::cnn::{
    extract_all_features, fine_tune, predict_probabilities, train_logistic_head, write_history, CnnError,
    EpochRecord, FineTuneOptions, LogisticHead, Network, Samples,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::dataset::{
    load_manifest, load_slide_list, parse_tcga_slide_barcode, resize_to_input, save_manifest, stratified_split,
    DatasetError, Split, TileRecord,
};
use crate::metrics::{compute_metrics, confusion, report_line, MetricsError};
use crate::raster::{read_ppm, write_ppm, RasterError};
use crate::stain::{estimate_stain_matrix, Normalizer, PixelReservoir, StainError, StainProfile, MAX_SAMPLE_PIXELS};
use crate::tiler::{extract_tiles, TilerError};
use crate::tissue::{keep_decision, tile_stats, RejectReason, TissueError};
use crate::wsi::{open_slide, WsiError};

pub const SLIDE_LIST: &str = "slides.tsv";
pub const FEATURES: &str = "features.bin";
pub const BACKBONE: &str = "backbone.vggw";
pub const HEAD: &str = "head.vggw";
pub const MODEL: &str = "model.vggw";
pub const STAGE1_HISTORY: &str = "stage1_history.tsv";
pub const HISTORY: &str = "history.tsv";
pub const STAGE1_REPORT: &str = "stage1_report.tsv";
pub const EVAL_REPORT: &str = "eval_report.tsv";
pub const RUNLOG: &str = "runlog.tsv";
pub const RUNLOG_HEADER: &str = "stage\tconfig_hash\tseed\ttimestamp";

/// Rejection reason for tiles of a slide whose stain profile could not be estimated.
pub const STAIN_FAILED: &str = "stain_estimation_failed";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact(_) => 3,
            PipelineError::Data(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config_error",
            PipelineError::MissingArtifact(_) => "missing_artifact",
            PipelineError::Data(_) => "data_error",
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    CnnError,
    DatasetError,
    MetricsError,
    RasterError,
    StainError,
    TilerError,
    TissueError,
    WsiError,
    std::io::Error
);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Inspect,
    Tile,
    Filter,
    Normalize,
    Split,
    Features,
    Train,
    Eval,
}

impl Stage {
    /// Stages `pipeline` runs, in order.
    pub const PIPELINE: [Stage; 7] = [
        Stage::Tile,
        Stage::Filter,
        Stage::Normalize,
        Stage::Split,
        Stage::Features,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Inspect => "inspect",
            Stage::Tile => "tile",
            Stage::Filter => "filter",
            Stage::Normalize => "normalize",
            Stage::Split => "split",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact(path.to_path_buf()))
    }
}

fn basename(p: &str) -> Result<&str, PipelineError> {
    Path::new(p)
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| PipelineError::Data(format!("tile path {p:?} has no file name")))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, PipelineError> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Per-channel RGB means subtracted from 0..255 pixel values, as VGG expects.
pub const CHANNEL_MEAN: [f32; 3] = [123.68, 116.779, 103.939];

/// Interleaved RGB bytes to network input: raw 0..255 scale minus [`CHANNEL_MEAN`].
pub fn preprocess(pixels: &[u8]) -> Vec<f32> {
    pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| f32::from(v) - CHANNEL_MEAN[i % 3])
        .collect()
}

/// Runs stages against one configuration.
pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Pipeline { config }
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.config.resolve(p)
    }

    fn work(&self, name: &str) -> PathBuf {
        self.config.work_dir.join(name)
    }

    fn weights(&self, name: &str) -> PathBuf {
        self.path(&self.config.weights_dir).join(name)
    }

    fn manifest_path(&self) -> PathBuf {
        self.path(&self.config.manifest)
    }

    fn load_manifest(&self) -> Result<Vec<TileRecord>, PipelineError> {
        let path = self.manifest_path();
        require(&path)?;
        Ok(load_manifest(&path)?)
    }

    fn save_manifest(&self, records: &[TileRecord]) -> Result<(), PipelineError> {
        Ok(save_manifest(&self.manifest_path(), records)?)
    }

    /// Runs one stage and appends its provenance line; returns a short summary.
    pub fn run(&self, stage: Stage) -> Result<String, PipelineError> {
        std::fs::create_dir_all(&self.config.work_dir)?;
        log::info!("stage {stage}");
        let summary = match stage {
            Stage::Inspect => self.inspect()?,
            Stage::Tile => self.tile()?,
            Stage::Filter => self.filter()?,
            Stage::Normalize => self.normalize()?,
            Stage::Split => self.split()?,
            Stage::Features => self.features()?,
            Stage::Train => self.train()?,
            Stage::Eval => self.eval()?,
        };
        self.append_runlog(stage.name())?;
        Ok(summary)
    }

    /// Every stage of [`Stage::PIPELINE`] in order, then a `pipeline` runlog line.
    pub fn run_all(&self) -> Result<String, PipelineError> {
        let mut last = String::new();
        for stage in Stage::PIPELINE {
            last = self.run(stage)?;
        }
        self.append_runlog("pipeline")?;
        Ok(last)
    }

    fn append_runlog(&self, stage: &str) -> Result<(), PipelineError> {
        let path = self.work(RUNLOG);
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "{RUNLOG_HEADER}")?;
        }
        writeln!(
            f,
            "{stage}\t{}\t{}\t{}",
            self.config.hash(),
            self.config.stage_seed(stage),
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        )?;
        Ok(())
    }

    fn slide_list(&self) -> Result<Vec<crate::dataset::SlideEntry>, PipelineError> {
        let path = self.path(&self.config.slides_dir).join(SLIDE_LIST);
        require(&path)?;
        Ok(load_slide_list(&path)?)
    }

    fn inspect(&self) -> Result<String, PipelineError> {
        let mut out = String::from("slide_id\tlevel\twidth\theight\ttile_width\ttile_height\tcompression\tmagnification\n");
        for entry in self.slide_list()? {
            require(&entry.path)?;
            let slide = open_slide(&entry.path, entry.magnification)?;
            for (i, l) in slide.levels.iter().enumerate() {
                out.push_str(&format!(
                    "{}\t{i}\t{}\t{}\t{}\t{}\t{:?}\t{}\n",
                    slide.slide_id,
                    l.width_px,
                    l.height_px,
                    l.tile_width_px,
                    l.tile_height_px,
                    l.compression,
                    slide.level_magnification(i)
                ));
            }
        }
        Ok(out)
    }

    fn tile(&self) -> Result<String, PipelineError> {
        let cfg = &self.config;
        let tiles_dir = self.path(&cfg.tiles_dir);
        std::fs::create_dir_all(&tiles_dir)?;
        let mut records = Vec::new();
        for entry in self.slide_list()? {
            require(&entry.path)?;
            let slide = open_slide(&entry.path, entry.magnification)?;
            if cfg.ffpe_only {
                if let Ok(fields) = parse_tcga_slide_barcode(&slide.slide_id) {
                    if !fields.is_ffpe() {
                        log::info!("skipping non-FFPE slide {}", slide.slide_id);
                        continue;
                    }
                }
            }
            let stream = extract_tiles(&slide, &cfg.tile_options())?;
            let plan = *stream.plan();
            log::info!(
                "{}: level {} ({}x) scale {:.4}, {} tiles",
                slide.slide_id,
                plan.level,
                plan.level_magnification,
                plan.scale,
                plan.grid.len()
            );
            for item in stream {
                let (placement, image) = item?;
                let name = format!("{}__x{}_y{}.ppm", placement.slide_id, placement.origin_x, placement.origin_y);
                write_ppm(&tiles_dir.join(&name), &image)?;
                let stats = tile_stats(&image.pixels, cfg.white_threshold)?;
                records.push(TileRecord {
                    slide_id: placement.slide_id,
                    tile_path: cfg.tiles_dir.join(&name).display().to_string(),
                    class_label: entry.class_label,
                    origin_x: placement.origin_x,
                    origin_y: placement.origin_y,
                    tile_size_px: placement.tile_size_px,
                    magnification: placement.magnification,
                    tissue_fraction: stats.tissue_fraction,
                    split: Split::Unassigned,
                    rejected_reason: None,
                });
            }
        }
        self.save_manifest(&records)?;
        Ok(format!("{} tiles", records.len()))
    }

    fn filter(&self) -> Result<String, PipelineError> {
        let cfg = &self.config;
        let mut records = self.load_manifest()?;
        let automatic = [RejectReason::FullWhite.as_str(), RejectReason::LowTissue.as_str()];
        let results: Vec<Result<(f64, Option<String>), PipelineError>> = records
            .par_iter()
            .map(|r| {
                let image = read_ppm(&self.path(Path::new(&r.tile_path)))?;
                let stats = tile_stats(&image.pixels, cfg.white_threshold)?;
                let manual = r.rejected_reason.as_deref().filter(|s| !automatic.contains(s));
                let reason = match manual {
                    Some(m) => Some(m.to_string()),
                    None => keep_decision(&stats, cfg.min_tissue).err().map(|r| r.as_str().to_string()),
                };
                Ok((stats.tissue_fraction, reason))
            })
            .collect();
        let mut kept = 0;
        for (r, res) in records.iter_mut().zip(results) {
            let (fraction, reason) = res?;
            r.tissue_fraction = fraction;
            r.rejected_reason = reason;
            kept += usize::from(r.rejected_reason.is_none());
        }
        self.save_manifest(&records)?;
        Ok(format!("{kept} of {} tiles kept", records.len()))
    }

    fn reference_profile(&self) -> Result<StainProfile, PipelineError> {
        match &self.config.reference_profile {
            Some(p) => {
                let path = self.path(p);
                require(&path)?;
                Ok(StainProfile::from_text(&std::fs::read_to_string(&path)?)?)
            }
            None => Ok(StainProfile::reference()),
        }
    }

    fn normalize(&self) -> Result<String, PipelineError> {
        let cfg = &self.config;
        let mut records = self.load_manifest()?;
        let raw_path = |r: &TileRecord| -> Result<PathBuf, PipelineError> {
            Ok(cfg.tiles_dir.join(basename(&r.tile_path)?))
        };
        if !cfg.normalize {
            for r in &mut records {
                r.tile_path = raw_path(r)?.display().to_string();
            }
            self.save_manifest(&records)?;
            return Ok("normalization disabled".into());
        }
        let reference = self.reference_profile()?;
        let profiles_dir = self.path(&cfg.profiles_dir);
        let out_dir = self.path(&cfg.normalized_dir);
        std::fs::create_dir_all(&profiles_dir)?;
        std::fs::create_dir_all(&out_dir)?;

        let mut slides: Vec<String> = Vec::new();
        let mut by_slide: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.is_rejected() {
                continue;
            }
            by_slide
                .entry(r.slide_id.clone())
                .or_insert_with(|| {
                    slides.push(r.slide_id.clone());
                    Vec::new()
                })
                .push(i);
        }
        let stage_seed = cfg.stage_seed("normalize");
        let mut normalized = 0;
        for slide in &slides {
            let indices = &by_slide[slide];
            let digest = Sha256::digest(slide.as_bytes());
            let slide_seed = stage_seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut reservoir = PixelReservoir::new(MAX_SAMPLE_PIXELS, ChaCha8Rng::seed_from_u64(slide_seed));
            for &i in indices {
                let image = read_ppm(&self.path(&raw_path(&records[i])?))?;
                for p in image.pixels.chunks_exact(3) {
                    reservoir.offer([p[0], p[1], p[2]]);
                }
            }
            let profile = match estimate_stain_matrix(&reservoir.into_pixels(), cfg.beta, cfg.alpha) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("{slide}: {e}; rejecting its tiles");
                    for &i in indices {
                        records[i].rejected_reason = Some(STAIN_FAILED.to_string());
                    }
                    continue;
                }
            };
            std::fs::write(profiles_dir.join(format!("{slide}.profile")), profile.to_text())?;
            let normalizer = Normalizer::new(&profile, &reference)?;
            let results: Vec<Result<String, PipelineError>> = indices
                .par_iter()
                .map(|&i| {
                    let raw = raw_path(&records[i])?;
                    let mut image = read_ppm(&self.path(&raw))?;
                    image.pixels = normalizer.apply(&image.pixels);
                    let name = basename(&records[i].tile_path)?.to_string();
                    write_ppm(&out_dir.join(&name), &image)?;
                    Ok(cfg.normalized_dir.join(name).display().to_string())
                })
                .collect();
            for (&i, res) in indices.iter().zip(results) {
                records[i].tile_path = res?;
                normalized += 1;
            }
        }
        self.save_manifest(&records)?;
        Ok(format!("{normalized} tiles normalized across {} slides", slides.len()))
    }

    fn split(&self) -> Result<String, PipelineError> {
        let cfg = &self.config;
        let records = self.load_manifest()?;
        let records = stratified_split(records, cfg.split_counts(), cfg.stage_seed("split"), cfg.by_slide)?;
        self.save_manifest(&records)?;
        let count = |s: Split| records.iter().filter(|r| r.split == s).count();
        Ok(format!(
            "train {} validation {} test {}",
            count(Split::Train),
            count(Split::Validation),
            count(Split::Test)
        ))
    }

    /// Tiles of one split, resized to the network input and mean-centered by [`preprocess`].
    pub fn load_split(&self, records: &[TileRecord], split: Split) -> Result<Samples<f32>, PipelineError> {
        let input = self.config.input_size;
        let chosen: Vec<&TileRecord> = records.iter().filter(|r| r.split == split).collect();
        let images: Vec<Result<Vec<f32>, PipelineError>> = chosen
            .par_iter()
            .map(|r| {
                let tile = read_ppm(&self.path(Path::new(&r.tile_path)))?;
                let resized = resize_to_input(&tile, input)?;
                Ok(preprocess(&resized.pixels))
            })
            .collect();
        let mut data = Vec::with_capacity(chosen.len() * input * input * 3);
        for img in images {
            data.extend(img?);
        }
        let labels = chosen
            .iter()
            .map(|r| if r.class_label.is_positive() { 1.0 } else { 0.0 })
            .collect();
        Ok(Samples::new(data, input * input * 3, labels)?)
    }

    fn write_history(&self, name: &str, history: &[EpochRecord]) -> Result<(), PipelineError> {
        write_history(create_file(&self.work(name))?, history)?;
        Ok(())
    }

    fn write_report(&self, name: &str, probabilities: &[f64], labels: &[f64]) -> Result<String, PipelineError> {
        let truth: Vec<bool> = labels.iter().map(|&y| y >= 0.5).collect();
        let cm = confusion(probabilities, &truth, 0.5)?;
        let line = report_line(&cm, &compute_metrics(&cm)?);
        std::fs::write(self.work(name), format!("{line}\n"))?;
        Ok(line)
    }

    fn features(&self) -> Result<String, PipelineError> {
        let cfg = &self.config;
        let records = self.load_manifest()?;
        let mut net = Network::<f32>::new(cfg.network(), cfg.stage_seed("init"))?;
        if let Some(p) = &cfg.pretrained_weights {
            let path = self.path(p);
            require(&path)?;
            let applied = net.import(&load_weights(&path)?)?;
            log::info!("imported {applied} tensors from {}", path.display());
        }
        std::fs::create_dir_all(self.path(&cfg.weights_dir))?;
        save_weights(&self.weights(BACKBONE), &net.export())?;

        let mut tensors = Vec::new();
        let mut sets = Vec::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let images = self.load_split(&records, split)?;
            let feats = extract_all_features(&net, &images)?;
            tensors.push(NamedTensor {
                name: format!("{split}.features"),
                dims: vec![feats.len(), feats.sample_len],
                data: feats.data.clone(),
            });
            tensors.push(NamedTensor {
                name: format!("{split}.labels"),
                dims: vec![feats.len()],
                data: feats.labels.iter().map(|&y| y as f32).collect(),
            });
            sets.push(feats);
        }
        save_weights(&self.work(FEATURES), &tensors)?;

        let (head, history) = train_logistic_head(&sets[0], &sets[1], &cfg.head_spec())?;
        save_weights(&self.weights(HEAD), &head.export())?;
        self.write_history(STAGE1_HISTORY, &history)?;
        let test = &sets[2];
        let probs: Vec<f64> = head
            .logits(&test.data, test.len())?
            .iter()
            .map(|&z| crate::cnn::layers::sigmoid(f64::from(z)))
            .collect();
        let line = self.write_report(STAGE1_REPORT, &probs, &test.labels)?;
        Ok(format!("{} features per tile; stage-1 test: {line}", net.config.feature_len()))
    }

    fn train(&self) -> Result<String, PipelineError> {
        let cfg = &self.config;
        let backbone = self.weights(BACKBONE);
        require(&backbone)?;
        let records = self.load_manifest()?;
        let mut net = Network::<f32>::zeros(cfg.network())?;
        net.import(&load_weights(&backbone)?)?;
        let train = self.load_split(&records, Split::Train)?;
        let val = self.load_split(&records, Split::Validation)?;
        let opts = FineTuneOptions {
            freeze_blocks: cfg.freeze_blocks,
            freeze_fc: false,
        };
        let history = fine_tune(&mut net, &train, &val, &cfg.train_spec(), opts)?;
        save_weights(&self.weights(MODEL), &net.export())?;
        self.write_history(HISTORY, &history)?;
        let last = history.last().map(|h| h.val_accuracy).unwrap_or(0.0);
        Ok(format!("{} epochs, final validation accuracy {last:.4}", history.len()))
    }

    fn eval(&self) -> Result<String, PipelineError> {
        let model = self.weights(MODEL);
        require(&model)?;
        let records = self.load_manifest()?;
        let mut net = Network::<f32>::zeros(self.config.network())?;
        net.import(&load_weights(&model)?)?;
        let test = self.load_split(&records, Split::Test)?;
        let probs = predict_probabilities(&net, &test)?;
        self.write_report(EVAL_REPORT, &probs, &test.labels)
    }
}

/// Reads a stage-1 head saved by the `features` stage.
pub fn load_head(path: &Path) -> Result<LogisticHead<f32>, PipelineError> {
    require(path)?;
    Ok(LogisticHead::import(&load_weights(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::MissingArtifact("x".into()).exit_code(), 3);
        assert_eq!(PipelineError::Data("x".into()).exit_code(), 4);
        assert_eq!(PipelineError::Config(ConfigError::UnknownKey("k".into())).exit_code(), 2);
    }

    #[test]
    fn eval_before_train_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            work_dir: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let err = Pipeline::new(config).run(Stage::Eval).unwrap_err();
        assert!(matches!(err, PipelineError::MissingArtifact(_)), "{err}");
    }
}

//! Flat `key=value` run configuration with dotted sections.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed=0
//! motion.variant=concat
//! optim.lr=0.01
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use mfnet::backbone::{ArchConfig, MotionConfig, MOTION_STAGES};
use mfnet::data::{AugmentSpec, MotionProgram, Normalization, SyntheticSpec, CHANNELS};
use mfnet::motion::{DirectionSet, FusionVariant};
use mfnet::tensor::LrSchedule;
use mfnet::tsn::{InputPipeline, TrainOptions};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Generated in memory from the synthetic spec.
    Synthetic,
    /// `<data.path>/train` and `<data.path>/val` frame folders.
    Folder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub image_height: usize,
    pub image_width: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub dropout_keep: f64,

    pub motion_variant: Option<FusionVariant>,
    pub motion_reduction: usize,
    pub motion_directions: DirectionSet,
    /// Stages (1-based) followed by a motion block.
    pub motion_stages: Vec<usize>,

    pub k_train: usize,
    pub k_eval: usize,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub checkpoint_every: usize,

    pub data_source: DataSource,
    pub data_path: PathBuf,
    pub count_per_class: usize,
    pub val_fraction: f64,
    pub noise: f64,
    pub num_frames: usize,
    pub workers: usize,

    pub scales: Vec<f32>,
    pub flip: bool,
    pub norm_mean: [f32; CHANNELS],
    pub norm_std: [f32; CHANNELS],

    pub eval_sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let aug = AugmentSpec::default();
        let norm = Normalization::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            image_height: arch.image_height,
            image_width: arch.image_width,
            stem_channels: arch.stem_channels,
            stage_channels: arch.stage_channels,
            blocks_per_stage: arch.blocks_per_stage,
            num_classes: arch.num_classes,
            dropout_keep: arch.dropout_keep,
            motion_variant: Some(FusionVariant::Concat),
            motion_reduction: 4,
            motion_directions: DirectionSet::default(),
            motion_stages: (1..=MOTION_STAGES).collect(),
            k_train: 5,
            k_eval: 5,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 16,
            epochs: 30,
            lr_step: 20,
            lr_factor: 0.1,
            checkpoint_every: 5,
            data_source: DataSource::Synthetic,
            data_path: PathBuf::from("data/synthetic"),
            count_per_class: 250,
            val_fraction: 0.2,
            noise: 0.02,
            num_frames: 16,
            workers: 0,
            scales: aug.scales,
            flip: aug.horizontal_flip,
            norm_mean: norm.mean,
            norm_std: norm.std,
            eval_sweep: Vec::new(),
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("{key}={value}: {what}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, "unparseable value"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_array<T: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items = parse_list::<T>(key, value)?;
    if items.len() != N {
        return Err(bad(key, value, &format!("expected {N} comma-separated values")));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "arch.image_height" => self.image_height = parse(key, v)?,
            "arch.image_width" => self.image_width = parse(key, v)?,
            "arch.stem_channels" => self.stem_channels = parse(key, v)?,
            "arch.stage_channels" => self.stage_channels = parse_array(key, v)?,
            "arch.blocks_per_stage" => self.blocks_per_stage = parse(key, v)?,
            "arch.num_classes" => self.num_classes = parse(key, v)?,
            "arch.dropout_keep" => self.dropout_keep = parse(key, v)?,
            "motion.variant" => {
                self.motion_variant = match v {
                    "off" | "none" => None,
                    other => Some(other.parse().map_err(|_| bad(key, v, "expected sum, concat or off"))?),
                }
            }
            "motion.reduction" => self.motion_reduction = parse(key, v)?,
            "motion.directions" => {
                self.motion_directions = v.parse().map_err(|e| bad(key, v, &format!("{e}")))?
            }
            "motion.stages" => self.motion_stages = parse_list(key, v)?,
            "sample.k_train" => self.k_train = parse(key, v)?,
            "sample.k_eval" => self.k_eval = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.momentum" => self.momentum = parse(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse(key, v)?,
            "optim.batch" => self.batch = parse(key, v)?,
            "optim.epochs" => self.epochs = parse(key, v)?,
            "optim.lr_step" => self.lr_step = parse(key, v)?,
            "optim.lr_factor" => self.lr_factor = parse(key, v)?,
            "optim.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data.source" => {
                self.data_source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "folder" => DataSource::Folder,
                    _ => return Err(bad(key, v, "expected synthetic or folder")),
                }
            }
            "data.path" => self.data_path = PathBuf::from(v),
            "data.count_per_class" => self.count_per_class = parse(key, v)?,
            "data.val_fraction" => self.val_fraction = parse(key, v)?,
            "data.noise" => self.noise = parse(key, v)?,
            "data.num_frames" => self.num_frames = parse(key, v)?,
            "data.workers" => self.workers = parse(key, v)?,
            "augment.scales" => self.scales = parse_list(key, v)?,
            "augment.flip" => self.flip = parse(key, v)?,
            "norm.mean" => self.norm_mean = parse_array(key, v)?,
            "norm.std" => self.norm_std = parse_array(key, v)?,
            "eval.sweep" => self.eval_sweep = parse_list(key, v)?,
            other => return Err(CliError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment string.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got '{assignment}'")))?;
        self.set(k, v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            config
                .set_assignment(line)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let variant = self.motion_variant.map_or("off".to_string(), |v| v.to_string());
        let source = match self.data_source {
            DataSource::Synthetic => "synthetic",
            DataSource::Folder => "folder",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("arch.image_height", self.image_height.to_string());
        kv("arch.image_width", self.image_width.to_string());
        kv("arch.stem_channels", self.stem_channels.to_string());
        kv("arch.stage_channels", join(&self.stage_channels));
        kv("arch.blocks_per_stage", self.blocks_per_stage.to_string());
        kv("arch.num_classes", self.num_classes.to_string());
        kv("arch.dropout_keep", self.dropout_keep.to_string());
        kv("motion.variant", variant);
        kv("motion.reduction", self.motion_reduction.to_string());
        kv("motion.directions", self.motion_directions.to_string());
        kv("motion.stages", join(&self.motion_stages));
        kv("sample.k_train", self.k_train.to_string());
        kv("sample.k_eval", self.k_eval.to_string());
        kv("optim.lr", self.lr.to_string());
        kv("optim.momentum", self.momentum.to_string());
        kv("optim.weight_decay", self.weight_decay.to_string());
        kv("optim.batch", self.batch.to_string());
        kv("optim.epochs", self.epochs.to_string());
        kv("optim.lr_step", self.lr_step.to_string());
        kv("optim.lr_factor", self.lr_factor.to_string());
        kv("optim.checkpoint_every", self.checkpoint_every.to_string());
        kv("data.source", source.to_string());
        kv("data.path", self.data_path.display().to_string());
        kv("data.count_per_class", self.count_per_class.to_string());
        kv("data.val_fraction", self.val_fraction.to_string());
        kv("data.noise", self.noise.to_string());
        kv("data.num_frames", self.num_frames.to_string());
        kv("data.workers", self.workers.to_string());
        kv("augment.scales", join(&self.scales));
        kv("augment.flip", self.flip.to_string());
        kv("norm.mean", join(&self.norm_mean));
        kv("norm.std", join(&self.norm_std));
        kv("eval.sweep", join(&self.eval_sweep));
        s
    }

    /// Text form without the settings that cannot change results (output
    /// location and worker count).
    pub fn canonical_text(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.workers = 0;
        canonical.to_text()
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn arch(&self) -> ArchConfig {
        let mut stages = [false; MOTION_STAGES];
        for &s in &self.motion_stages {
            if (1..=MOTION_STAGES).contains(&s) {
                stages[s - 1] = true;
            }
        }
        ArchConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            stem_channels: self.stem_channels,
            stage_channels: self.stage_channels,
            blocks_per_stage: self.blocks_per_stage,
            num_classes: self.num_classes,
            dropout_keep: self.dropout_keep,
            motion: MotionConfig {
                variant: self.motion_variant,
                reduction_factor: self.motion_reduction,
                directions: self.motion_directions.clone(),
                stages,
            },
            seed: self.seed,
            ..ArchConfig::default()
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_height: self.image_height,
            image_width: self.image_width,
            num_frames: self.num_frames,
            classes: MotionProgram::ALL.to_vec(),
            noise_std: self.noise,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self) -> InputPipeline {
        InputPipeline {
            augment: AugmentSpec {
                scales: self.scales.clone(),
                crop_height: self.image_height,
                crop_width: self.image_width,
                horizontal_flip: self.flip,
            },
            normalization: Normalization {
                mean: self.norm_mean,
                std: self.norm_std,
            },
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch,
            k: self.k_train,
            workers: self.workers,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            factor: self.lr_factor,
            step: self.lr_step,
        }
    }

    /// Catches inconsistent settings before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        let motion = self.arch().motion.enabled();
        if self.motion_stages.iter().any(|s| !(1..=MOTION_STAGES).contains(s)) {
            return Err(CliError::Config(format!(
                "motion.stages must name stages 1..={MOTION_STAGES}, got {:?}",
                self.motion_stages
            )));
        }
        if self.k_train == 0 || self.k_eval == 0 {
            return Err(CliError::Config("sample.k_train and sample.k_eval must be at least 1".into()));
        }
        if motion && (self.k_train < 2 || self.k_eval < 2) {
            return Err(CliError::Config(format!(
                "motion blocks need K >= 2 (k_train={}, k_eval={})",
                self.k_train, self.k_eval
            )));
        }
        if motion && self.eval_sweep.iter().any(|&k| k < 2) {
            return Err(CliError::Config("eval.sweep values must be >= 2 with motion blocks".into()));
        }
        if self.batch == 0 {
            return Err(CliError::Config("optim.batch must be at least 1".into()));
        }
        if self.count_per_class == 0 {
            return Err(CliError::Config("data.count_per_class must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::Config("data.val_fraction must lie in [0, 1)".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(CliError::Config("data.noise must be non-negative".into()));
        }
        let pipeline = self.pipeline();
        let left_right = self.data_source == DataSource::Synthetic;
        pipeline.augment.validate(left_right)?;
        pipeline.normalization.validate()?;
        if self.data_source == DataSource::Synthetic {
            self.synthetic().validate()?;
            if self.num_classes != MotionProgram::ALL.len() {
                return Err(CliError::Config(format!(
                    "synthetic data has {} classes, arch.num_classes={}",
                    MotionProgram::ALL.len(),
                    self.num_classes
                )));
            }
        }
        mfnet::tensor::SgdState::<f32>::new(&Default::default(), self.lr, self.momentum, self.weight_decay)?;
        Ok(())
    }
}

//! `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nl3d::ablation::AblationVariable;
use nl3d::data::{AugmentStrategy, FatigueSampling, SynthParams};
use nl3d::heads::{HeadKind, LossConfig};
use nl3d::model::{AttentionPosition, Backbone, InflationMode, ModelConfig};
use nl3d::train::TrainConfig;

/// Every accepted key, in the order `render` writes them.
pub const KEYS: &[&str] = &[
    "dataset.dir",
    "dataset.k",
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "train.patience",
    "train.total_iterations",
    "train.seed",
    "train.alpha",
    "train.max_epochs",
    "train.target_accuracy",
    "train.val_fraction",
    "model.input_size",
    "model.attention_position",
    "model.head",
    "model.inflation_mode",
    "model.width",
    "model.backbone",
    "augment.strategy",
    "cv.folds",
    "synth.videos",
    "synth.frames",
    "synth.noise",
    "synth.sampling",
    "synth.videos_per_subject",
    "ablate.variable",
    "ablate.values",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub dataset_dir: Option<PathBuf>,
    pub k: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub total_iterations: usize,
    /// Master seed for data generation, initialization, shuffling and augmentation.
    pub seed: u64,
    pub alpha: f32,
    pub max_epochs: Option<usize>,
    pub target_accuracy: Option<f32>,
    /// Share of videos held out for validation by `train`.
    pub val_fraction: f32,
    pub input_size: usize,
    pub attention: AttentionPosition,
    pub head: HeadKind,
    pub inflation_mode: InflationMode,
    pub width: usize,
    pub backbone: Backbone,
    pub augmentation: AugmentStrategy,
    pub folds: usize,
    pub synth_videos: usize,
    pub synth_frames: usize,
    pub synth_noise: f32,
    pub synth_sampling: FatigueSampling,
    pub synth_videos_per_subject: usize,
    pub ablate_variable: Option<AblationVariable>,
    pub ablate_values: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let synth = SynthParams::default();
        Self {
            dataset_dir: None,
            k: train.loss.k,
            lr: train.base_lr,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            patience: train.patience,
            total_iterations: train.total_iterations,
            seed: train.seed,
            alpha: train.loss.alpha,
            max_epochs: None,
            target_accuracy: None,
            val_fraction: 0.2,
            input_size: model.input_size,
            attention: model.attention,
            head: train.loss.head,
            inflation_mode: InflationMode::default(),
            width: model.base_width,
            backbone: model.backbone,
            augmentation: train.augmentation,
            folds: 5,
            synth_videos: synth.n_videos,
            synth_frames: synth.frames_per_video,
            synth_noise: synth.noise,
            synth_sampling: synth.sampling,
            synth_videos_per_subject: synth.videos_per_subject,
            ablate_variable: None,
            ablate_values: Vec::new(),
        }
    }
}

/// A config file problem, tied to a line when there is one.
#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub file: Option<PathBuf>,
    pub line: Option<usize>,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(file) = &self.file {
            write!(f, "{}: ", file.display())?;
        }
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| ConfigError {
                file: None,
                line: Some(line_no),
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("duplicate key {key:?} (first set on line {first})")));
            }
            seen.push((key.to_string(), line_no));
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate().map_err(|msg| ConfigError {
            file: None,
            line: None,
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: Some(path.to_path_buf()),
            line: None,
            msg: format!("cannot read: {e}"),
        })?;
        Self::parse_str(&text).map_err(|e| ConfigError {
            file: Some(path.to_path_buf()),
            ..e
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "dataset.dir" => self.dataset_dir = Some(PathBuf::from(v)),
            "dataset.k" => self.k = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.patience" => self.patience = parse(key, v)?,
            "train.total_iterations" => self.total_iterations = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.alpha" => self.alpha = parse(key, v)?,
            "train.max_epochs" => self.max_epochs = optional(key, v)?,
            "train.target_accuracy" => self.target_accuracy = optional(key, v)?,
            "train.val_fraction" => self.val_fraction = parse(key, v)?,
            "model.input_size" => self.input_size = parse(key, v)?,
            "model.attention_position" => self.attention = parse(key, v)?,
            "model.head" => self.head = parse(key, v)?,
            "model.inflation_mode" => self.inflation_mode = parse(key, v)?,
            "model.width" => self.width = parse(key, v)?,
            "model.backbone" => self.backbone = parse(key, v)?,
            "augment.strategy" => self.augmentation = parse(key, v)?,
            "cv.folds" => self.folds = parse(key, v)?,
            "synth.videos" => self.synth_videos = parse(key, v)?,
            "synth.frames" => self.synth_frames = parse(key, v)?,
            "synth.noise" => self.synth_noise = parse(key, v)?,
            "synth.sampling" => self.synth_sampling = parse(key, v)?,
            "synth.videos_per_subject" => self.synth_videos_per_subject = parse(key, v)?,
            "ablate.variable" => self.ablate_variable = Some(parse(key, v)?),
            "ablate.values" => {
                self.ablate_values = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        let checks: [(bool, &str); 6] = [
            (self.k >= 2, "dataset.k must be at least 2"),
            (self.alpha >= 0.0, "train.alpha must be nonnegative"),
            ((0.0..1.0).contains(&self.val_fraction), "train.val_fraction must lie in [0, 1)"),
            (self.width >= 1, "model.width must be positive"),
            (self.folds >= 2, "cv.folds must be at least 2"),
            (
                nl3d::model::SUPPORTED_INPUT_SIZES.contains(&self.input_size),
                "model.input_size must be 112 or 224",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(msg.to_string());
            }
        }
        self.train_config().validate().map_err(|e| e.to_string())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            k: self.k,
            head: self.head,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            base_width: self.width,
            backbone: self.backbone,
            attention: self.attention,
            head: self.loss(),
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            patience: self.patience,
            total_iterations: self.total_iterations,
            loss: self.loss(),
            seed: self.seed,
            augmentation: self.augmentation,
            target_train_accuracy: self.target_accuracy,
            max_epochs: self.max_epochs,
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            n_videos: self.synth_videos,
            frames_per_video: self.synth_frames,
            image_size: self.input_size,
            noise: self.synth_noise,
            seed: self.seed,
            k: self.k,
            sampling: self.synth_sampling,
            videos_per_subject: self.synth_videos_per_subject,
            ..SynthParams::default()
        }
    }

    /// The resolved configuration in the file format, one line per key.
    pub fn render(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let values = [
            opt(self.dataset_dir.as_ref().map(|p| p.display().to_string())),
            self.k.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.batch_size.to_string(),
            self.patience.to_string(),
            self.total_iterations.to_string(),
            self.seed.to_string(),
            self.alpha.to_string(),
            opt(self.max_epochs.map(|v| v.to_string())),
            opt(self.target_accuracy.map(|v| v.to_string())),
            self.val_fraction.to_string(),
            self.input_size.to_string(),
            self.attention.to_string(),
            self.head.to_string(),
            self.inflation_mode.to_string(),
            self.width.to_string(),
            self.backbone.to_string(),
            self.augmentation.to_string(),
            self.folds.to_string(),
            self.synth_videos.to_string(),
            self.synth_frames.to_string(),
            self.synth_noise.to_string(),
            synth_sampling_name(self.synth_sampling).to_string(),
            self.synth_videos_per_subject.to_string(),
            opt(self.ablate_variable.map(|v| v.to_string())),
            self.ablate_values.join(","),
        ];
        KEYS.iter()
            .zip(values)
            .filter(|(k, v)| !(**k == "dataset.dir" && v == "none") && !(**k == "ablate.variable" && v == "none"))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn synth_sampling_name(s: FatigueSampling) -> &'static str {
    match s {
        FatigueSampling::Uniform => "uniform",
        FatigueSampling::Extremes => "extremes",
    }
}

//! `key = value` job configuration. Blank lines and `#` comments are
//! ignored; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::classifier::ClassifierConfig;
use crate::dcgan::GanConfig;
use crate::error::{Error, Result};
use crate::imageproc::{MedianMode, PreprocessConfig};
use crate::pipeline::{ImageLoader, SplitFractions, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    None,
    Gan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobConfig {
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Run the full fundus chain when loading training images.
    pub preprocess_enabled: bool,
    /// `median` is rebuilt from `median_filter` and `median_window`.
    pub preprocess: PreprocessConfig,
    pub median_filter: bool,
    pub median_window: usize,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub gan: GanConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub split: SplitFractions,
    pub injection: Injection,
    pub inject_fraction: f64,
    /// Holds one `gan_{class dir}.drnet` per minority class.
    pub gan_dir: Option<PathBuf>,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            data_root: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            preprocess_enabled: true,
            preprocess: PreprocessConfig::default(),
            median_filter: false,
            median_window: 31,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            gan: GanConfig::default(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            split: SplitFractions::default(),
            injection: Injection::None,
            inject_fraction: 0.5,
            gan_dir: None,
        }
    }
}

/// Every accepted key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.root", ""),
    ("output.dir", "out"),
    ("seed", "0"),
    ("preprocess.enabled", "true"),
    ("preprocess.crop_threshold", "10"),
    ("preprocess.median", "subtract"),
    ("preprocess.median_window", "31"),
    ("preprocess.gamma", "1.2"),
    ("preprocess.clahe_tiles_x", "8"),
    ("preprocess.clahe_tiles_y", "8"),
    ("preprocess.clahe_clip", "2"),
    ("preprocess.size", "224"),
    ("augment.enabled", "true"),
    ("augment.rotation", "20"),
    ("augment.shift", "0.2"),
    ("augment.shear", "10"),
    ("augment.zoom", "0.2"),
    ("augment.hflip", "true"),
    ("augment.brightness_min", "0.8"),
    ("augment.brightness_max", "1.2"),
    ("gan.latent_dim", "100"),
    ("gan.image_size", "128"),
    ("gan.batch_size", "4"),
    ("gan.epochs", "10"),
    ("gan.steps_per_epoch", "3750"),
    ("gan.learning_rate", "0.0002"),
    ("gan.beta1", "0.5"),
    ("gan.base_channels", "32"),
    ("classifier.stem_channels", "64"),
    ("classifier.widths", "64,128,256"),
    ("classifier.fc", "512"),
    ("classifier.input_size", "224"),
    ("train.epochs", "50"),
    ("train.batch_size", "32"),
    ("train.learning_rate", "0.001"),
    ("train.beta1", "0.9"),
    ("train.patience", "15"),
    ("train.inject", "none"),
    ("train.inject_fraction", "0.5"),
    ("train.gan_dir", ""),
    ("split.train", "0.8"),
    ("split.val", "0.1"),
    ("split.test", "0.1"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl JobConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        let mut config = JobConfig::default();
        for (key, value) in &entries {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.preprocess;
        let a = &mut self.augment;
        let g = &mut self.gan;
        let c = &mut self.classifier;
        let t = &mut self.train;
        match key {
            "data.root" => self.data_root = optional_path(value),
            "output.dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "preprocess.enabled" => self.preprocess_enabled = parse_bool(key, value)?,
            "preprocess.crop_threshold" => p.crop_threshold = parse(key, value)?,
            "preprocess.median" => {
                self.median_filter = match value {
                    "subtract" => false,
                    "filter" => true,
                    _ => return Err(Error::Config(format!("`{key}`: expected subtract or filter, got `{value}`"))),
                }
            }
            "preprocess.median_window" => self.median_window = parse(key, value)?,
            "preprocess.gamma" => p.gamma = parse(key, value)?,
            "preprocess.clahe_tiles_x" => p.clahe_tiles.0 = parse(key, value)?,
            "preprocess.clahe_tiles_y" => p.clahe_tiles.1 = parse(key, value)?,
            "preprocess.clahe_clip" => p.clahe_clip = parse(key, value)?,
            "preprocess.size" => p.size = parse(key, value)?,
            "augment.enabled" => self.augment_enabled = parse_bool(key, value)?,
            "augment.rotation" => a.rotation_max = parse(key, value)?,
            "augment.shift" => a.shift_max = parse(key, value)?,
            "augment.shear" => a.shear_max = parse(key, value)?,
            "augment.zoom" => a.zoom_max = parse(key, value)?,
            "augment.hflip" => a.hflip = parse_bool(key, value)?,
            "augment.brightness_min" => a.brightness_range.0 = parse(key, value)?,
            "augment.brightness_max" => a.brightness_range.1 = parse(key, value)?,
            "gan.latent_dim" => g.latent_dim = parse(key, value)?,
            "gan.image_size" => g.image_size = parse(key, value)?,
            "gan.batch_size" => g.batch_size = parse(key, value)?,
            "gan.epochs" => g.epochs = parse(key, value)?,
            "gan.steps_per_epoch" => g.steps_per_epoch = parse(key, value)?,
            "gan.learning_rate" => g.learning_rate = parse(key, value)?,
            "gan.beta1" => g.beta1 = parse(key, value)?,
            "gan.base_channels" => g.base_channels = parse(key, value)?,
            "classifier.stem_channels" => c.stem_channels = parse(key, value)?,
            "classifier.widths" => c.widths = parse_list(key, value)?,
            "classifier.fc" => c.fc = parse_list(key, value)?,
            "classifier.input_size" => c.input_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.inject" => {
                self.injection = match value {
                    "none" => Injection::None,
                    "gan" => Injection::Gan,
                    _ => return Err(Error::Config(format!("`{key}`: expected none or gan, got `{value}`"))),
                }
            }
            "train.inject_fraction" => self.inject_fraction = parse(key, value)?,
            "train.gan_dir" => self.gan_dir = optional_path(value),
            "split.train" => self.split.train = parse(key, value)?,
            "split.val" => self.split.val = parse(key, value)?,
            "split.test" => self.split.test = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        self.preprocess.median =
            if self.median_filter { MedianMode::Filter } else { MedianMode::Subtract { window: self.median_window } };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.gan_config().validate()?;
        self.train_config().validate()?;
        let SplitFractions { train, val, test } = self.split;
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {}", train + val + test)));
        }
        if self.preprocess.size == 0 || self.preprocess.gamma <= 0.0 {
            return Err(Error::Config("preprocess.size and preprocess.gamma must be positive".into()));
        }
        if !(self.inject_fraction > 0.0 && self.inject_fraction.is_finite()) {
            return Err(Error::Config(format!("train.inject_fraction must be positive, got {}", self.inject_fraction)));
        }
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if self.augment_enabled {
            self.augment.clone()
        } else {
            AugmentConfig::none()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { augment: self.augment_config(), seed: self.seed, ..self.train.clone() }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig { seed: self.seed, ..self.gan.clone() }
    }

    /// Loader producing `size`×`size` inputs.
    pub fn loader(&self, size: usize) -> ImageLoader {
        if self.preprocess_enabled {
            ImageLoader::Preprocess(PreprocessConfig { size, ..self.preprocess.clone() })
        } else {
            ImageLoader::Plain { size }
        }
    }

    /// The resolved configuration in `key = value` form.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let (p, a, g, c, t) = (&self.preprocess, &self.augment, &self.gan, &self.classifier, &self.train);
        let values: Vec<String> = vec![
            path(&self.data_root),
            self.output_dir.display().to_string(),
            self.seed.to_string(),
            self.preprocess_enabled.to_string(),
            p.crop_threshold.to_string(),
            if self.median_filter { "filter" } else { "subtract" }.to_string(),
            self.median_window.to_string(),
            p.gamma.to_string(),
            p.clahe_tiles.0.to_string(),
            p.clahe_tiles.1.to_string(),
            p.clahe_clip.to_string(),
            p.size.to_string(),
            self.augment_enabled.to_string(),
            a.rotation_max.to_string(),
            a.shift_max.to_string(),
            a.shear_max.to_string(),
            a.zoom_max.to_string(),
            a.hflip.to_string(),
            a.brightness_range.0.to_string(),
            a.brightness_range.1.to_string(),
            g.latent_dim.to_string(),
            g.image_size.to_string(),
            g.batch_size.to_string(),
            g.epochs.to_string(),
            g.steps_per_epoch.to_string(),
            g.learning_rate.to_string(),
            g.beta1.to_string(),
            g.base_channels.to_string(),
            c.stem_channels.to_string(),
            list(&c.widths),
            list(&c.fc),
            c.input_size.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.beta1.to_string(),
            t.patience.to_string(),
            match self.injection {
                Injection::None => "none",
                Injection::Gan => "gan",
            }
            .to_string(),
            self.inject_fraction.to_string(),
            path(&self.gan_dir),
            self.split.train.to_string(),
            self.split.val.to_string(),
            self.split.test.to_string(),
        ];
        KEYS.iter().zip(values).map(|((k, _), v)| format!("{k} = {v}\n")).collect()
    }
}

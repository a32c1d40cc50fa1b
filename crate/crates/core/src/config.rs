//! Line-oriented `key = value` experiment configuration.
//!
//! One file carries both the model/training keys and the data-generation
//! keys. `#` starts a comment; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Switches that remove one component of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// Replace the relation extractor with identity followed by batch norm.
    pub no_jre: bool,
    /// Run the initializer on every frame instead of propagating.
    pub no_jrpsp: bool,
    /// Skip initializer pretraining and keep its head at random init.
    pub no_init: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "no_jre" => a.no_jre = true,
            "no_jrpsp" => a.no_jrpsp = true,
            "no_init" => a.no_init = true,
            "none" | "full" => {}
            other => return Err(Error::Config(format!("unknown ablation '{other}'"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.no_jre, self.no_jrpsp, self.no_init) {
            (false, false, false) => "full",
            (true, false, false) => "no_jre",
            (false, true, false) => "no_jrpsp",
            (false, false, true) => "no_init",
            _ => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub joints: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Gaussian width of target heatmaps, in heatmap cells.
    pub sigma: f64,
    pub feature_channels: usize,
    pub channels: usize,
    /// Conv layers in the pose-semantics distiller (4, or 3 for the
    /// shallower variant).
    pub distill_convs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Keep the initializer (trunk and head) fixed during sequence training.
    pub freeze_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 13,
            frames: 5,
            height: 64,
            width: 64,
            stride: 4,
            sigma: 2.0,
            feature_channels: 32,
            channels: 32,
            distill_convs: 4,
            lr: 0.0005,
            lr_decay_epochs: vec![8, 15],
            lr_decay_factor: 0.1,
            epochs: 30,
            pretrain_epochs: 5,
            pretrain_lr: 0.001,
            batch_size: 8,
            seed: 7,
            ablation: Ablation::default(),
            freeze_init: false,
        }
    }
}

impl ModelConfig {
    pub fn heatmap_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn heatmap_width(&self) -> usize {
        self.width / self.stride
    }

    /// Learning rate for a 0-based epoch under the step schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.joints == 0 {
            return fail("joints must be positive".into());
        }
        if self.frames < 2 {
            return fail(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.stride == 0 || !self.height.is_multiple_of(8 * self.stride) || !self.width.is_multiple_of(8 * self.stride) {
            return fail(format!(
                "height {} and width {} must be multiples of 8 * stride ({})",
                self.height, self.width, self.stride
            ));
        }
        // The trunk reaches stride 4 with two 2x2 pools.
        if self.stride != 4 {
            return fail(format!("stride must be 4, got {}", self.stride));
        }
        if !(self.sigma > 0.0) {
            return fail("sigma must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.feature_channels == 0 || self.channels == 0 {
            return fail("batch_size and channel counts must be positive".into());
        }
        // the template filters the next frame's features channel by channel
        if self.channels != self.feature_channels {
            return fail(format!(
                "channels ({}) must equal feature_channels ({})",
                self.channels, self.feature_channels
            ));
        }
        if !(3..=4).contains(&self.distill_convs) {
            return fail(format!("distill_convs must be 3 or 4, got {}", self.distill_convs));
        }
        Ok(())
    }
}

/// Synthetic clip generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub data_seed: u64,
    pub occlude_rate: f64,
    /// Pixel length of one skeleton unit (the body is about 0.9 units tall).
    pub scale_min: f64,
    pub scale_max: f64,
    /// Upper bound of each joint's oscillation rate, radians per frame.
    pub angular_speed: f64,
    /// Upper bound of root translation, pixels per frame.
    pub root_speed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            data_seed: 1,
            occlude_rate: 0.0,
            scale_min: 40.0,
            scale_max: 50.0,
            angular_speed: 0.25,
            root_speed: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occlude_rate) {
            return Err(Error::Config("occlude_rate must lie in [0, 1]".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_max >= self.scale_min) {
            return Err(Error::Config("need 0 < scale_min <= scale_max".into()));
        }
        if !(self.angular_speed >= 0.0 && self.root_speed >= 0.0) {
            return Err(Error::Config("speeds must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}' expects true or false, got '{value}'"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "joints" => m.joints = parse(key, value)?,
            "frames" => m.frames = parse(key, value)?,
            "height" => m.height = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "stride" => m.stride = parse(key, value)?,
            "sigma" => m.sigma = parse(key, value)?,
            "feature_channels" => m.feature_channels = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "distill_convs" => m.distill_convs = parse(key, value)?,
            "lr" => m.lr = parse(key, value)?,
            "lr_decay_epochs" => {
                m.lr_decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_decay_factor" => m.lr_decay_factor = parse(key, value)?,
            "epochs" => m.epochs = parse(key, value)?,
            "pretrain_epochs" => m.pretrain_epochs = parse(key, value)?,
            "pretrain_lr" => m.pretrain_lr = parse(key, value)?,
            "batch_size" => m.batch_size = parse(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "no_jre" => m.ablation.no_jre = parse_bool(key, value)?,
            "no_jrpsp" => m.ablation.no_jrpsp = parse_bool(key, value)?,
            "no_init" => m.ablation.no_init = parse_bool(key, value)?,
            "freeze_init" => m.freeze_init = parse_bool(key, value)?,
            "samples" => d.samples = parse(key, value)?,
            "data_seed" => d.data_seed = parse(key, value)?,
            "occlude_rate" => d.occlude_rate = parse(key, value)?,
            "scale_min" => d.scale_min = parse(key, value)?,
            "scale_max" => d.scale_max = parse(key, value)?,
            "angular_speed" => d.angular_speed = parse(key, value)?,
            "root_speed" => d.root_speed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let decay: Vec<String> = m.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("joints", m.joints.to_string());
        kv("frames", m.frames.to_string());
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("stride", m.stride.to_string());
        kv("sigma", m.sigma.to_string());
        kv("feature_channels", m.feature_channels.to_string());
        kv("channels", m.channels.to_string());
        kv("distill_convs", m.distill_convs.to_string());
        kv("lr", m.lr.to_string());
        kv("lr_decay_epochs", decay.join(","));
        kv("lr_decay_factor", m.lr_decay_factor.to_string());
        kv("epochs", m.epochs.to_string());
        kv("pretrain_epochs", m.pretrain_epochs.to_string());
        kv("pretrain_lr", m.pretrain_lr.to_string());
        kv("batch_size", m.batch_size.to_string());
        kv("seed", m.seed.to_string());
        kv("no_jre", m.ablation.no_jre.to_string());
        kv("no_jrpsp", m.ablation.no_jrpsp.to_string());
        kv("no_init", m.ablation.no_init.to_string());
        kv("freeze_init", m.freeze_init.to_string());
        kv("samples", d.samples.to_string());
        kv("data_seed", d.data_seed.to_string());
        kv("occlude_rate", d.occlude_rate.to_string());
        kv("scale_min", d.scale_min.to_string());
        kv("scale_max", d.scale_max.to_string());
        kv("angular_speed", d.angular_speed.to_string());
        kv("root_speed", d.root_speed.to_string());
        s
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

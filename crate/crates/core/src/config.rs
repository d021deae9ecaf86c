//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! backbone.profile = tiny
//! model.width = 32
//! train.lr = 1e-3
//! ```
//!
//! Every key is listed in [`KEYS`]. Unknown keys and malformed values are
//! rejected with [`DrrnetError::InvalidConfig`].

use std::path::{Path, PathBuf};

use crate::backbone::{BackboneConfig, Profile, PvtVariant};
use crate::data::DataConfig;
use crate::error::{DrrnetError, Result};
use crate::model::{Merge, ModelConfig};
use crate::pipeline::TrainConfig;

/// `(key, description)` for every accepted key.
pub const KEYS: &[(&str, &str)] = &[
    ("backbone.profile", "paper | tiny"),
    ("backbone.variant", "pyramid transformer size for the paper profile: b0 .. b5"),
    ("backbone.stage_channels", "four comma-separated widths of x1..x4 (tiny profile)"),
    ("backbone.weights", "optional weights file loaded into the backbone"),
    ("model.width", "working channel width C (even)"),
    ("model.ocm_merge", "cat | add: how x_i and the upsampled deeper global feature are merged"),
    ("model.mdm_merge", "cat | add: same for the local branch"),
    ("model.mmf_merge", "cat | add: how g_i and l_i are merged before grouping"),
    ("train.lr", "initial learning rate"),
    ("train.lr_decay", "multiplicative decay factor"),
    ("train.lr_step", "epochs between decays"),
    ("train.epochs", "number of epochs"),
    ("train.max_steps", "optional cap on optimizer steps (0 = none)"),
    ("train.batch_size", "batch size"),
    ("train.input_size", "square training resolution, divisible by 32"),
    ("train.seed", "seed for initialization, shuffling and augmentation"),
    ("train.checkpoint_dir", "directory receiving one checkpoint per epoch"),
    ("train.log_every", "steps between loss log lines"),
    ("data.root", "training set root directory"),
    ("data.images_subdir", "image subdirectory name"),
    ("data.gt_subdir", "mask subdirectory name"),
    ("data.hflip_prob", "horizontal flip probability"),
    ("data.crop_scale_min", "smallest random crop side as a fraction of the image side"),
    ("data.crop_scale_max", "largest random crop side fraction"),
    ("data.brightness", "max relative brightness change"),
    ("data.contrast", "max relative contrast change"),
    ("data.saturation", "max relative saturation change"),
    ("data.mean", "three comma-separated channel means"),
    ("data.std", "three comma-separated channel standard deviations"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn bad(key: &str, value: &str, why: &str) -> DrrnetError {
    DrrnetError::InvalidConfig(format!("{key} = {value}: {why}"))
}

fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

fn list<N: std::str::FromStr, const K: usize>(key: &str, value: &str) -> Result<[N; K]> {
    let parts: Vec<N> = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| bad(key, value, &format!("expected {K} values")))
}

fn join<N: std::fmt::Display>(xs: &[N]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn merge(key: &str, value: &str) -> Result<Merge> {
    match value {
        "cat" => Ok(Merge::Cat),
        "add" => Ok(Merge::Add),
        _ => Err(bad(key, value, "expected cat or add")),
    }
}

impl Config {
    /// Desk-scale defaults: tiny backbone, width 32.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            model: ModelConfig { width: 32, ..ModelConfig::default() },
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        // profile first so stage channel defaults follow it
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DrrnetError::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        entries.sort_by_key(|(k, _)| k != "backbone.profile");
        for (k, v) in entries {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DrrnetError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. Changing `backbone.profile` resets the stage widths to
    /// that profile's defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "backbone.profile" => {
                let profile = match v {
                    "paper" => Profile::Paper,
                    "tiny" => Profile::Tiny,
                    _ => return Err(bad(key, v, "expected paper or tiny")),
                };
                let weights = self.backbone.weights.take();
                self.backbone = match profile {
                    Profile::Paper => BackboneConfig::paper(self.backbone.variant),
                    Profile::Tiny => BackboneConfig::tiny(),
                };
                self.backbone.weights = weights;
            }
            "backbone.variant" => {
                let variant = PvtVariant::parse(v).ok_or_else(|| bad(key, v, "expected b0 .. b5"))?;
                self.backbone.variant = variant;
                if self.backbone.profile == Profile::Paper {
                    self.backbone.stage_channels = variant.dims();
                }
            }
            "backbone.stage_channels" => self.backbone.stage_channels = list(key, v)?,
            "backbone.weights" => {
                self.backbone.weights = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            "model.width" => self.model.width = num(key, v)?,
            "model.ocm_merge" => self.model.ocm_merge = merge(key, v)?,
            "model.mdm_merge" => self.model.mdm_merge = merge(key, v)?,
            "model.mmf_merge" => self.model.mmf_merge = merge(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = num(key, v)?,
            "train.lr_step" => self.train.lr_step = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.max_steps" => self.train.max_steps = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.input_size" => self.train.input_size = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.checkpoint_dir" => self.train.checkpoint_dir = PathBuf::from(v),
            "train.log_every" => self.train.log_every = num(key, v)?,
            "data.root" => self.data.root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.images_subdir" => self.data.images_subdir = v.to_string(),
            "data.gt_subdir" => self.data.gt_subdir = v.to_string(),
            "data.hflip_prob" => self.data.augment.hflip_prob = num(key, v)?,
            "data.crop_scale_min" => self.data.augment.crop_scale.0 = num(key, v)?,
            "data.crop_scale_max" => self.data.augment.crop_scale.1 = num(key, v)?,
            "data.brightness" => self.data.augment.brightness = num(key, v)?,
            "data.contrast" => self.data.augment.contrast = num(key, v)?,
            "data.saturation" => self.data.augment.saturation = num(key, v)?,
            "data.mean" => self.data.mean = list(key, v)?,
            "data.std" => self.data.std = list(key, v)?,
            _ => return Err(DrrnetError::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.augment.validate()?;
        if self.data.std.iter().any(|&s| s <= 0.0) {
            return Err(DrrnetError::InvalidConfig("data.std must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` restores an equal config.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let a = &d.augment;
        let mg = |x: Merge| match x {
            Merge::Cat => "cat",
            Merge::Add => "add",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let lines = [
            (
                "backbone.profile",
                match b.profile {
                    Profile::Paper => "paper".to_string(),
                    Profile::Tiny => "tiny".to_string(),
                },
            ),
            ("backbone.variant", b.variant.name().to_string()),
            ("backbone.stage_channels", join(&b.stage_channels)),
            ("backbone.weights", path(&b.weights)),
            ("model.width", m.width.to_string()),
            ("model.ocm_merge", mg(m.ocm_merge).into()),
            ("model.mdm_merge", mg(m.mdm_merge).into()),
            ("model.mmf_merge", mg(m.mmf_merge).into()),
            ("train.lr", format!("{:e}", t.lr)),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.lr_step", t.lr_step.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.input_size", t.input_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_dir", t.checkpoint_dir.display().to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("data.root", path(&d.root)),
            ("data.images_subdir", d.images_subdir.clone()),
            ("data.gt_subdir", d.gt_subdir.clone()),
            ("data.hflip_prob", a.hflip_prob.to_string()),
            ("data.crop_scale_min", a.crop_scale.0.to_string()),
            ("data.crop_scale_max", a.crop_scale.1.to_string()),
            ("data.brightness", a.brightness.to_string()),
            ("data.contrast", a.contrast.to_string()),
            ("data.saturation", a.saturation.to_string()),
            ("data.mean", join(&d.mean)),
            ("data.std", join(&d.std)),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

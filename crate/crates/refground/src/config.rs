//! Run configuration: a flat `section.key = value` text format with typed,
//! strictly validated keys, deterministic canonical rendering, and a stable
//! hash recorded in every output.

use crate::data::{Flavor, GenConfig, Split};
use crate::grounder::{LossWeights, ModelDims};
use crate::training::{FitConfig, LrSchedule};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,

    // model
    pub image_size: usize,
    pub image_channels: usize,
    pub coord_channels: bool,
    pub channels: Vec<usize>,
    pub d_w: usize,
    pub hidden: usize,
    pub d_a: usize,
    pub n_attr: usize,
    pub t_max: usize,

    // loss
    pub loss: LossWeights,

    // train
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub momentum: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub eta: f64,
    pub freeze_backbone: bool,

    // data
    pub flavor: Flavor,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub small_extent: (usize, usize),
    pub large_extent: (usize, usize),
    pub expressions_per_referent: usize,
    pub spatial_margin: f64,

    // bench
    pub bench_warmup: usize,
    pub bench_n: usize,
}

/// Desk profile: trains on CPU in minutes while keeping the grid-of-regions
/// structure.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            deterministic: true,
            threads: 1,
            image_size: 64,
            image_channels: 3,
            coord_channels: true,
            channels: vec![8, 16, 64],
            d_w: 12,
            hidden: 32,
            d_a: 64,
            n_attr: 50,
            t_max: 8,
            loss: LossWeights::default(),
            lr: 1e-3,
            lr_decay: 0.8,
            lr_interval: 5,
            momentum: 0.9,
            patience: 10,
            max_epochs: 60,
            eta: 0.5,
            freeze_backbone: false,
            flavor: Flavor::Loc,
            train_scenes: 2000,
            val_scenes: 300,
            test_scenes: 300,
            min_objects: 1,
            max_objects: 4,
            small_extent: (12, 17),
            large_extent: (20, 28),
            expressions_per_referent: 2,
            spatial_margin: 6.0,
            bench_warmup: 10,
            bench_n: 100,
        }
    }
}

impl RunConfig {
    /// Reference-scale profile (13x13 grid over 416x416 inputs, the full
    /// dimensions). Provided for completeness; far too slow to train here.
    pub fn paper_profile() -> Self {
        RunConfig {
            image_size: 416,
            channels: vec![16, 32, 64, 128, 1024],
            d_w: 3072,
            hidden: 512,
            d_a: 1024,
            n_attr: 50,
            t_max: 15,
            small_extent: (60, 100),
            large_extent: (120, 180),
            ..RunConfig::default()
        }
    }

    pub fn grid_s(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn model_dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            image_size: self.image_size,
            image_channels: self.image_channels,
            coord_channels: self.coord_channels,
            backbone_channels: self.channels.clone(),
            d_w: self.d_w,
            hidden: self.hidden,
            d_a: self.d_a,
            n_attr: self.n_attr,
            t_max: self.t_max,
            vocab_size,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            canvas: self.image_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            small_extent: self.small_extent,
            large_extent: self.large_extent,
            flavor: self.flavor,
            expressions_per_referent: self.expressions_per_referent,
            spatial_margin: self.spatial_margin,
        }
    }

    pub fn scene_counts(&self) -> BTreeMap<Split, usize> {
        [
            (Split::Train, self.train_scenes),
            (Split::Val, self.val_scenes),
            (Split::Test, self.test_scenes),
        ]
        .into()
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            weights: self.loss,
            schedule: LrSchedule {
                initial: self.lr,
                decay: self.lr_decay,
                interval: self.lr_interval,
            },
            momentum: self.momentum,
            patience: self.patience,
            max_epochs: self.max_epochs,
            eta: self.eta,
            freeze_backbone: self.freeze_backbone,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stride = 1usize
            .checked_shl(self.channels.len() as u32)
            .ok_or_else(|| Error::Config("too many backbone blocks".into()))?;
        if self.channels.is_empty() || !self.image_size.is_multiple_of(stride) || self.grid_s() == 0 {
            return Err(Error::Config(format!(
                "model.image_size {} incompatible with {} stride-2 blocks",
                self.image_size,
                self.channels.len()
            )));
        }
        if !(0.0..1.0).contains(&self.eta) || self.eta == 0.0 {
            return Err(Error::Config("train.eta must lie in (0,1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be >= 1".into()));
        }
        let w = self.loss;
        if w.loc < 0.0 || w.conf < 0.0 || w.att < 0.0 || w.attr < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.min_objects < 1 || self.max_objects > 5 || self.min_objects > self.max_objects {
            return Err(Error::Config(
                "data.min_objects..data.max_objects must lie within 1..=5".into(),
            ));
        }
        if self.t_max == 0 || self.n_attr == 0 {
            return Err(Error::Config("model.t_max and model.n_attr must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.deterministic && self.threads != 1 {
            return Err(Error::Config(
                "deterministic mode forces threads = 1".into(),
            ));
        }
        Ok(())
    }

    /// Set one `section.key` from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
        }
        fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
            let parts: Vec<&str> = v.split(',').map(|s| s.trim()).collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!("key '{key}' wants 'lo,hi'")));
            }
            Ok((parse(key, parts[0])?, parse(key, parts[1])?))
        }
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "model.image_size" => self.image_size = parse(key, v)?,
            "model.image_channels" => self.image_channels = parse(key, v)?,
            "model.coord_channels" => self.coord_channels = parse(key, v)?,
            "model.channels" => {
                self.channels = v
                    .split(',')
                    .map(|s| parse::<usize>(key, s))
                    .collect::<Result<_>>()?;
            }
            "model.d_w" => self.d_w = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.d_a" => self.d_a = parse(key, v)?,
            "model.n_attr" => self.n_attr = parse(key, v)?,
            "model.t_max" => self.t_max = parse(key, v)?,
            "loss.loc" => self.loss.loc = parse(key, v)?,
            "loss.conf" => self.loss.conf = parse(key, v)?,
            "loss.att" => self.loss.att = parse(key, v)?,
            "loss.attr" => self.loss.attr = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.lr_decay" => self.lr_decay = parse(key, v)?,
            "train.lr_interval" => self.lr_interval = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "train.patience" => self.patience = parse(key, v)?,
            "train.max_epochs" => self.max_epochs = parse(key, v)?,
            "train.eta" => self.eta = parse(key, v)?,
            "train.freeze_backbone" => self.freeze_backbone = parse(key, v)?,
            "data.flavor" => {
                self.flavor = match v {
                    "loc" => Flavor::Loc,
                    "app" => Flavor::App,
                    other => {
                        return Err(Error::Config(format!(
                            "data.flavor must be 'loc' or 'app', got '{other}'"
                        )))
                    }
                }
            }
            "data.train_scenes" => self.train_scenes = parse(key, v)?,
            "data.val_scenes" => self.val_scenes = parse(key, v)?,
            "data.test_scenes" => self.test_scenes = parse(key, v)?,
            "data.min_objects" => self.min_objects = parse(key, v)?,
            "data.max_objects" => self.max_objects = parse(key, v)?,
            "data.small_extent" => self.small_extent = parse_pair(key, v)?,
            "data.large_extent" => self.large_extent = parse_pair(key, v)?,
            "data.expressions_per_referent" => self.expressions_per_referent = parse(key, v)?,
            "data.spatial_margin" => self.spatial_margin = parse(key, v)?,
            "bench.warmup" => self.bench_warmup = parse(key, v)?,
            "bench.n" => self.bench_n = parse(key, v)?,
            unknown => return Err(Error::Config(format!("unknown config key '{unknown}'"))),
        }
        Ok(())
    }

    /// Parse a config file: `key = value` lines, `#` comments, unknown keys
    /// rejected. The result is validated.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", i + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text rendering: every key in declaration order. Parsing the
    /// rendering reproduces the config exactly.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let channels = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "model.image_size = {}", self.image_size);
        let _ = writeln!(s, "model.image_channels = {}", self.image_channels);
        let _ = writeln!(s, "model.coord_channels = {}", self.coord_channels);
        let _ = writeln!(s, "model.channels = {channels}");
        let _ = writeln!(s, "model.d_w = {}", self.d_w);
        let _ = writeln!(s, "model.hidden = {}", self.hidden);
        let _ = writeln!(s, "model.d_a = {}", self.d_a);
        let _ = writeln!(s, "model.n_attr = {}", self.n_attr);
        let _ = writeln!(s, "model.t_max = {}", self.t_max);
        let _ = writeln!(s, "loss.loc = {}", self.loss.loc);
        let _ = writeln!(s, "loss.conf = {}", self.loss.conf);
        let _ = writeln!(s, "loss.att = {}", self.loss.att);
        let _ = writeln!(s, "loss.attr = {}", self.loss.attr);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "train.lr_interval = {}", self.lr_interval);
        let _ = writeln!(s, "train.momentum = {}", self.momentum);
        let _ = writeln!(s, "train.patience = {}", self.patience);
        let _ = writeln!(s, "train.max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "train.eta = {}", self.eta);
        let _ = writeln!(s, "train.freeze_backbone = {}", self.freeze_backbone);
        let _ = writeln!(
            s,
            "data.flavor = {}",
            match self.flavor {
                Flavor::Loc => "loc",
                Flavor::App => "app",
            }
        );
        let _ = writeln!(s, "data.train_scenes = {}", self.train_scenes);
        let _ = writeln!(s, "data.val_scenes = {}", self.val_scenes);
        let _ = writeln!(s, "data.test_scenes = {}", self.test_scenes);
        let _ = writeln!(s, "data.min_objects = {}", self.min_objects);
        let _ = writeln!(s, "data.max_objects = {}", self.max_objects);
        let _ = writeln!(
            s,
            "data.small_extent = {},{}",
            self.small_extent.0, self.small_extent.1
        );
        let _ = writeln!(
            s,
            "data.large_extent = {},{}",
            self.large_extent.0, self.large_extent.1
        );
        let _ = writeln!(
            s,
            "data.expressions_per_referent = {}",
            self.expressions_per_referent
        );
        let _ = writeln!(s, "data.spatial_margin = {}", self.spatial_margin);
        let _ = writeln!(s, "bench.warmup = {}", self.bench_warmup);
        let _ = writeln!(s, "bench.n = {}", self.bench_n);
        s
    }

    /// FNV-1a hash of the canonical rendering, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_canonical_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let cfg = RunConfig::default();
        let dir = std::env::temp_dir().join("refground-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("desk.cfg");
        std::fs::write(&path, cfg.to_canonical_string()).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(loaded.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("model.bogus", "3").is_err());
        assert!(cfg.set("train.lr", "not-a-number").is_err());
    }

    #[test]
    fn overrides_change_the_hash() {
        let mut a = RunConfig::default();
        let b = RunConfig::default();
        a.set("seed", "8").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let dir = std::env::temp_dir().join("refground-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sparse.cfg");
        std::fs::write(&path, "# comment\n\nseed = 99 # trailing\nmodel.channels = 4,8\nmodel.image_size = 16\n").unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.channels, vec![4, 8]);
        assert_eq!(cfg.grid_s(), 4);
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut cfg = RunConfig::default();
        cfg.set("model.image_size", "65").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.set("deterministic", "true").unwrap();
        cfg.set("threads", "4").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.set("loss.loc", "-1.0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_profile_grid_arithmetic() {
        let cfg = RunConfig::paper_profile();
        assert_eq!(cfg.grid_s(), 13);
        assert_eq!(cfg.grid_s() * cfg.grid_s(), 169);
        assert_eq!(cfg.image_size, 416);
        assert!(cfg.validate().is_ok());
    }
}

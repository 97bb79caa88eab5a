//! Flat `key=value` configuration (`network.*`, `train.*`, `feds.*`, `data.*`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::codec_networks::{NetworkConfig, Role};
use crate::error::{Error, Result};
use crate::feds_distillation::{FEDSWeights, LAMBDA_PRESETS};

use super::dataset::Augmentation;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "FEDS_SEED";

/// Parse UTF-8 `key=value` lines. Blank lines and `#` comments are skipped;
/// later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub batch_size: usize,
    /// Initial learning rate of the teacher and distillation stages; every
    /// schedule entry scales with it.
    pub base_lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 1e-4,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataOptions {
    pub dir: Option<PathBuf>,
    pub crop_size: usize,
    pub augmentations: BTreeSet<Augmentation>,
    pub rescale_target: Option<usize>,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            dir: None,
            crop_size: 384,
            augmentations: Augmentation::ALL.into_iter().collect(),
            rescale_target: Some(2000),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub feds: FEDSWeights,
    pub optimizer: OptimizerSpec,
    pub data: DataOptions,
    pub seed: u64,
    /// Toy-scale factor applied to iteration counts and LR drop points.
    pub scale: f64,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    pub fn preset(role: Role) -> Self {
        Self {
            network: NetworkConfig::preset(role),
            feds: FEDSWeights::default(),
            optimizer: OptimizerSpec::default(),
            data: DataOptions::default(),
            seed: 0,
            scale: 1.0,
            log_every: 1,
            checkpoint_every: None,
        }
    }

    /// Apply config keys on top of `self`.
    pub fn apply(mut self, map: &BTreeMap<String, String>) -> Result<Self> {
        let net_keys: BTreeMap<String, String> = map
            .iter()
            .filter(|(k, _)| k.starts_with("network."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if !net_keys.is_empty() {
            self.network = NetworkConfig::from_map(&net_keys, Some(self.network))?;
        }
        for (key, value) in map {
            let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got `{value}`"));
            let float = || value.parse::<f64>().map_err(|_| bad("a number"));
            let int = || value.parse::<u64>().map_err(|_| bad("a nonnegative integer"));
            let optional = |v: &str| matches!(v, "none" | "off" | "");
            match key.as_str() {
                k if k.starts_with("network.") => {}
                "train.batch_size" => self.optimizer.batch_size = int()? as usize,
                "train.lr" => self.optimizer.base_lr = float()?,
                "train.clip_norm" => {
                    self.optimizer.clip_norm = if optional(value) { None } else { Some(float()?) }
                }
                "train.seed" => self.seed = int()?,
                "train.scale" => self.scale = float()?,
                "train.log_every" => self.log_every = int()?,
                "train.checkpoint_every" => {
                    self.checkpoint_every = if optional(value) { None } else { Some(int()?) }
                }
                "feds.lambda" => self.feds.lambda = float()?,
                "feds.lambda_index" => {
                    let i = int()? as usize;
                    self.feds.lambda = *LAMBDA_PRESETS
                        .get(i)
                        .ok_or_else(|| bad(&format!("an index below {}", LAMBDA_PRESETS.len())))?;
                }
                "feds.alpha" => self.feds.alpha = float()?,
                "feds.beta" => self.feds.beta = float()?,
                "feds.gamma" => self.feds.gamma = float()?,
                "feds.distortion" => self.feds.distortion = value.parse()?,
                "data.dir" => self.data.dir = Some(PathBuf::from(value)),
                "data.crop_size" => self.data.crop_size = int()? as usize,
                "data.augment" => self.data.augmentations = Augmentation::parse_set(value)?,
                "data.rescale_target" => {
                    self.data.rescale_target = if optional(value) { None } else { Some(int()? as usize) }
                }
                other => return Err(Error::Config(format!("unknown key {other}"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// `FEDS_SEED`, when set, replaces the seed.
    pub fn apply_env(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer, got `{v}`")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.feds.validate()?;
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if !(self.optimizer.base_lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("train.scale must be positive".into()));
        }
        if self.data.crop_size == 0 || self.data.crop_size % 64 != 0 {
            return Err(Error::Config(format!(
                "data.crop_size must be a positive multiple of 64, got {}",
                self.data.crop_size
            )));
        }
        Ok(())
    }

    /// All settings as `key=value` pairs; `apply` on a preset restores them.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = self.network.to_pairs();
        let kv = |k: &str, s: String| (k.to_string(), s);
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        v.extend([
            kv("train.batch_size", self.optimizer.batch_size.to_string()),
            kv("train.lr", self.optimizer.base_lr.to_string()),
            kv("train.clip_norm", opt(self.optimizer.clip_norm.map(|c| c.to_string()))),
            kv("train.seed", self.seed.to_string()),
            kv("train.scale", self.scale.to_string()),
            kv("train.log_every", self.log_every.to_string()),
            kv("train.checkpoint_every", opt(self.checkpoint_every.map(|c| c.to_string()))),
            kv("feds.lambda", self.feds.lambda.to_string()),
            kv("feds.alpha", self.feds.alpha.to_string()),
            kv("feds.beta", self.feds.beta.to_string()),
            kv("feds.gamma", self.feds.gamma.to_string()),
            kv("feds.distortion", self.feds.distortion.to_string()),
            kv("data.crop_size", self.data.crop_size.to_string()),
            kv("data.augment", Augmentation::format_set(&self.data.augmentations)),
            kv("data.rescale_target", opt(self.data.rescale_target.map(|c| c.to_string()))),
        ]);
        if let Some(d) = &self.data.dir {
            v.push(kv("data.dir", d.display().to_string()));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_lines() {
        let m = parse_kv("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
        assert!(parse_kv("novalue").is_err());
    }

    #[test]
    fn overrides_and_round_trip() {
        let m = parse_kv(
            "network.m=20\nnetwork.n=16\ntrain.batch_size=2\nfeds.lambda_index=0\nfeds.beta=0.25\ndata.crop_size=64\ndata.augment=flip\n",
        )
        .unwrap();
        let c = TrainConfig::preset(Role::Student).apply(&m).unwrap();
        assert_eq!((c.network.m, c.network.n), (20, 16));
        assert_eq!(c.optimizer.batch_size, 2);
        assert_eq!(c.feds.lambda, 0.0016);
        assert_eq!(c.feds.beta, 0.25);
        assert_eq!(c.data.augmentations.len(), 1);
        let back: BTreeMap<_, _> = c.to_pairs().into_iter().collect();
        assert_eq!(TrainConfig::preset(Role::Student).apply(&back).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let p = TrainConfig::preset(Role::Student);
        assert!(p.clone().apply(&parse_kv("train.bogus=1").unwrap()).is_err());
        assert!(p.clone().apply(&parse_kv("train.batch_size=0").unwrap()).is_err());
        assert!(p.clone().apply(&parse_kv("data.crop_size=100").unwrap()).is_err());
        assert!(p.apply(&parse_kv("feds.lambda=abc").unwrap()).is_err());
    }
}

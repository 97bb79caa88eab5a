use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Role::Teacher),
            1 => Ok(Role::Student),
            other => Err(Error::Bitstream(format!("unknown role code {other}"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            other => Err(Error::Config(format!("unknown role `{other}`"))),
        }
    }
}

/// Architecture hyperparameters of one codec network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub role: Role,
    /// Channel width of the transform layers.
    pub n: usize,
    /// Latent channel count.
    pub m: usize,
    pub res_blocks_per_group: usize,
    pub num_res_groups: usize,
    pub attention_enabled: bool,
    pub window_size: usize,
    pub num_heads: usize,
    pub num_slices: usize,
    /// Width of the hyper-latent z.
    pub hyper_channels: usize,
    /// Hidden width of each slice network.
    pub slice_hidden: usize,
}

impl NetworkConfig {
    pub fn preset(role: Role) -> Self {
        match role {
            Role::Teacher => Self {
                role,
                n: 128,
                m: 400,
                res_blocks_per_group: 6,
                num_res_groups: 3,
                attention_enabled: true,
                window_size: 8,
                num_heads: 4,
                num_slices: 8,
                hyper_channels: 192,
                slice_hidden: 128,
            },
            Role::Student => Self {
                role,
                n: 128,
                m: 160,
                res_blocks_per_group: 1,
                num_res_groups: 3,
                attention_enabled: false,
                window_size: 8,
                num_heads: 4,
                num_slices: 5,
                hyper_channels: 192,
                slice_hidden: 128,
            },
        }
    }

    /// Small variant of a preset for desk-scale runs and tests. Keeps the
    /// role's slice count, attention switch and relative depth.
    pub fn toy(role: Role) -> Self {
        match role {
            Role::Teacher => Self {
                n: 8,
                m: 16,
                res_blocks_per_group: 2,
                window_size: 4,
                num_heads: 2,
                hyper_channels: 8,
                slice_hidden: 8,
                ..Self::preset(role)
            },
            Role::Student => Self {
                n: 8,
                m: 10,
                res_blocks_per_group: 1,
                window_size: 4,
                num_heads: 2,
                hyper_channels: 8,
                slice_hidden: 8,
                ..Self::preset(role)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("m", self.m),
            ("res_blocks_per_group", self.res_blocks_per_group),
            ("window_size", self.window_size),
            ("num_heads", self.num_heads),
            ("num_slices", self.num_slices),
            ("hyper_channels", self.hyper_channels),
            ("slice_hidden", self.slice_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("network.{name} must be positive")));
            }
        }
        if !(1..=3).contains(&self.num_res_groups) {
            return Err(Error::Config(format!(
                "network.num_res_groups must be in 1..=3 (one per down-sampling stage), got {}",
                self.num_res_groups
            )));
        }
        if self.num_slices > self.m {
            return Err(Error::Config(format!(
                "network.num_slices ({}) exceeds latent channels ({})",
                self.num_slices, self.m
            )));
        }
        if self.attention_enabled && self.n % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "network.n ({}) must be divisible by network.num_heads ({})",
                self.n, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("network.{k}"), v);
        vec![
            kv("role", self.role.to_string()),
            kv("n", self.n.to_string()),
            kv("m", self.m.to_string()),
            kv("res_blocks_per_group", self.res_blocks_per_group.to_string()),
            kv("num_res_groups", self.num_res_groups.to_string()),
            kv("attention_enabled", self.attention_enabled.to_string()),
            kv("window_size", self.window_size.to_string()),
            kv("num_heads", self.num_heads.to_string()),
            kv("num_slices", self.num_slices.to_string()),
            kv("hyper_channels", self.hyper_channels.to_string()),
            kv("slice_hidden", self.slice_hidden.to_string()),
        ]
    }

    /// Start from the role preset (or `base`) and apply `network.*` keys.
    pub fn from_map(map: &BTreeMap<String, String>, base: Option<NetworkConfig>) -> Result<Self> {
        let role = match map.get("network.role") {
            Some(r) => r.parse()?,
            None => base.as_ref().map(|b| b.role).unwrap_or(Role::Student),
        };
        let mut cfg = match base {
            Some(b) if b.role == role => b,
            _ => Self::preset(role),
        };
        for (key, value) in map.range("network.".to_string().."network/".to_string()) {
            let field = &key["network.".len()..];
            let num = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected integer, got `{value}`")))
            };
            match field {
                "role" => {}
                "n" => cfg.n = num()?,
                "m" => cfg.m = num()?,
                "res_blocks_per_group" => cfg.res_blocks_per_group = num()?,
                "num_res_groups" => cfg.num_res_groups = num()?,
                "attention_enabled" => {
                    cfg.attention_enabled = value
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: expected true/false, got `{value}`")))?
                }
                "window_size" => cfg.window_size = num()?,
                "num_heads" => cfg.num_heads = num()?,
                "num_slices" => cfg.num_slices = num()?,
                "hyper_channels" => cfg.hyper_channels = num()?,
                "slice_hidden" => cfg.slice_hidden = num()?,
                other => return Err(Error::Config(format!("unknown key network.{other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Preset for `role`; every field may be overridden afterwards.
pub fn build_network_config(role: Role) -> NetworkConfig {
    NetworkConfig::preset(role)
}

//! Checkpoint files: a `key=value` text block (configuration, stage,
//! iteration, RNG positions) followed by little-endian binary arrays
//! (named weights, then optimizer moments).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec_networks::{NetworkConfig, Role};
use crate::error::{Error, Result};
use crate::feds_distillation::Stage;
use crate::model::CodecModel;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: &str = "FEDS-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;
const END_OF_HEADER: &str = "end";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn encode(&self) -> String {
        let hex: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex}:{}:{}", self.word_pos, self.stream)
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed rng state `{s}`"));
        let mut parts = s.split(':');
        let (hex, pos, stream) = (
            parts.next().ok_or_else(bad)?,
            parts.next().ok_or_else(bad)?,
            parts.next().ok_or_else(bad)?,
        );
        if parts.next().is_some() || hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(Self {
            seed,
            word_pos: pos.parse().map_err(|_| bad())?,
            stream: stream.parse().map_err(|_| bad())?,
        })
    }
}

/// Everything needed to resume a stage or to run a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub stage: Stage,
    /// Completed optimizer steps within `stage`.
    pub iteration: u64,
    pub completed: bool,
    /// Whether the stage trained against a teacher.
    pub distillation: bool,
    pub weights: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<Adam<T>>,
    /// Named RNG positions, sorted by name.
    pub rngs: BTreeMap<String, RngState>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn role(&self) -> Role {
        self.config.network.role
    }

    /// Rebuild the model; fails with a shape error if `expected` disagrees
    /// with the stored architecture.
    pub fn model(&self, expected: Option<&NetworkConfig>) -> Result<CodecModel<T>> {
        let config = expected.unwrap_or(&self.config.network).clone();
        CodecModel::from_weights(config, &self.weights)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = format!("{CHECKPOINT_MAGIC}\nversion={CHECKPOINT_VERSION}\ndtype={}\n", T::DTYPE);
        text += &format!(
            "stage={}\niteration={}\ncompleted={}\ndistillation={}\n",
            self.stage, self.iteration, self.completed, self.distillation
        );
        for (k, v) in self.config.to_pairs() {
            text += &format!("config.{k}={v}\n");
        }
        for (name, state) in &self.rngs {
            text += &format!("rng.{name}={}\n", state.encode());
        }
        text += END_OF_HEADER;
        text.push('\n');

        let mut out = text.into_bytes();
        out.extend((self.weights.len() as u32).to_le_bytes());
        for (name, t) in &self.weights {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            write_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend(adam.step.to_le_bytes());
                for v in [adam.beta1, adam.beta2, adam.eps] {
                    out.extend(v.to_le_bytes());
                }
                for t in adam.m.iter().chain(&adam.v) {
                    write_tensor(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = format!("\n{END_OF_HEADER}\n");
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| Error::Checkpoint("missing end of text header".into()))?;
        let text = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Checkpoint("text header is not UTF-8".into()))?;
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut header = BTreeMap::new();
        let mut config = BTreeMap::new();
        let mut rngs = BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line `{line}`")))?;
            if let Some(key) = k.strip_prefix("config.") {
                config.insert(key.to_string(), v.to_string());
            } else if let Some(name) = k.strip_prefix("rng.") {
                rngs.insert(name.to_string(), RngState::decode(v)?);
            } else {
                header.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing header field `{k}`")))
        };
        let version: u32 = field("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let dtype = field("dtype")?.clone();
        if dtype != "f32" && dtype != "f64" {
            return Err(Error::Checkpoint(format!("unknown dtype `{dtype}`")));
        }
        let stage: Stage = field("stage")?.parse().map_err(|_| Error::Checkpoint("bad stage".into()))?;
        let iteration: u64 = field("iteration")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad iteration".into()))?;
        let completed: bool = field("completed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad completed flag".into()))?;
        let distillation: bool = field("distillation")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad distillation flag".into()))?;
        let role: Role = config
            .get("network.role")
            .ok_or_else(|| Error::Checkpoint("missing network role".into()))?
            .parse()?;
        let config = TrainConfig::preset(role).apply(&config)?;

        let mut r = Reader {
            bytes: &bytes[split + marker.len()..],
            pos: 0,
            dtype_bytes: if dtype == "f32" { 4 } else { 8 },
        };
        let count = r.u32()? as usize;
        let mut weights = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            weights.push((name, r.tensor::<T>()?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let mut f = [0.0; 3];
                for v in &mut f {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                let mut m = Vec::with_capacity(weights.len());
                let mut v = Vec::with_capacity(weights.len());
                for _ in 0..weights.len() {
                    m.push(r.tensor::<T>()?);
                }
                for _ in 0..weights.len() {
                    v.push(r.tensor::<T>()?);
                }
                for (i, (name, w)) in weights.iter().enumerate() {
                    if m[i].shape() != w.shape() || v[i].shape() != w.shape() {
                        return Err(Error::Shape(format!("optimizer state for {name} has the wrong shape")));
                    }
                }
                Some(Adam {
                    beta1: f[0],
                    beta2: f[1],
                    eps: f[2],
                    step,
                    m,
                    v,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != r.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint data",
                r.bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            stage,
            iteration,
            completed,
            distillation,
            weights,
            optimizer,
            rngs,
        })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    dtype_bytes: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Values stored in the other precision are converted.
    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let ndim = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(self.dtype_bytes).ok_or_else(|| {
            Error::Checkpoint("tensor size overflow".into())
        })?)?;
        let data = if self.dtype_bytes == T::BYTES {
            raw.chunks_exact(T::BYTES).map(T::read_le).collect()
        } else if self.dtype_bytes == 4 {
            raw.chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feds_distillation::Stage;
    use rand::RngCore;

    fn sample(role: Role) -> Checkpoint<f32> {
        let mut config = TrainConfig::preset(role);
        config.network = NetworkConfig::toy(role);
        config.data.crop_size = 64;
        let model = CodecModel::<f32>::new(config.network.clone(), 4).unwrap();
        let mut adam = Adam::new(&model.params);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u64();
        rng.set_stream(3);
        Checkpoint {
            config,
            stage: Stage::Teacher,
            iteration: 42,
            completed: false,
            distillation: false,
            weights: model.params.to_named(),
            optimizer: Some(adam),
            rngs: [("data".to_string(), RngState::capture(&rng))].into_iter().collect(),
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let ck = sample(Role::Teacher);
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut a = ck.rngs["data"].restore();
        let mut b = back.rngs["data"].restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn precision_conversion() {
        let ck = sample(Role::Student);
        let wide = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(wide.weights[0].1.data()[0] as f32, ck.weights[0].1.data()[0]);
    }

    #[test]
    fn version_truncation_and_role_errors() {
        let ck = sample(Role::Teacher);
        let bytes = ck.to_bytes();
        let mut bumped = bytes.clone();
        let at = bumped.windows(9).position(|w| w == b"version=1").unwrap();
        bumped[at + 8] = b'9';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bumped), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());

        let student = NetworkConfig::toy(Role::Student);
        assert!(matches!(ck.model(Some(&student)), Err(Error::Shape(_))));
        assert!(ck.model(None).is_ok());
    }
}

//! Named parameter storage and the basic layers built on it.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named set of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Rc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.tensors[id.0])
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| self.tensors[i].as_ref())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replace every tensor with the same-named tensor of `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in other {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: model shape {:?}, source shape {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = Rc::new(t.clone());
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| t.as_ref().clone()))
            .collect()
    }

    /// Bind every parameter into `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &Graph<T>, trainable: bool) -> Bound<T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf_rc(t.clone())
                } else {
                    graph.constant_rc(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// FNV-1a over names and raw little-endian values; used to prove weights were not touched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (_, name, t) in self.iter() {
            eat(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}

/// Parameters bound into one graph.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    #[inline]
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// `U(−1/√fan_in, 1/√fan_in)`, the usual default for conv and linear layers.
fn uniform_fan_in<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = uniform_fan_in(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Clone, Debug)]
pub struct Upsample2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Upsample2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel sees about cin·k²/4 taps.
        let fan = (cin * kernel * kernel / 4).max(1);
        let w = uniform_fan_in(&[cin, cout, kernel, kernel], fan, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        g.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), 2, self.pad, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = uniform_fan_in(&[fan_in, fan_out], fan_in, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    /// `x: [rows, fan_in]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        g.layer_norm_rows(x, p.var(self.gain), p.var(self.bias), T::lit(1e-5))
    }
}

pub const LEAKY: Activation = Activation::LeakyRelu(0.01);

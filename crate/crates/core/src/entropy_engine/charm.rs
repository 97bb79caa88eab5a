//! Channel-wise autoregressive prediction of per-slice Gaussian parameters.

use rand::Rng;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, LEAKY};
use crate::scalar::Scalar;

use super::likelihood::SIGMA_MIN;

/// Partition of the M latent channels into sequentially coded slices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceLayout {
    pub channels_per_slice: Vec<usize>,
}

impl SliceLayout {
    pub fn num_slices(&self) -> usize {
        self.channels_per_slice.len()
    }

    pub fn total(&self) -> usize {
        self.channels_per_slice.iter().sum()
    }

    /// First channel of slice `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.channels_per_slice[..i].iter().sum()
    }
}

/// Equal split of `m` channels; any remainder goes to the last slice.
pub fn slice_layout(m: usize, num_slices: usize) -> Result<SliceLayout> {
    if num_slices == 0 {
        return Err(Error::Config("num_slices must be ≥ 1".into()));
    }
    if num_slices > m {
        return Err(Error::Config(format!("{num_slices} slices exceed {m} channels")));
    }
    let base = m / num_slices;
    let mut channels_per_slice = vec![base; num_slices];
    channels_per_slice[num_slices - 1] += m - base * num_slices;
    Ok(SliceLayout { channels_per_slice })
}

/// Slice network e_i: [S_mean, S_scale, ŷ⁰..ŷ^{i−1}] → two conv3×3 → (μ_i, σ_i) heads.
#[derive(Clone, Debug)]
struct SliceNet {
    conv1: Conv2d,
    conv2: Conv2d,
    mean_head: Conv2d,
    scale_head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Charm {
    pub layout: SliceLayout,
    latent_channels: usize,
    nets: Vec<SliceNet>,
}

impl Charm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        layout: SliceLayout,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let m = layout.total();
        let nets = (0..layout.num_slices())
            .map(|i| {
                let cin = 2 * m + layout.offset(i);
                let cout = layout.channels_per_slice[i];
                let name = format!("charm.slice{i}");
                SliceNet {
                    conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, hidden, 3, 1, rng),
                    conv2: Conv2d::new(store, &format!("{name}.conv2"), hidden, hidden, 3, 1, rng),
                    mean_head: Conv2d::new(store, &format!("{name}.mean"), hidden, cout, 3, 1, rng),
                    scale_head: Conv2d::new(store, &format!("{name}.scale"), hidden, cout, 3, 1, rng),
                }
            })
            .collect();
        Self {
            layout,
            latent_channels: m,
            nets,
        }
    }

    pub fn num_slice_networks(&self) -> usize {
        self.nets.len()
    }

    /// Gaussian parameters of slice `i` from side information and the
    /// already-quantized slices `0..i` (in order). σ is clamped to ≥ 0.11.
    pub fn predict_slice<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Bound<T>,
        s_mean: &Var<T>,
        s_scale: &Var<T>,
        previous: &[Var<T>],
        i: usize,
    ) -> Result<(Var<T>, Var<T>)> {
        if i >= self.nets.len() {
            return Err(Error::Invalid(format!("slice index {i} out of range {}", self.nets.len())));
        }
        if previous.len() != i {
            return Err(Error::Invalid(format!(
                "slice {i} needs exactly {i} previously decoded slices, got {}",
                previous.len()
            )));
        }
        for (j, prev) in previous.iter().enumerate() {
            if prev.shape()[1] != self.layout.channels_per_slice[j] {
                return Err(Error::Invalid(format!(
                    "previous slice {j} has {} channels, layout expects {}",
                    prev.shape()[1],
                    self.layout.channels_per_slice[j]
                )));
            }
        }
        for side in [s_mean, s_scale] {
            if side.shape()[1] != self.latent_channels {
                return Err(Error::Shape(format!(
                    "side information has {} channels, expected {}",
                    side.shape()[1],
                    self.latent_channels
                )));
            }
        }
        let net = &self.nets[i];
        let mut inputs: Vec<&Var<T>> = vec![s_mean, s_scale];
        inputs.extend(previous.iter());
        let x = g.concat_channels(&inputs);
        let h = net.conv1.forward(g, p, &x);
        let h = g.activation(&h, LEAKY);
        let h = net.conv2.forward(g, p, &h);
        let h = g.activation(&h, LEAKY);
        let mu = net.mean_head.forward(g, p, &h);
        let s = net.scale_head.forward(g, p, &h);
        let s = g.activation(&s, Activation::Softplus);
        let sigma = g.lower_bound(&s, T::lit(SIGMA_MIN));
        Ok((mu, sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        assert_eq!(slice_layout(400, 8).unwrap().channels_per_slice, vec![50; 8]);
        assert_eq!(slice_layout(160, 5).unwrap().channels_per_slice, vec![32; 5]);
        assert_eq!(slice_layout(10, 3).unwrap().channels_per_slice, vec![3, 3, 4]);
        assert!(slice_layout(3, 4).is_err());
        assert!(slice_layout(3, 0).is_err());
    }
}

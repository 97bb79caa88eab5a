use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::likelihood::{gaussian_likelihood, rate_bits, GaussianParams};

/// Channels ordered by descending mean entropy, ties by ascending index.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEntropyRanking {
    pub mean_entropy: Vec<f64>,
    pub order: Vec<usize>,
}

impl ChannelEntropyRanking {
    pub fn from_mean_entropy(mean_entropy: Vec<f64>) -> Self {
        let order = sort_descending(&mean_entropy);
        Self { mean_entropy, order }
    }

    /// 0-based rank of every channel.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &c) in self.order.iter().enumerate() {
            ranks[c] = r;
        }
        ranks
    }
}

fn sort_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Per-element entropy map `−log₂ p` (`[n, c, h, w]`) and the channel ranking
/// over mean entropy. For batched input the mean runs over batch and space.
pub fn channel_entropy_profile<T: Scalar>(
    y_hat: &Tensor<T>,
    params: &GaussianParams<T>,
) -> Result<(Tensor<T>, ChannelEntropyRanking)> {
    let p = gaussian_likelihood(y_hat, params)?;
    let map = rate_bits(&p);
    let ranking = ChannelEntropyRanking::from_mean_entropy(channel_means(&map));
    Ok((map, ranking))
}

/// Mean of each channel of an NCHW tensor, over batch and spatial positions.
pub fn channel_means<T: Scalar>(map: &Tensor<T>) -> Vec<f64> {
    let (n, c, h, w) = map.dims4();
    let plane = h * w;
    let mut sums = vec![0.0f64; c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *s += map.data()[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let count = (n * plane) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

/// Indices of the `k` largest entries, descending, ties by ascending index.
pub fn rank_channels_topk(mean_entropy: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > mean_entropy.len() {
        return Err(Error::Invalid(format!(
            "top-k size {k} outside 1..={}",
            mean_entropy.len()
        )));
    }
    let mut order = sort_descending(mean_entropy);
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        assert_eq!(rank_channels_topk(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(rank_channels_topk(&[2.0, 2.0, 1.0], 1).unwrap(), vec![0]);
        assert_eq!(rank_channels_topk(&[1.0, 5.0, 5.0, 0.0], 4).unwrap(), vec![1, 2, 0, 3]);
        assert!(rank_channels_topk(&[1.0], 2).is_err());
        assert!(rank_channels_topk(&[1.0], 0).is_err());
    }

    #[test]
    fn channel_means_of_known_maps() {
        // Channel 0: p = 0.5 → 1 bit; channel 1: p = 1 → 0 bits; channel 2: {1, 2} bits.
        let p = Tensor::from_vec(&[1, 3, 2, 1], vec![0.5f64, 0.5, 1.0, 1.0, 0.5, 0.25]).unwrap();
        let means = channel_means(&rate_bits(&p));
        assert_eq!(means, vec![1.0, 0.0, 1.5]);
        let r = ChannelEntropyRanking::from_mean_entropy(means);
        assert_eq!(r.order, vec![2, 0, 1]);
        assert_eq!(r.ranks(), vec![1, 2, 0]);
    }
}

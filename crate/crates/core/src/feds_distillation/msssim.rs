//! Multi-scale structural similarity on the autograd graph.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW_SIZE: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Smallest image side accepted: the window must fit at the fourth scale.
pub const MS_SSIM_MIN_SIDE: usize = (WINDOW_SIZE - 1) * 16;

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid Gaussian filter. An axis shorter than the window is left
/// unfiltered.
fn blur<T: Scalar>(g: &Graph<T>, x: &Var<T>, win: &[T]) -> Var<T> {
    let mut h = x.clone();
    for axis in [2, 3] {
        if h.shape()[axis] >= win.len() {
            h = g.correlate_axis(&h, win, axis);
        }
    }
    h
}

/// Per-channel SSIM and contrast-structure means, each `[n, c]`.
fn ssim_terms<T: Scalar>(g: &Graph<T>, a: &Var<T>, b: &Var<T>, win: &[T]) -> (Var<T>, Var<T>) {
    let c1 = T::lit(K1 * K1);
    let c2 = T::lit(K2 * K2);
    let two = T::lit(2.0);
    let mu1 = blur(g, a, win);
    let mu2 = blur(g, b, win);
    let mu1_sq = g.mul(&mu1, &mu1);
    let mu2_sq = g.mul(&mu2, &mu2);
    let mu12 = g.mul(&mu1, &mu2);
    let s11 = g.sub(&blur(g, &g.mul(a, a), win), &mu1_sq);
    let s22 = g.sub(&blur(g, &g.mul(b, b), win), &mu2_sq);
    let s12 = g.sub(&blur(g, &g.mul(a, b), win), &mu12);
    let cs_num = g.add_scalar(&g.mul_scalar(&s12, two), c2);
    let cs_den = g.add_scalar(&g.add(&s11, &s22), c2);
    let cs_map = g.div(&cs_num, &cs_den);
    let l_num = g.add_scalar(&g.mul_scalar(&mu12, two), c1);
    let l_den = g.add_scalar(&g.add(&mu1_sq, &mu2_sq), c1);
    let ssim_map = g.mul(&g.div(&l_num, &l_den), &cs_map);
    (g.mean_spatial(&ssim_map), g.mean_spatial(&cs_map))
}

/// MS-SSIM of two `[n, c, H, W]` tensors with data range 1, averaged over
/// batch and channels. Negative per-scale terms are floored before the
/// weighted geometric mean.
pub fn ms_ssim_var<T: Scalar>(g: &Graph<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() || a.shape().len() != 4 {
        return Err(Error::Shape(format!("ms-ssim inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = (a.shape()[2], a.shape()[3]);
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(Error::Metric(format!(
            "MS-SSIM needs both sides ≥ {MS_SSIM_MIN_SIDE} px, got {h}×{w}"
        )));
    }
    let win: Vec<T> = gaussian_window(WINDOW_SIZE, WINDOW_SIGMA).into_iter().map(T::lit).collect();
    let floor = T::lit(1e-12);
    let levels = MS_SSIM_WEIGHTS.len();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut log_sum: Option<Var<T>> = None;
    for (i, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(g, &x, &y, &win);
        let term = if i + 1 < levels { cs } else { ssim };
        let lv = g.activation(&g.clamp_min(&term, floor), crate::autograd::Activation::Ln);
        let lv = g.mul_scalar(&lv, T::lit(weight));
        log_sum = Some(match log_sum {
            Some(acc) => g.add(&acc, &lv),
            None => lv,
        });
        if i + 1 < levels {
            x = g.avg_pool2(&x);
            y = g.avg_pool2(&y);
        }
    }
    let per = g.activation(&log_sum.expect("five scales"), crate::autograd::Activation::Exp);
    Ok(g.mean(&per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn identical_inputs_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::uniform(&[1, 3, 160, 170], 0.0, 1.0, &mut rng));
        let v = ms_ssim_var(&g, &x, &x).unwrap().item();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn small_inputs_rejected() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(&[1, 3, 159, 300]));
        assert!(matches!(ms_ssim_var(&g, &x, &x), Err(Error::Metric(_))));
    }
}

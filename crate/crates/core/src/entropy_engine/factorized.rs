use crate::autograd::{Graph, Var};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::likelihood::LIKELIHOOD_FLOOR;

/// Logistic components per channel.
pub const MIXTURE_COMPONENTS: usize = 3;
/// Half-width, in component scales, of the coded support.
const SUPPORT_SCALES: f64 = 16.0;
/// Largest coded support of one channel; values outside use the escape path.
pub const MAX_SUPPORT: i64 = 4096;

/// Per-channel learned density for the hyper-latent ẑ: a mixture of
/// logistics, so the CDF is monotone by construction.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    logits: ParamId,
    loc: ParamId,
    log_scale: ParamId,
}

impl FactorizedPrior {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let k = MIXTURE_COMPONENTS;
        let init_scales = [0.5f64, 2.0, 8.0];
        Self {
            channels,
            logits: store.add(format!("{name}.logits"), Tensor::zeros(&[channels, k])),
            loc: store.add(format!("{name}.loc"), Tensor::zeros(&[channels, k])),
            log_scale: store.add(
                format!("{name}.log_scale"),
                Tensor::from_fn(&[channels, k], |i| T::lit(init_scales[i % k].ln())),
            ),
        }
    }

    /// Probability of each element of `z_hat` (`[n, channels, h, w]`), clamped to `[1e-9, 1]`.
    pub fn likelihood<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, z_hat: &Var<T>) -> Var<T> {
        g.logistic_mixture_likelihood(
            z_hat,
            p.var(self.logits),
            p.var(self.loc),
            p.var(self.log_scale),
            T::lit(LIKELIHOOD_FLOOR),
        )
    }

    /// Mixture parameters of one channel as `(weight, loc, scale)` triples in f64.
    pub fn components<T: Scalar>(&self, store: &ParamStore<T>, channel: usize) -> Vec<(f64, f64, f64)> {
        let k = MIXTURE_COMPONENTS;
        let row = |id: ParamId| -> Vec<f64> {
            store.get(id).data()[channel * k..(channel + 1) * k]
                .iter()
                .map(|v| v.as_f64())
                .collect()
        };
        let logits = row(self.logits);
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let locs = row(self.loc);
        let scales = row(self.log_scale);
        (0..k).map(|j| (e[j] / s, locs[j], scales[j].exp())).collect()
    }

    /// Modeled CDF of one channel at `x`.
    pub fn cdf<T: Scalar>(&self, store: &ParamStore<T>, channel: usize, x: f64) -> f64 {
        self.components(store, channel)
            .iter()
            .map(|&(w, l, s)| w / (1.0 + (-(x - l) / s).exp()))
            .sum()
    }

    /// Integer support `[lo, hi]` that carries essentially all of a channel's mass.
    pub fn support<T: Scalar>(&self, store: &ParamStore<T>, channel: usize) -> (i64, i64) {
        let comps = self.components(store, channel);
        let lo = comps
            .iter()
            .map(|&(_, l, s)| l - SUPPORT_SCALES * s)
            .fold(f64::INFINITY, f64::min)
            .floor();
        let hi = comps
            .iter()
            .map(|&(_, l, s)| l + SUPPORT_SCALES * s)
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil();
        let (mut lo, mut hi) = (lo.max(-1e9) as i64, hi.min(1e9) as i64);
        if hi - lo + 1 > MAX_SUPPORT {
            let center = comps.iter().map(|&(w, l, _)| w * l).sum::<f64>().round() as i64;
            lo = center - MAX_SUPPORT / 2;
            hi = lo + MAX_SUPPORT - 1;
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior() -> (ParamStore<f64>, FactorizedPrior) {
        let mut store = ParamStore::new();
        let prior = FactorizedPrior::new(&mut store, "prior", 4);
        (store, prior)
    }

    fn probs(store: &ParamStore<f64>, prior: &FactorizedPrior, values: &[f64]) -> Vec<f64> {
        let g = Graph::inference();
        let p = store.bind(&g, false);
        let n = values.len();
        let z = Tensor::from_fn(&[1, 4, 1, n], |i| values[i % n]);
        prior.likelihood(&g, &p, &g.constant(z)).value().data()[..n].to_vec()
    }

    #[test]
    fn mass_sums_to_one_over_support() {
        let (store, prior) = prior();
        let (lo, hi) = prior.support(&store, 0);
        let values: Vec<f64> = (lo..=hi).map(|v| v as f64).collect();
        let total: f64 = probs(&store, &prior, &values).iter().sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn initial_mass_concentrated_near_zero() {
        let (store, prior) = prior();
        let p = probs(&store, &prior, &[0.0, 20.0, -20.0]);
        assert!(p[0] > p[1] && p[0] > p[2]);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cdf_monotone() {
        let (store, prior) = prior();
        let mut last = 0.0;
        for i in -400..400 {
            let c = prior.cdf(&store, 2, i as f64 * 0.1);
            assert!(c >= last);
            last = c;
        }
    }
}

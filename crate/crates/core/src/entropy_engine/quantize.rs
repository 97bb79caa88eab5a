use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Train,
    /// `round(v − μ) + μ`.
    Eval,
}

/// Where training-mode noise comes from.
pub enum Noise<'a> {
    Uniform(&'a mut dyn rand::RngCore),
    /// No perturbation; used for finite-difference checks.
    Off,
}

impl Noise<'_> {
    pub fn sample<T: Scalar>(&mut self, shape: &[usize]) -> Option<Tensor<T>> {
        match self {
            Noise::Uniform(rng) => Some(Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-0.5..0.5)))),
            Noise::Off => None,
        }
    }
}

/// Round half away from zero, matching `f64::round`.
#[inline]
pub fn round_residual<T: Scalar>(v: T, mu: T) -> T {
    (v - mu).round()
}

/// Quantize `v` on the graph. In eval mode no gradient flows.
pub fn quantize<T: Scalar>(g: &Graph<T>, v: &Var<T>, mu: Option<&Var<T>>, mode: QuantMode, noise: &mut Noise<'_>) -> Var<T> {
    match mode {
        QuantMode::Train => match noise.sample::<T>(v.shape()) {
            Some(u) => {
                let u = g.constant(u);
                g.add(v, &u)
            }
            None => v.clone(),
        },
        QuantMode::Eval => g.constant(quantize_eval(v.value(), mu.map(|m| m.value()))),
    }
}

/// `round(v − μ) + μ` elementwise (μ = 0 when absent).
pub fn quantize_eval<T: Scalar>(v: &Tensor<T>, mu: Option<&Tensor<T>>) -> Tensor<T> {
    match mu {
        Some(mu) => v.zip_map(mu, |a, m| round_residual(a, m) + m),
        None => v.map(|a| a.round()),
    }
}

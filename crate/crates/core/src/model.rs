//! A complete codec network: transforms, hyperprior, factorized prior and ChARM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::codec_networks::image::PAD_MULTIPLE;
use crate::codec_networks::{
    AnalysisTransform, FeatureTap, HyperAnalysis, HyperSynthesis, ImageBuffer, NetworkConfig, SynthesisTransform,
};
use crate::entropy_engine::{gaussian_likelihood_var, quantize, slice_layout, Charm, FactorizedPrior, Noise, QuantMode};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CodecModel<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub g_a: AnalysisTransform,
    pub g_s: SynthesisTransform,
    pub h_a: HyperAnalysis,
    pub h_s: HyperSynthesis,
    pub prior: FactorizedPrior,
    pub charm: Charm,
}

/// Everything one forward pass produces.
pub struct ModelOutput<T> {
    /// Reconstruction before clamping, `[n, 3, H, W]`.
    pub x_hat: Var<T>,
    pub y: Var<T>,
    pub y_hat: Var<T>,
    pub z: Var<T>,
    pub z_hat: Var<T>,
    pub taps: Vec<FeatureTap<T>>,
    pub y_likelihoods: Var<T>,
    pub z_likelihoods: Var<T>,
    pub mu: Var<T>,
    pub sigma: Var<T>,
}

impl<T: Scalar> ModelOutput<T> {
    /// `(R_y, R_z)` in bits per pixel, averaged over the batch.
    pub fn rates(&self, g: &Graph<T>) -> (Var<T>, Var<T>) {
        let s = self.x_hat.shape();
        let inv_pixels = T::one() / T::lit((s[0] * s[2] * s[3]) as f64);
        (
            g.mul_scalar(&g.neg_log2_sum(&self.y_likelihoods), inv_pixels),
            g.mul_scalar(&g.neg_log2_sum(&self.z_likelihoods), inv_pixels),
        )
    }
}

impl<T: Scalar> CodecModel<T> {
    /// Randomly initialized model; parameter creation order is fixed, so a
    /// seed fully determines the weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = slice_layout(config.m, config.num_slices)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g_a = AnalysisTransform::new(&mut params, &config, &mut rng);
        let g_s = SynthesisTransform::new(&mut params, &config, &mut rng);
        let h_a = HyperAnalysis::new(&mut params, &config, &mut rng);
        let h_s = HyperSynthesis::new(&mut params, &config, &mut rng);
        let prior = FactorizedPrior::new(&mut params, "prior", config.hyper_channels);
        let charm = Charm::new(&mut params, layout, config.slice_hidden, &mut rng);
        Ok(Self {
            config,
            params,
            g_a,
            g_s,
            h_a,
            h_s,
            prior,
            charm,
        })
    }

    /// Model with the given architecture and weights; any name, count or
    /// shape disagreement is an error.
    pub fn from_weights(config: NetworkConfig, weights: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(weights)?;
        Ok(model)
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound<T> {
        self.params.bind(g, trainable)
    }

    fn check_image(&self, x: &Var<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [n, 3, H, W] input, got {s:?}")));
        }
        if s[2] % PAD_MULTIPLE != 0 || s[3] % PAD_MULTIPLE != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!(
                "input {}×{} is not padded to a multiple of {PAD_MULTIPLE}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    fn check_latent(&self, y: &Var<T>, what: &str) -> Result<()> {
        let s = y.shape();
        if s.len() != 4 || s[1] != self.config.m {
            return Err(Error::Shape(format!("{what} {s:?} must have {} channels", self.config.m)));
        }
        Ok(())
    }

    pub fn analysis_transform(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<(Var<T>, Vec<FeatureTap<T>>)> {
        self.check_image(x)?;
        Ok(self.g_a.forward(g, p, x))
    }

    /// Unclamped reconstruction.
    pub fn synthesis_transform(&self, g: &Graph<T>, p: &Bound<T>, y_hat: &Var<T>) -> Result<Var<T>> {
        self.check_latent(y_hat, "latent")?;
        Ok(self.g_s.forward(g, p, y_hat))
    }

    pub fn hyper_analysis(&self, g: &Graph<T>, p: &Bound<T>, y: &Var<T>) -> Result<Var<T>> {
        self.check_latent(y, "latent")?;
        let s = y.shape();
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Shape(format!("latent grid {}×{} not divisible by 4", s[2], s[3])));
        }
        Ok(self.h_a.forward(g, p, y))
    }

    /// `(S_mean, S_scale)` from the quantized hyper-latent.
    pub fn hyper_synthesis(&self, g: &Graph<T>, p: &Bound<T>, z_hat: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let s = z_hat.shape();
        if s.len() != 4 || s[1] != self.config.hyper_channels {
            return Err(Error::Shape(format!(
                "hyper-latent {s:?} must have {} channels",
                self.config.hyper_channels
            )));
        }
        Ok(self.h_s.forward(g, p, z_hat))
    }

    /// Full pass. In train mode the noise source is consumed for ẑ first and
    /// then for each slice in order.
    pub fn forward(
        &self,
        g: &Graph<T>,
        p: &Bound<T>,
        x: &Var<T>,
        mode: QuantMode,
        noise: &mut Noise<'_>,
    ) -> Result<ModelOutput<T>> {
        let (y, taps) = self.analysis_transform(g, p, x)?;
        let z = self.hyper_analysis(g, p, &y)?;
        let z_hat = quantize(g, &z, None, mode, noise);
        let z_likelihoods = self.prior.likelihood(g, p, &z_hat);
        let (s_mean, s_scale) = self.hyper_synthesis(g, p, &z_hat)?;

        let layout = &self.charm.layout;
        let mut slices: Vec<Var<T>> = Vec::with_capacity(layout.num_slices());
        let mut mus = Vec::with_capacity(layout.num_slices());
        let mut sigmas = Vec::with_capacity(layout.num_slices());
        let mut likelihoods = Vec::with_capacity(layout.num_slices());
        for i in 0..layout.num_slices() {
            let y_i = g.narrow_channels(&y, layout.offset(i), layout.channels_per_slice[i]);
            let (mu, sigma) = self.charm.predict_slice(g, p, &s_mean, &s_scale, &slices, i)?;
            let y_hat_i = quantize(g, &y_i, Some(&mu), mode, noise);
            likelihoods.push(gaussian_likelihood_var(g, &y_hat_i, &mu, &sigma));
            slices.push(y_hat_i);
            mus.push(mu);
            sigmas.push(sigma);
        }
        let cat = |v: &[Var<T>]| g.concat_channels(&v.iter().collect::<Vec<_>>());
        let y_hat = cat(&slices);
        let x_hat = self.synthesis_transform(g, p, &y_hat)?;
        Ok(ModelOutput {
            x_hat,
            y,
            y_hat,
            z,
            z_hat,
            taps,
            y_likelihoods: cat(&likelihoods),
            z_likelihoods,
            mu: cat(&mus),
            sigma: cat(&sigmas),
        })
    }

    /// Eval-mode pass on one padded image; returns the forward outputs.
    pub fn evaluate(&self, x: &ImageBuffer) -> Result<ModelOutput<T>> {
        let g = Graph::inference();
        let p = self.bind(&g, false);
        let xv = g.constant(x.to_tensor::<T>());
        self.forward(&g, &p, &xv, QuantMode::Eval, &mut Noise::Off)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec_networks::Role;

    #[test]
    fn toy_shapes() {
        for role in [Role::Teacher, Role::Student] {
            let cfg = NetworkConfig::toy(role);
            let model = CodecModel::<f32>::new(cfg.clone(), 3).unwrap();
            for (h, w) in [(64, 64), (128, 192)] {
                let x = ImageBuffer::filled(h, w, 0.5).unwrap();
                let out = model.evaluate(&x).unwrap();
                assert_eq!(out.y.shape(), &[1, cfg.m, h / 16, w / 16]);
                assert_eq!(out.z.shape(), &[1, cfg.hyper_channels, h / 64, w / 64]);
                assert_eq!(out.mu.shape(), out.y.shape());
                assert_eq!(out.x_hat.shape(), &[1, 3, h, w]);
                assert_eq!(out.taps.len(), 3);
                assert!(out.sigma.value().data().iter().all(|&s| s >= 0.11));
            }
        }
    }

    #[test]
    fn unpadded_input_and_channel_mismatch_rejected() {
        let model = CodecModel::<f32>::new(NetworkConfig::toy(Role::Student), 0).unwrap();
        let g = Graph::inference();
        let p = model.bind(&g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 64]));
        assert!(matches!(model.analysis_transform(&g, &p, &x), Err(Error::Shape(_))));
        let y = g.constant(Tensor::zeros(&[1, 7, 4, 4]));
        assert!(matches!(model.synthesis_transform(&g, &p, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_from_other_role_rejected() {
        let teacher = CodecModel::<f32>::new(NetworkConfig::toy(Role::Teacher), 0).unwrap();
        let err = CodecModel::from_weights(NetworkConfig::toy(Role::Student), &teacher.params.to_named());
        assert!(err.is_err());
    }

    #[test]
    fn eval_forward_deterministic() {
        let model = CodecModel::<f64>::new(NetworkConfig::toy(Role::Student), 9).unwrap();
        let x = ImageBuffer::filled(64, 64, 0.3).unwrap();
        let a = model.evaluate(&x).unwrap();
        let b = model.evaluate(&x).unwrap();
        assert_eq!(a.x_hat.value(), b.x_hat.value());
        assert_eq!(a.y_hat.value(), b.y_hat.value());
    }
}

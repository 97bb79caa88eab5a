//! Quantization, likelihood models, ChARM slice prediction and channel
//! entropy analytics.

pub mod channel_entropy;
pub mod charm;
pub mod factorized;
pub mod likelihood;
pub mod quantize;

pub use channel_entropy::{channel_entropy_profile, channel_means, rank_channels_topk, ChannelEntropyRanking};
pub use charm::{slice_layout, Charm, SliceLayout};
pub use factorized::FactorizedPrior;
pub use likelihood::{
    bits_per_pixel, discretized_gaussian, gaussian_likelihood, gaussian_likelihood_var, rate_bits, GaussianParams,
    LIKELIHOOD_FLOOR, SIGMA_MIN,
};
pub use quantize::{quantize, quantize_eval, Noise, QuantMode};

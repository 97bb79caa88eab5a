//! Analysis/synthesis transforms, hyper-transforms and window attention.

pub mod attention;
pub mod config;
pub mod image;
pub mod transforms;

pub use attention::{scaled_cosine_attention, window_attention, window_partition, window_reverse, AttentionModule, SwinBlock};
pub use config::{build_network_config, NetworkConfig, Role};
pub use image::{pad_image, ImageBuffer, PAD_MULTIPLE};
pub use transforms::{AnalysisTransform, FeatureTap, HyperAnalysis, HyperSynthesis, ResidualBlock, ResidualGroup, SynthesisTransform};

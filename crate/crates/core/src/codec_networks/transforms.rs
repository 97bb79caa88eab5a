use rand::Rng;

use super::attention::AttentionModule;
use super::config::NetworkConfig;
use crate::autograd::{Activation, Graph, Var};
use crate::nn::{Bound, Conv2d, ParamStore, Upsample2d, LEAKY};
use crate::scalar::Scalar;

const DOWN_KERNEL: usize = 5;

/// Intermediate encoder activation used for feature alignment.
#[derive(Clone)]
pub struct FeatureTap<T> {
    /// 1-based down-sampling stage.
    pub stage_index: usize,
    pub values: Var<T>,
}

/// conv3×3 → LeakyReLU → conv3×3, plus identity skip.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), width, width, 3, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(g, p, x);
        let h = g.activation(&h, LEAKY);
        let h = self.conv2.forward(g, p, &h);
        g.add(x, &h)
    }

    pub fn params(&self) -> [crate::nn::ParamId; 4] {
        [self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias]
    }
}

#[derive(Clone, Debug)]
pub struct ResidualGroup {
    pub blocks: Vec<ResidualBlock>,
}

impl ResidualGroup {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        assert!(depth >= 1, "residual group depth must be ≥ 1");
        Self {
            blocks: (0..depth)
                .map(|i| ResidualBlock::new(store, &format!("{name}.block{i}"), width, rng))
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        self.blocks.iter().fold(x.clone(), |h, b| b.forward(g, p, &h))
    }
}

/// Encoder stage: stride-2 conv → LeakyReLU → residual group? → attention?
#[derive(Clone, Debug)]
struct DownStage {
    conv: Conv2d,
    group: Option<ResidualGroup>,
    attention: Option<AttentionModule>,
}

/// Main encoder g_a: four stride-2 stages, image → latent y.
#[derive(Clone, Debug)]
pub struct AnalysisTransform {
    stages: Vec<DownStage>,
    to_latent: Conv2d,
}

impl AnalysisTransform {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let stages = (1..=3)
            .map(|i| {
                let cin = if i == 1 { 3 } else { cfg.n };
                DownStage {
                    conv: Conv2d::new(store, &format!("g_a.down{i}"), cin, cfg.n, DOWN_KERNEL, 2, rng),
                    group: (i <= cfg.num_res_groups).then(|| {
                        ResidualGroup::new(store, &format!("g_a.group{i}"), cfg.n, cfg.res_blocks_per_group, rng)
                    }),
                    attention: (cfg.attention_enabled && i <= 2).then(|| {
                        AttentionModule::new(store, &format!("g_a.attn{i}"), cfg.n, cfg.window_size, cfg.num_heads, rng)
                    }),
                }
            })
            .collect();
        Self {
            stages,
            to_latent: Conv2d::new(store, "g_a.down4", cfg.n, cfg.m, DOWN_KERNEL, 2, rng),
        }
    }

    /// Returns `y` and the outputs of stages 1–3.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> (Var<T>, Vec<FeatureTap<T>>) {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(3);
        for (i, st) in self.stages.iter().enumerate() {
            h = st.conv.forward(g, p, &h);
            h = g.activation(&h, LEAKY);
            if let Some(grp) = &st.group {
                h = grp.forward(g, p, &h);
            }
            if let Some(att) = &st.attention {
                h = att.forward(g, p, &h);
            }
            taps.push(FeatureTap {
                stage_index: i + 1,
                values: h.clone(),
            });
        }
        (self.to_latent.forward(g, p, &h), taps)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: Upsample2d,
    attention: Option<AttentionModule>,
    group: Option<ResidualGroup>,
}

/// Main decoder g_s, mirroring g_a.
#[derive(Clone, Debug)]
pub struct SynthesisTransform {
    stages: Vec<UpStage>,
    to_image: Upsample2d,
}

impl SynthesisTransform {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut R) -> Self {
        // Stage i here mirrors encoder stage i; built from the latent side (3, 2, 1).
        let stages = (1..=3)
            .rev()
            .map(|i| {
                let cin = if i == 3 { cfg.m } else { cfg.n };
                UpStage {
                    up: Upsample2d::new(store, &format!("g_s.up{i}"), cin, cfg.n, DOWN_KERNEL, rng),
                    attention: (cfg.attention_enabled && i <= 2).then(|| {
                        AttentionModule::new(store, &format!("g_s.attn{i}"), cfg.n, cfg.window_size, cfg.num_heads, rng)
                    }),
                    group: (i <= cfg.num_res_groups).then(|| {
                        ResidualGroup::new(store, &format!("g_s.group{i}"), cfg.n, cfg.res_blocks_per_group, rng)
                    }),
                }
            })
            .collect();
        Self {
            stages,
            to_image: Upsample2d::new(store, "g_s.up0", cfg.n, 3, DOWN_KERNEL, rng),
        }
    }

    /// Unclamped reconstruction `[n, 3, 16h, 16w]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, y_hat: &Var<T>) -> Var<T> {
        let mut h = y_hat.clone();
        for st in &self.stages {
            h = st.up.forward(g, p, &h);
            h = g.activation(&h, LEAKY);
            if let Some(att) = &st.attention {
                h = att.forward(g, p, &h);
            }
            if let Some(grp) = &st.group {
                h = grp.forward(g, p, &h);
            }
        }
        self.to_image.forward(g, p, &h)
    }
}

/// Hyper-encoder h_a: two stride-2 convs, y → z.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl HyperAnalysis {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, "h_a.conv1", cfg.m, cfg.hyper_channels, DOWN_KERNEL, 2, rng),
            conv2: Conv2d::new(store, "h_a.conv2", cfg.hyper_channels, cfg.hyper_channels, DOWN_KERNEL, 2, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, y: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(g, p, y);
        let h = g.activation(&h, LEAKY);
        self.conv2.forward(g, p, &h)
    }
}

/// Hyper-decoder h_s: ẑ → (S_mean, S_scale), each with M channels at y's resolution.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    mean1: Upsample2d,
    mean2: Upsample2d,
    scale1: Upsample2d,
    scale2: Upsample2d,
}

impl HyperSynthesis {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let hc = cfg.hyper_channels;
        Self {
            mean1: Upsample2d::new(store, "h_s.mean1", hc, hc, DOWN_KERNEL, rng),
            mean2: Upsample2d::new(store, "h_s.mean2", hc, cfg.m, DOWN_KERNEL, rng),
            scale1: Upsample2d::new(store, "h_s.scale1", hc, hc, DOWN_KERNEL, rng),
            scale2: Upsample2d::new(store, "h_s.scale2", hc, cfg.m, DOWN_KERNEL, rng),
        }
    }

    /// `S_scale` goes through softplus so every entry is positive.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, z_hat: &Var<T>) -> (Var<T>, Var<T>) {
        let m = self.mean1.forward(g, p, z_hat);
        let m = g.activation(&m, LEAKY);
        let s_mean = self.mean2.forward(g, p, &m);
        let s = self.scale1.forward(g, p, z_hat);
        let s = g.activation(&s, LEAKY);
        let s = self.scale2.forward(g, p, &s);
        (s_mean, g.activation(&s, Activation::Softplus))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_residual_group_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let grp = ResidualGroup::new(&mut store, "r", 4, 3, &mut rng);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let g = Graph::inference();
        let p = store.bind(&g, false);
        let x = Tensor::uniform(&[2, 4, 5, 6], -2.0, 2.0, &mut rng);
        let y = grp.forward(&g, &p, &g.constant(x.clone()));
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn residual_group_shape_for_any_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for depth in [1, 2, 6] {
            let mut store = ParamStore::<f32>::new();
            let grp = ResidualGroup::new(&mut store, "r", 3, depth, &mut rng);
            assert_eq!(grp.blocks.len(), depth);
            let g = Graph::inference();
            let p = store.bind(&g, false);
            let y = grp.forward(&g, &p, &g.constant(Tensor::zeros(&[1, 3, 4, 4])));
            assert_eq!(y.shape(), &[1, 3, 4, 4]);
        }
    }
}

use crate::autograd::{Graph, Var};
use crate::codec_networks::image::PAD_MULTIPLE;
use crate::codec_networks::ImageBuffer;
use crate::entropy_engine::{gaussian_likelihood, rate_bits, GaussianParams, LIKELIHOOD_FLOOR};
use crate::error::{Error, Result};
use crate::feds_distillation::FEDSWeights;
use crate::model::CodecModel;
use crate::nn::Bound;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::cdf::{gaussian_tables, scale_index, CdfTable};
use super::container::{BitstreamContainer, ContainerHeader, CUSTOM_LAMBDA, FORMAT_VERSION};
use super::range_coder::{RangeDecoder, RangeEncoder};

/// Encoder-side by-products, for tests and rate accounting.
#[derive(Clone, Debug)]
pub struct CompressTrace<T> {
    pub y_hat: Tensor<T>,
    pub z_hat: Tensor<T>,
    /// `Σ −log₂ p` over the coded symbols under the quantized tables, per
    /// stream (z first, then slices). Excludes stream sentinels.
    pub stream_bits: Vec<f64>,
    /// Analytic rate under the continuous model, per stream, in bits.
    pub stream_estimated_bits: Vec<f64>,
}

impl<T> CompressTrace<T> {
    pub fn coded_bits(&self) -> f64 {
        self.stream_bits.iter().sum()
    }

    /// Analytic rate of ŷ and ẑ, in bits.
    pub fn estimated_bits(&self) -> f64 {
        self.stream_estimated_bits.iter().sum()
    }
}

fn lambda_code(w: &FEDSWeights) -> u8 {
    w.lambda_index().map(|i| i as u8).unwrap_or(CUSTOM_LAMBDA)
}

/// Per-channel coding tables of the factorized prior.
fn prior_tables<T: Scalar>(model: &CodecModel<T>) -> Vec<CdfTable> {
    (0..model.config.hyper_channels)
        .map(|c| {
            let (lo, hi) = model.prior.support(&model.params, c);
            let pmf: Vec<f64> = (lo..=hi)
                .map(|v| {
                    let v = v as f64;
                    (model.prior.cdf(&model.params, c, v + 0.5) - model.prior.cdf(&model.params, c, v - 0.5)).max(0.0)
                })
                .collect();
            CdfTable::from_pmf(&pmf, lo as i32)
        })
        .collect()
}

fn to_symbol<T: Scalar>(v: T) -> Result<i32> {
    let f = v.as_f64();
    if !f.is_finite() || f.abs() > f64::from(i32::MAX) {
        return Err(Error::Bitstream(format!("latent value {f} cannot be coded")));
    }
    Ok(f as i32)
}

fn check_header<T: Scalar>(header: &ContainerHeader, model: &CodecModel<T>, w: &FEDSWeights) -> Result<()> {
    if header.role != model.config.role {
        return Err(Error::Bitstream(format!(
            "bitstream was produced by a {} model but a {} model is loaded",
            header.role, model.config.role
        )));
    }
    let expected = lambda_code(w);
    if header.lambda_index != expected {
        return Err(Error::Bitstream(format!(
            "bitstream lambda index {} does not match the loaded model ({expected})",
            header.lambda_index
        )));
    }
    Ok(())
}

/// Entropy-code one padded image.
pub fn compress_image<T: Scalar>(x: &ImageBuffer, model: &CodecModel<T>, w: &FEDSWeights) -> Result<BitstreamContainer> {
    compress_image_traced(x, model, w).map(|(c, _)| c)
}

pub fn compress_image_traced<T: Scalar>(
    x: &ImageBuffer,
    model: &CodecModel<T>,
    w: &FEDSWeights,
) -> Result<(BitstreamContainer, CompressTrace<T>)> {
    if !x.is_padded_to(PAD_MULTIPLE) {
        return Err(Error::Shape(format!(
            "image {}×{} must be padded to a multiple of {PAD_MULTIPLE} before compression",
            x.height(),
            x.width()
        )));
    }
    let g = Graph::inference();
    let p = model.bind(&g, false);
    let xv = g.constant(x.to_tensor::<T>());
    let (y, _) = model.analysis_transform(&g, &p, &xv)?;
    let z = model.hyper_analysis(&g, &p, &y)?;
    let z_hat = g.constant(z.value().map(|v| v.round()));

    let mut stream_bits = Vec::new();
    let tables = prior_tables(model);
    let mut enc = RangeEncoder::new();
    let (_, zc, zh, zw) = z_hat.value().dims4();
    let plane = zh * zw;
    let mut bits = 0.0;
    for (i, &v) in z_hat.value().data().iter().enumerate() {
        let t = &tables[(i / plane) % zc];
        let s = to_symbol(v)?;
        bits -= t.coded_probability(s).log2();
        t.encode(&mut enc, s)?;
    }
    stream_bits.push(bits);
    let z_payload = enc.finish();
    let z_lik = model.prior.likelihood(&g, &p, &z_hat);
    let mut stream_estimated_bits = vec![rate_bits(z_lik.value()).data().iter().map(|v| v.as_f64()).sum::<f64>()];

    let (s_mean, s_scale) = model.hyper_synthesis(&g, &p, &z_hat)?;
    let layout = model.charm.layout.clone();
    let mut slices: Vec<Var<T>> = Vec::new();
    let mut slice_payloads = Vec::new();
    let gtables = gaussian_tables();
    for i in 0..layout.num_slices() {
        let y_i = g.narrow_channels(&y, layout.offset(i), layout.channels_per_slice[i]);
        let (mu, sigma) = model.charm.predict_slice(&g, &p, &s_mean, &s_scale, &slices, i)?;
        let mut enc = RangeEncoder::new();
        let mut bits = 0.0;
        let mut hat = Vec::with_capacity(mu.value().numel());
        for ((&yv, &m), &s) in y_i.value().data().iter().zip(mu.value().data()).zip(sigma.value().data()) {
            let r = (yv - m).round();
            let t = &gtables[scale_index(s.as_f64())];
            let sym = to_symbol(r)?;
            bits -= t.coded_probability(sym).log2();
            t.encode(&mut enc, sym)?;
            hat.push(r + m);
        }
        stream_bits.push(bits);
        slice_payloads.push(enc.finish());
        let y_hat_i = Tensor::from_vec(mu.shape(), hat)?;
        let params = GaussianParams::new(mu.value().clone(), sigma.value().clone())?;
        let lik = gaussian_likelihood(&y_hat_i, &params)?;
        debug_assert!(lik.data().iter().all(|&v| v.as_f64() >= LIKELIHOOD_FLOOR * 0.999));
        stream_estimated_bits.push(rate_bits(&lik).data().iter().map(|v| v.as_f64()).sum::<f64>());
        slices.push(g.constant(y_hat_i));
    }
    let y_hat = g.concat_channels(&slices.iter().collect::<Vec<_>>());

    let container = BitstreamContainer {
        header: ContainerHeader {
            version: FORMAT_VERSION,
            role: model.config.role,
            lambda_index: lambda_code(w),
            original_width: x.original_width() as u32,
            original_height: x.original_height() as u32,
        },
        z_payload,
        slice_payloads,
    };
    let trace = CompressTrace {
        y_hat: y_hat.value().clone(),
        z_hat: z_hat.value().clone(),
        stream_bits,
        stream_estimated_bits,
    };
    Ok((container, trace))
}

/// Decode a container into the cropped reconstruction.
pub fn decompress_image<T: Scalar>(
    container: &BitstreamContainer,
    model: &CodecModel<T>,
    w: &FEDSWeights,
) -> Result<ImageBuffer> {
    decompress_image_traced(container, model, w).map(|(img, _)| img)
}

/// Also returns the decoded ŷ.
pub fn decompress_image_traced<T: Scalar>(
    container: &BitstreamContainer,
    model: &CodecModel<T>,
    w: &FEDSWeights,
) -> Result<(ImageBuffer, Tensor<T>)> {
    check_header(&container.header, model, w)?;
    let layout = model.charm.layout.clone();
    if container.slice_payloads.len() != layout.num_slices() {
        return Err(Error::Bitstream(format!(
            "container has {} slice payloads, model codes {}",
            container.slice_payloads.len(),
            layout.num_slices()
        )));
    }
    let oh = container.header.original_height as usize;
    let ow = container.header.original_width as usize;
    let ph = oh.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let pw = ow.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let (zh, zw) = (ph / 64, pw / 64);
    let (yh, yw) = (ph / 16, pw / 16);

    let g = Graph::inference();
    let p = model.bind(&g, false);

    let tables = prior_tables(model);
    let hc = model.config.hyper_channels;
    let mut dec = RangeDecoder::new(&container.z_payload)?;
    let mut z = Vec::with_capacity(hc * zh * zw);
    for c in 0..hc {
        for _ in 0..zh * zw {
            z.push(T::lit(f64::from(tables[c].decode(&mut dec)?)));
        }
    }
    dec.finish()?;
    let z_hat = g.constant(Tensor::from_vec(&[1, hc, zh, zw], z)?);
    let (s_mean, s_scale) = model.hyper_synthesis(&g, &p, &z_hat)?;
    if s_mean.shape()[2..] != [yh, yw] {
        return Err(Error::Invariant(format!("side information grid {:?}", s_mean.shape())));
    }
    let slices = decode_slices(&g, &p, model, &s_mean, &s_scale, &container.slice_payloads)?;
    let y_hat = g.concat_channels(&slices.iter().collect::<Vec<_>>());
    let x_hat = model.synthesis_transform(&g, &p, &y_hat)?;
    let img = ImageBuffer::from_tensor(x_hat.value(), oh, ow)?.crop_to_original();
    Ok((img, y_hat.value().clone()))
}

fn decode_slices<T: Scalar>(
    g: &Graph<T>,
    p: &Bound<T>,
    model: &CodecModel<T>,
    s_mean: &Var<T>,
    s_scale: &Var<T>,
    payloads: &[Vec<u8>],
) -> Result<Vec<Var<T>>> {
    let gtables = gaussian_tables();
    let mut slices: Vec<Var<T>> = Vec::with_capacity(payloads.len());
    for (i, payload) in payloads.iter().enumerate() {
        let (mu, sigma) = model.charm.predict_slice(g, p, s_mean, s_scale, &slices, i)?;
        let mut dec = RangeDecoder::new(payload)?;
        let mut hat = Vec::with_capacity(mu.value().numel());
        for (&m, &s) in mu.value().data().iter().zip(sigma.value().data()) {
            let r = gtables[scale_index(s.as_f64())].decode(&mut dec)?;
            hat.push(T::lit(f64::from(r)) + m);
        }
        dec.finish()?;
        slices.push(g.constant(Tensor::from_vec(mu.shape(), hat)?));
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec_networks::{pad_image, NetworkConfig, Role};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * h * w).map(|_| rng.gen::<f32>()).collect();
        pad_image(&ImageBuffer::new(h, w, px).unwrap())
    }

    #[test]
    fn round_trip_matches_local_reconstruction() {
        let model = CodecModel::<f32>::new(NetworkConfig::toy(Role::Student), 4).unwrap();
        let w = FEDSWeights::default();
        let x = random_image(70, 90, 1);
        let (c, trace) = compress_image_traced(&x, &model, &w).unwrap();
        let bytes = c.to_bytes();
        let parsed = BitstreamContainer::from_bytes(&bytes, 5).unwrap();
        let (img, y_hat) = decompress_image_traced(&parsed, &model, &w).unwrap();
        assert_eq!(y_hat, trace.y_hat);
        let local = model.evaluate(&x).unwrap();
        assert_eq!(local.y_hat.value(), &trace.y_hat);
        let expect = ImageBuffer::from_tensor(local.x_hat.value(), 70, 90).unwrap().crop_to_original();
        assert_eq!(img, expect);
        assert_eq!((img.height(), img.width()), (70, 90));
    }

    #[test]
    fn rejects_mismatched_model() {
        let student = CodecModel::<f32>::new(NetworkConfig::toy(Role::Student), 4).unwrap();
        let teacher = CodecModel::<f32>::new(NetworkConfig::toy(Role::Teacher), 4).unwrap();
        let w = FEDSWeights::default();
        let c = compress_image(&random_image(64, 64, 2), &student, &w).unwrap();
        assert!(matches!(decompress_image(&c, &teacher, &w), Err(Error::Bitstream(_))));
        let other = FEDSWeights::preset(0).unwrap();
        assert!(matches!(decompress_image(&c, &student, &other), Err(Error::Bitstream(_))));
    }

    #[test]
    fn truncated_slice_fails() {
        let model = CodecModel::<f32>::new(NetworkConfig::toy(Role::Student), 4).unwrap();
        let w = FEDSWeights::default();
        let mut c = compress_image(&random_image(64, 64, 3), &model, &w).unwrap();
        c.slice_payloads[2].pop();
        assert!(decompress_image(&c, &model, &w).is_err());
    }

    #[test]
    fn unpadded_rejected() {
        let model = CodecModel::<f32>::new(NetworkConfig::toy(Role::Student), 4).unwrap();
        let x = ImageBuffer::filled(50, 64, 0.5).unwrap();
        assert!(compress_image(&x, &model, &FEDSWeights::default()).is_err());
    }
}

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::bitstream_codec::{compress_image_traced, decompress_image_traced, BitstreamContainer};
use crate::codec_networks::{pad_image, ImageBuffer};
use crate::error::{Error, Result};
use crate::feds_distillation::FEDSWeights;
use crate::model::CodecModel;
use crate::scalar::Scalar;
use crate::training_pipeline::image_paths;

use super::bdrate::RDPoint;
use super::quality::{ms_ssim, psnr};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageResult {
    pub image: String,
    pub point: RDPoint,
}

/// Arithmetic means over images.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub bpp: f64,
    pub psnr_db: f64,
    /// Mean over images large enough for MS-SSIM; absent if none were.
    pub msssim: Option<f64>,
    pub msssim_db: Option<f64>,
    pub enc_s: f64,
    pub dec_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub images: Vec<ImageResult>,
    pub aggregate: Aggregate,
}

/// Encode, serialize, parse and decode one image; returns its operating
/// point and the reconstruction. A decoded latent that differs from the
/// encoder's is an error.
pub fn evaluate_image<T: Scalar>(
    model: &CodecModel<T>,
    image: &ImageBuffer,
    w: &FEDSWeights,
) -> Result<(RDPoint, ImageBuffer, Vec<u8>)> {
    let t0 = Instant::now();
    let padded = pad_image(image);
    let (container, trace) = compress_image_traced(&padded, model, w)?;
    let bytes = container.to_bytes();
    let enc_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let parsed = BitstreamContainer::from_bytes(&bytes, model.config.num_slices)?;
    let (recon, y_hat) = decompress_image_traced(&parsed, model, w)?;
    let dec_seconds = t1.elapsed().as_secs_f64();

    if y_hat != trace.y_hat {
        return Err(Error::Invariant("decoded latent differs from the encoder's".into()));
    }
    let bpp = 8.0 * bytes.len() as f64 / (image.height() * image.width()) as f64;
    let psnr_db = psnr(image, &recon)?;
    let ms = match ms_ssim(image, &recon) {
        Ok(v) => Some(v),
        Err(Error::Metric(_)) if image.height().min(image.width()) < crate::feds_distillation::msssim::MS_SSIM_MIN_SIDE => None,
        Err(e) => return Err(e),
    };
    let point = RDPoint {
        bpp,
        psnr_db,
        msssim: ms.map(|m| m.0),
        msssim_db: ms.map(|m| m.1),
        enc_seconds,
        dec_seconds,
    };
    Ok((point, recon, bytes))
}

/// Means over per-image results. An infinite PSNR (lossless image) is an error.
pub fn aggregate(images: &[ImageResult]) -> Result<Aggregate> {
    if images.is_empty() {
        return Err(Error::Metric("no images to aggregate".into()));
    }
    if let Some(r) = images.iter().find(|r| !r.point.psnr_db.is_finite()) {
        return Err(Error::Metric(format!(
            "{}: infinite PSNR cannot be averaged",
            r.image
        )));
    }
    let n = images.len() as f64;
    let mean = |f: &dyn Fn(&RDPoint) -> f64| images.iter().map(|r| f(&r.point)).sum::<f64>() / n;
    let opt_mean = |f: &dyn Fn(&RDPoint) -> Option<f64>| {
        let v: Vec<f64> = images.iter().filter_map(|r| f(&r.point)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let msssim_db = opt_mean(&|p| p.msssim_db);
    if msssim_db.is_some_and(|v| !v.is_finite()) {
        return Err(Error::Metric("infinite MS-SSIM dB cannot be averaged".into()));
    }
    Ok(Aggregate {
        count: images.len(),
        bpp: mean(&|p| p.bpp),
        psnr_db: mean(&|p| p.psnr_db),
        msssim: opt_mean(&|p| p.msssim),
        msssim_db,
        enc_s: mean(&|p| p.enc_seconds),
        dec_s: mean(&|p| p.dec_seconds),
    })
}

/// Evaluate every image file of `dir` (sorted by name) through the real
/// bitstream path.
pub fn evaluate_model<T: Scalar>(model: &CodecModel<T>, dir: &Path, w: &FEDSWeights) -> Result<Evaluation> {
    let paths = image_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(paths.len());
    for path in &paths {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img = ImageBuffer::load(path)?;
        let (point, _, _) = evaluate_image(model, &img, w).map_err(|e| match e {
            Error::Invariant(m) => Error::Invariant(format!("{name}: {m}")),
            other => Error::Metric(format!("{name}: {other}")),
        })?;
        images.push(ImageResult { image: name, point });
    }
    let aggregate = aggregate(&images)?;
    Ok(Evaluation { images, aggregate })
}

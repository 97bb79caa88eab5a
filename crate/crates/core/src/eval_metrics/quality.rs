use crate::autograd::Graph;
use crate::codec_networks::ImageBuffer;
use crate::error::{Error, Result};
use crate::feds_distillation::ms_ssim_var;
use crate::tensor::Tensor;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Metric(format!(
            "image sizes differ: {}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR in dB on the 8-bit scale. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (qa, qb) = (a.to_u8(), b.to_u8());
    let sse: f64 = qa
        .iter()
        .zip(&qb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / qa.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// `−10·log₁₀(1 − v)`; `v = 1` gives `f64::INFINITY`.
pub fn msssim_to_db(v: f64) -> f64 {
    if v >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * (1.0 - v).log10()
    }
}

fn to_unit_tensor(img: &ImageBuffer) -> Tensor<f64> {
    Tensor::from_vec(
        &[1, 3, img.height(), img.width()],
        img.to_u8().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
    .expect("image tensor shape")
}

/// Five-scale MS-SSIM on 8-bit-rounded samples, as `(raw, dB)`.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, f64)> {
    check_dims(a, b)?;
    let g = Graph::<f64>::inference();
    let va = g.constant(to_unit_tensor(a));
    let vb = g.constant(to_unit_tensor(b));
    let raw = ms_ssim_var(&g, &va, &vb)?.item().clamp(0.0, 1.0);
    Ok((raw, msssim_to_db(raw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize, v: f32) -> ImageBuffer {
        ImageBuffer::filled(h, w, v).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = flat(8, 8, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&flat(8, 8, 0.0), &flat(8, 8, 1.0)).unwrap().abs() < 1e-12);
        let b = ImageBuffer::from_u8_planar(4, 4, &[100; 48]).unwrap();
        let c = ImageBuffer::from_u8_planar(4, 4, &[110; 48]).unwrap();
        assert!((psnr(&b, &c).unwrap() - 20.0 * (25.5f64).log10()).abs() < 1e-12);
        assert!((psnr(&b, &c).unwrap() - 28.13).abs() < 0.005);
        assert!(psnr(&a, &flat(8, 4, 0.5)).is_err());
    }

    #[test]
    fn db_conversion() {
        assert!((msssim_to_db(0.95) - 13.0103).abs() < 1e-4);
        assert_eq!(msssim_to_db(1.0), f64::INFINITY);
    }

    #[test]
    fn msssim_identity_symmetry_and_size() {
        let a = ImageBuffer::new(
            160,
            176,
            (0..3 * 160 * 176).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect(),
        )
        .unwrap();
        let b = ImageBuffer::new(160, 176, a.pixels().iter().map(|v| (v * 0.8 + 0.1).min(1.0)).collect()).unwrap();
        let (raw, db) = ms_ssim(&a, &a).unwrap();
        assert_eq!((raw, db), (1.0, f64::INFINITY));
        let ab = ms_ssim(&a, &b).unwrap();
        let ba = ms_ssim(&b, &a).unwrap();
        assert!(ab.0 < 1.0 && (ab.0 - ba.0).abs() < 1e-12);
        let err = ms_ssim(&flat(64, 64, 0.1), &flat(64, 64, 0.2)).unwrap_err();
        assert!(err.to_string().contains("160"));
    }
}

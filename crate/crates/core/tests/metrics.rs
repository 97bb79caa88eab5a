use feds_core::codec_networks::ImageBuffer;
use feds_core::eval_metrics::{bd_rate, ms_ssim, psnr, QualityMetric, RDCurve, RDPoint};
use proptest::prelude::*;

/// Same construction as `oracles/msssim_reference.py`.
fn pattern(h: usize, w: usize, k: f64) -> ImageBuffer {
    let mut samples = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let (fi, fj, fc) = (i as f64, j as f64, c as f64);
                let mut v = 127.5
                    + 90.0 * (0.05 * fi + 0.3 * fc).sin() * (0.037 * fj * (fc + 1.0)).cos()
                    + ((i * 7 + j * 13 + c * 29) % 17) as f64
                    - 8.0;
                v += k * (((i * 3 + j * 5 + c * 11) % 9) as f64 - 4.0);
                samples[(c * h + i) * w + j] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::from_u8_planar(h, w, &samples).unwrap()
}

#[test]
fn msssim_matches_reference_implementation() {
    // pytorch_msssim 1.0.0, data_range = 1, float64 window.
    let reference = [
        (161, 170, 1.0, 0.9976180796769417),
        (161, 170, 6.0, 0.9410603403220686),
        (181, 203, 1.0, 0.9976105200897282),
        (181, 203, 6.0, 0.9409288348405855),
        (256, 192, 1.0, 0.9975825959152976),
        (256, 192, 6.0, 0.9402647313092798),
    ];
    for (h, w, k, want) in reference {
        let (got, db) = ms_ssim(&pattern(h, w, 0.0), &pattern(h, w, k)).unwrap();
        assert!((got - want).abs() < 1e-9, "{h}×{w} k={k}: {got} vs {want}");
        assert!((db + 10.0 * (1.0 - got).log10()).abs() < 1e-12);
    }
}

fn point(bpp: f64, q: f64) -> RDPoint {
    RDPoint {
        bpp,
        psnr_db: q,
        msssim: None,
        msssim_db: Some(q / 3.0),
        enc_seconds: 0.0,
        dec_seconds: 0.0,
    }
}

fn curve_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    (4usize..8, 0.02f64..0.2, 24.0f64..30.0).prop_flat_map(|(n, b0, q0)| {
        (
            proptest::collection::vec(1.15f64..2.2, n - 1),
            proptest::collection::vec(0.4f64..3.0, n - 1),
        )
            .prop_map(move |(rs, qs)| {
                let mut v = vec![(b0, q0)];
                for (r, dq) in rs.into_iter().zip(qs) {
                    let (b, q) = *v.last().unwrap();
                    v.push((b * r, q + dq));
                }
                v
            })
    })
}

fn curve(label: &str, pts: &[(f64, f64)]) -> RDCurve {
    RDCurve::new(label, pts.iter().map(|&(b, q)| point(b, q)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bd_rate_identity_and_uniform_scaling(pts in curve_strategy(), factor in 0.5f64..1.5) {
        let a = curve("a", &pts);
        for q in [QualityMetric::Psnr, QualityMetric::MsSsimDb] {
            prop_assert_eq!(bd_rate(&a, &a, q).unwrap().percent, 0.0);
            let scaled: Vec<_> = pts.iter().map(|&(b, q)| (b * factor, q)).collect();
            let t = curve("t", &scaled);
            let r = bd_rate(&a, &t, q).unwrap().percent;
            prop_assert!((r - (factor - 1.0) * 100.0).abs() < 1e-6, "{} vs {}", r, factor);
            if factor < 1.0 {
                prop_assert!(r < 0.0);
            }
        }
    }

    #[test]
    fn psnr_symmetric_and_maximal_on_identity(vals in proptest::collection::vec(0u8..=255, 48), shift in 1u8..40) {
        let a = ImageBuffer::from_u8_planar(4, 4, &vals).unwrap();
        let shifted: Vec<u8> = vals.iter().map(|v| v.wrapping_add(shift)).collect();
        let b = ImageBuffer::from_u8_planar(4, 4, &shifted).unwrap();
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let ab = psnr(&a, &b).unwrap();
        prop_assert!(ab.is_finite());
        prop_assert_eq!(ab, psnr(&b, &a).unwrap());
    }
}

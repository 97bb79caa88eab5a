#![allow(dead_code)]

use feds_core::codec_networks::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth synthetic scene: a colour gradient, a few soft discs and a little
/// pixel noise. Natural-image statistics are only loosely imitated.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let grad: [(f32, f32); 3] = std::array::from_fn(|_| (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)));
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f32),
                rng.gen_range(0.0..w as f32),
                rng.gen_range(4.0..(h.min(w) as f32 / 2.0).max(5.0)),
                [rng.gen(), rng.gen(), rng.gen()],
            )
        })
        .collect();
    let mut px = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
            let mut c: [f32; 3] = std::array::from_fn(|k| base[k] + grad[k].0 * fy + grad[k].1 * fx);
            for &(cy, cx, r, col) in &discs {
                let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                let a = (1.0 - (d - r).clamp(0.0, 2.0) / 2.0).clamp(0.0, 1.0);
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - a) + col[k] * a;
                }
            }
            for k in 0..3 {
                let n: f32 = rng.gen_range(-0.02..0.02);
                px[(k * h + y) * w + x] = (c[k] + n).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(h, w, px).unwrap()
}

pub fn corpus(n: usize, h: usize, w: usize, seed: u64) -> Vec<ImageBuffer> {
    (0..n as u64).map(|i| synthetic_image(h, w, seed * 1_000_003 + i)).collect()
}

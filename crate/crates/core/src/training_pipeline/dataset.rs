//! Training patch stream: lossless augmentation (quarter-turn rotations,
//! integer downscaling, horizontal flips) followed by a uniform random crop.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec_networks::ImageBuffer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Augmentation {
    Rotation,
    Scaling,
    HorizontalFlip,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::Rotation, Augmentation::Scaling, Augmentation::HorizontalFlip];

    fn name(self) -> &'static str {
        match self {
            Augmentation::Rotation => "rotation",
            Augmentation::Scaling => "scaling",
            Augmentation::HorizontalFlip => "flip",
        }
    }

    /// Comma-separated names; `none` for the empty set.
    pub fn parse_set(s: &str) -> Result<BTreeSet<Self>> {
        let mut set = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "all" => set.extend(Self::ALL),
                "rotation" => {
                    set.insert(Augmentation::Rotation);
                }
                "scaling" => {
                    set.insert(Augmentation::Scaling);
                }
                "flip" | "horizontal_flip" => {
                    set.insert(Augmentation::HorizontalFlip);
                }
                other => return Err(Error::Config(format!("unknown augmentation `{other}`"))),
            }
        }
        Ok(set)
    }

    pub fn format_set(set: &BTreeSet<Self>) -> String {
        if set.is_empty() {
            return "none".into();
        }
        set.iter().map(|a| a.name()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub paths: Vec<PathBuf>,
    pub crop_size: usize,
    pub augmentations: BTreeSet<Augmentation>,
    /// Images with a longer side above this are box-downscaled by the
    /// smallest integer factor that brings them within it.
    pub rescale_target: Option<usize>,
}

impl DatasetSpec {
    pub fn new(paths: Vec<PathBuf>) -> Self {
        Self {
            paths,
            crop_size: 384,
            augmentations: Augmentation::ALL.into_iter().collect(),
            rescale_target: Some(2000),
        }
    }
}

/// Image files (`png`, `jpg`, `jpeg`, `ppm`, `bmp`) directly inside `dir`, sorted.
pub fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "ppm" | "bmp"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// A decoded image held as planar f32.
#[derive(Clone, Debug)]
struct Source {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Source {
    fn downscale(&self, f: usize) -> Source {
        if f == 1 {
            return self.clone();
        }
        let (h, w) = (self.h / f, self.w / f);
        let inv = 1.0 / (f * f) as f32;
        let mut px = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0f32;
                    for dy in 0..f {
                        let row = (c * self.h + y * f + dy) * self.w + x * f;
                        s += self.px[row..row + f].iter().sum::<f32>();
                    }
                    px.push(s * inv);
                }
            }
        }
        Source { h, w, px }
    }
}

/// Deterministic, infinite stream of training patches.
pub struct PatchStream {
    spec: DatasetSpec,
    images: Vec<Source>,
    rng: ChaCha8Rng,
}

impl PatchStream {
    /// Decode every image up front. Unreadable files are skipped with a
    /// warning; an empty result is an error.
    pub fn new(spec: DatasetSpec, rng: ChaCha8Rng) -> Result<Self> {
        if spec.crop_size == 0 || spec.crop_size % 64 != 0 {
            return Err(Error::Config(format!("crop size {} is not a multiple of 64", spec.crop_size)));
        }
        let mut images = Vec::new();
        for p in &spec.paths {
            match ImageBuffer::load(p) {
                Ok(img) => images.push(img),
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "no usable images among {} candidate files",
                spec.paths.len()
            )));
        }
        Self::from_images(spec, images, rng)
    }

    /// Stream over already-decoded images; `spec.paths` is ignored.
    pub fn from_images(spec: DatasetSpec, images: Vec<ImageBuffer>, rng: ChaCha8Rng) -> Result<Self> {
        if spec.crop_size == 0 || spec.crop_size % 64 != 0 {
            return Err(Error::Config(format!("crop size {} is not a multiple of 64", spec.crop_size)));
        }
        if images.is_empty() {
            return Err(Error::Dataset("no images".into()));
        }
        let images = images
            .into_iter()
            .map(|img| {
                let mut src = Source {
                    h: img.height(),
                    w: img.width(),
                    px: img.pixels().to_vec(),
                };
                if let Some(t) = spec.rescale_target {
                    let longest = src.h.max(src.w);
                    if t > 0 && longest > t {
                        src = src.downscale(longest.div_ceil(t));
                    }
                }
                src
            })
            .collect();
        Ok(Self { spec, images, rng })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Next `crop × crop` patch, planar RGB in `[0, 1]`.
    pub fn next_patch(&mut self) -> ImageBuffer {
        let crop = self.spec.crop_size;
        let idx = self.rng.gen_range(0..self.images.len());
        let src = &self.images[idx];
        let aug = &self.spec.augmentations;

        let factor = if aug.contains(&Augmentation::Scaling) {
            let max_f = (src.h.min(src.w) / crop).clamp(1, 4);
            self.rng.gen_range(1..=max_f)
        } else {
            1
        };
        let quarter_turns = if aug.contains(&Augmentation::Rotation) {
            self.rng.gen_range(0..4usize)
        } else {
            0
        };
        let flip = aug.contains(&Augmentation::HorizontalFlip) && self.rng.gen_bool(0.5);

        let scaled;
        let img = if factor > 1 {
            scaled = src.downscale(factor);
            &scaled
        } else {
            src
        };
        // Transformed frame dimensions.
        let (th, tw) = if quarter_turns % 2 == 1 { (img.w, img.h) } else { (img.h, img.w) };
        let oy = if th > crop { self.rng.gen_range(0..=th - crop) } else { 0 };
        let ox = if tw > crop { self.rng.gen_range(0..=tw - crop) } else { 0 };

        let mut px = Vec::with_capacity(3 * crop * crop);
        for c in 0..3 {
            for y in 0..crop {
                for x in 0..crop {
                    // Replicate-pad in the transformed frame, then undo flip and rotation.
                    let ty = (oy + y).min(th - 1);
                    let mut tx = (ox + x).min(tw - 1);
                    if flip {
                        tx = tw - 1 - tx;
                    }
                    let (sy, sx) = unrotate(ty, tx, img.h, img.w, quarter_turns);
                    px.push(img.px[(c * img.h + sy) * img.w + sx]);
                }
            }
        }
        ImageBuffer::new(crop, crop, px).expect("patch values stay in range")
    }

    /// `[batch, 3, crop, crop]`.
    pub fn next_batch<T: Scalar>(&mut self, batch: usize) -> Tensor<T> {
        let items: Vec<Tensor<T>> = (0..batch).map(|_| self.next_patch().to_tensor::<T>()).collect();
        Tensor::stack_batch(&items).expect("patches share a shape")
    }
}

/// Source coordinates of pixel `(y, x)` of the image rotated clockwise by
/// `k` quarter turns, where the source is `h × w`.
fn unrotate(y: usize, x: usize, h: usize, w: usize, k: usize) -> (usize, usize) {
    match k % 4 {
        0 => (y, x),
        1 => (h - 1 - x, y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (x, w - 1 - y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn write_png(dir: &Path, name: &str, h: usize, w: usize, seed: u64) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * h * w).map(|_| rng.gen::<u8>() as f32 / 255.0).collect();
        let p = dir.join(name);
        ImageBuffer::new(h, w, px).unwrap().save_png(&p).unwrap();
        p
    }

    #[test]
    fn rotation_inverse_mapping() {
        // 2×3 source, rotated clockwise once → 3×2; top-left of the result is
        // the bottom-left source pixel.
        assert_eq!(unrotate(0, 0, 2, 3, 1), (1, 0));
        assert_eq!(unrotate(2, 1, 2, 3, 1), (0, 2));
        assert_eq!(unrotate(0, 0, 2, 3, 2), (1, 2));
        assert_eq!(unrotate(0, 0, 2, 3, 3), (0, 2));
    }

    #[test]
    fn deterministic_and_identity_crop() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_png(dir.path(), "a.png", 64, 64, 1);
        let mut spec = DatasetSpec::new(vec![p.clone()]);
        spec.crop_size = 64;
        spec.augmentations.clear();
        let mut s = PatchStream::new(spec.clone(), ChaCha8Rng::seed_from_u64(0)).unwrap();
        let original = ImageBuffer::load(&p).unwrap();
        assert_eq!(s.next_patch(), original);

        spec.augmentations = Augmentation::ALL.into_iter().collect();
        let mut a = PatchStream::new(spec.clone(), ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut b = PatchStream::new(spec, ChaCha8Rng::seed_from_u64(3)).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_patch(), b.next_patch());
        }
    }

    #[test]
    fn rotations_are_pixel_permutations() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_png(dir.path(), "a.png", 64, 64, 2);
        let mut spec = DatasetSpec::new(vec![p.clone()]);
        spec.crop_size = 64;
        spec.augmentations = [Augmentation::Rotation, Augmentation::HorizontalFlip].into_iter().collect();
        let mut s = PatchStream::new(spec, ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut want = ImageBuffer::load(&p).unwrap().pixels().to_vec();
        want.sort_by(f32::total_cmp);
        for _ in 0..8 {
            let mut got = s.next_patch().pixels().to_vec();
            got.sort_by(f32::total_cmp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn small_images_padded_and_corrupt_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_png(dir.path(), "small.png", 10, 20, 3);
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        let mut spec = DatasetSpec::new(vec![bad.clone(), p]);
        spec.crop_size = 64;
        let mut s = PatchStream::new(spec, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.len(), 1);
        let patch = s.next_patch();
        assert_eq!((patch.height(), patch.width()), (64, 64));
        assert!(PatchStream::new(DatasetSpec::new(vec![bad]), ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn listing_filters_extensions() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "b.png", 8, 8, 1);
        write_png(dir.path(), "a.png", 8, 8, 1);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let got = image_paths(dir.path()).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got[0].ends_with("a.png"));
    }
}

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial granularity required by the transforms: 4 + 2 stride-2 stages.
pub const PAD_MULTIPLE: usize = 64;

/// RGB image with planar `3×H×W` samples in `[0, 1]`.
///
/// `height`/`width` are the stored (possibly padded) dimensions; the
/// original dimensions are kept so reconstructions can be cropped back.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    original_height: usize,
    original_width: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    /// Wrap planar `3×H×W` samples; values must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid("empty image".into()));
        }
        if pixels.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "expected {} samples for {}x{} RGB, got {}",
                3 * height * width,
                height,
                width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            original_height: height,
            original_width: width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn original_height(&self) -> usize {
        self.original_height
    }

    pub fn original_width(&self) -> usize {
        self.original_width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn is_padded_to(&self, multiple: usize) -> bool {
        self.height % multiple == 0 && self.width % multiple == 0
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// `[1, 3, H, W]` tensor of the stored samples.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.pixels.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Build from a `[1, 3, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, original_height: usize, original_width: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("expected [1, 3, H, W], got {:?}", t.shape())));
        }
        if original_height > h || original_width > w {
            return Err(Error::Shape("original dims exceed tensor dims".into()));
        }
        let pixels = t
            .data()
            .iter()
            .map(|&v| v.as_f64().clamp(0.0, 1.0) as f32)
            .collect();
        Ok(Self {
            height: h,
            width: w,
            original_height,
            original_width,
            pixels,
        })
    }

    /// Crop to the recorded original dimensions.
    pub fn crop_to_original(&self) -> Self {
        if self.height == self.original_height && self.width == self.original_width {
            return self.clone();
        }
        let (oh, ow) = (self.original_height, self.original_width);
        let mut pixels = Vec::with_capacity(3 * oh * ow);
        for c in 0..3 {
            for y in 0..oh {
                let row = (c * self.height + y) * self.width;
                pixels.extend_from_slice(&self.pixels[row..row + ow]);
            }
        }
        Self {
            height: oh,
            width: ow,
            original_height: oh,
            original_width: ow,
            pixels,
        }
    }

    /// 8-bit samples, `round(v·255)`, planar.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_u8_planar(height: usize, width: usize, samples: &[u8]) -> Result<Self> {
        Self::new(height, width, samples.iter().map(|&v| v as f32 / 255.0).collect())
    }

    /// Decode any RGB(A)/gray image file supported by the `image` crate (PNG, JPEG, PNM, BMP enabled).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        let mut planar = vec![0u8; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = px[c];
            }
        }
        Self::from_u8_planar(h, w, &planar)
    }

    /// Write an 8-bit PNG of the stored samples.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let planar = self.to_u8();
        let (h, w) = (self.height, self.width);
        let mut interleaved = vec![0u8; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                interleaved[3 * i + c] = planar[c * h * w + i];
            }
        }
        image::save_buffer(path, &interleaved, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        })
    }
}

/// Pad bottom/right by edge replication to the next multiple of 64, keeping the original dims.
pub fn pad_image(raw: &ImageBuffer) -> ImageBuffer {
    pad_to_multiple(raw, PAD_MULTIPLE)
}

pub fn pad_to_multiple(raw: &ImageBuffer, multiple: usize) -> ImageBuffer {
    let (h, w) = (raw.height, raw.width);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let mut pixels = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                pixels.push(raw.pixels[(c * h + sy) * w + x.min(w - 1)]);
            }
        }
    }
    ImageBuffer {
        height: ph,
        width: pw,
        original_height: raw.original_height,
        original_width: raw.original_width,
        pixels,
    }
}

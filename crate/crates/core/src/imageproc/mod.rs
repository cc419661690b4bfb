//! Fundus preprocessing: grayscale, circle-crop, median subtraction, gamma,
//! CLAHE, resize and normalization to [−1, 1]. Nothing here uses an RNG.

mod clahe;
mod crop;
mod io;
mod median;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use clahe::{clahe, histogram_entropy};
pub use crop::{circle_crop, circle_mask, CROP_THRESHOLD};
pub use io::{load_image, save_image};
pub use median::{median_filter, median_subtract, MedianMode};

/// 8-bit row-major image with 1 or 3 interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(RasterImage { width, height, channels, data })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        RasterImage { width, height, channels: 1, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Sample of a grayscale image.
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    fn require_gray(&self, op: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::invalid(format!("{op} needs a grayscale image, got {} channels", self.channels)));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        RasterImage { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }
}

/// Single-channel image with samples in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl NormalizedImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(format!("{width}x{height} image with {} samples", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("sample {v} outside [-1, 1]")));
        }
        Ok(NormalizedImage { width, height, data })
    }

    pub(crate) fn from_clamped(width: usize, height: usize, data: Vec<f32>) -> Self {
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        NormalizedImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `[1, height, width]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    /// Accepts `[h, w]` or `[1, h, w]`; out-of-range samples are clamped.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            &[h, w] | &[1, h, w] => (h, w),
            s => return Err(Error::shape(format!("expected a single-channel image tensor, got {s:?}"))),
        };
        Ok(Self::from_clamped(w, h, t.data().to_vec()))
    }

    /// Inverse of [`normalize_pm1`], rounding to the nearest level.
    pub fn to_raster(&self) -> RasterImage {
        let data = self.data.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
        RasterImage { width: self.width, height: self.height, channels: 1, data }
    }
}

/// `round(0.299 R + 0.587 G + 0.114 B)`; grayscale input passes through.
pub fn to_grayscale(img: &RasterImage) -> Result<RasterImage> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|p| {
                    let l = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                    l.round().clamp(0.0, 255.0) as u8
                })
                .collect();
            RasterImage::gray(img.width, img.height, data)
        }
        c => Err(Error::invalid(format!("unsupported channel count {c}"))),
    }
}

/// `round(255 · (in / 255)^gamma)`.
pub fn gamma_correct(img: &RasterImage, gamma: f64) -> Result<RasterImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let lut: Vec<u8> =
        (0..=255u8).map(|v| (255.0 * (f64::from(v) / 255.0).powf(gamma)).round().clamp(0.0, 255.0) as u8).collect();
    Ok(img.map(|v| lut[v as usize]))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &RasterImage, width: usize, height: usize) -> Result<RasterImage> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("resize target {width}x{height}")));
    }
    if (width, height) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let c = img.channels;
    let xs = axis_weights(img.width, width);
    let ys = axis_weights(img.height, height);
    let mut data = Vec::with_capacity(width * height * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let s = |x: usize, y: usize| f64::from(img.data[(y * img.width + x) * c + ch]);
                let top = s(x0, y0) * (1.0 - fx) + s(x1, y0) * fx;
                let bottom = s(x0, y1) * (1.0 - fx) + s(x1, y1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(width, height, c, data)
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// `in / 127.5 − 1`.
pub fn normalize_pm1(img: &RasterImage) -> Result<NormalizedImage> {
    img.require_gray("normalize_pm1")?;
    let data = img.data.iter().map(|&v| f32::from(v) / 127.5 - 1.0).collect();
    Ok(NormalizedImage::from_clamped(img.width, img.height, data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub crop_threshold: u8,
    pub median: MedianMode,
    pub gamma: f64,
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f64,
    pub size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_threshold: CROP_THRESHOLD,
            median: MedianMode::Subtract { window: 31 },
            gamma: 1.2,
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            size: 224,
        }
    }
}

/// grayscale → circle-crop → median → gamma → CLAHE → resize → normalize.
/// The circle mask is applied again after resizing so the background stays
/// exactly −1.
pub fn preprocess_chain(img: &RasterImage, config: &PreprocessConfig) -> Result<NormalizedImage> {
    let gray = to_grayscale(img)?;
    let cropped = circle_crop(&gray, config.crop_threshold)?;
    let filtered = match config.median {
        MedianMode::Subtract { window } => median_subtract(&cropped, window)?,
        MedianMode::Filter => median_filter(&cropped, 3)?,
    };
    let corrected = gamma_correct(&filtered, config.gamma)?;
    let (tx, ty) = config.clahe_tiles;
    let equalized = clahe(&corrected, tx, ty, config.clahe_clip)?;
    let resized = resize(&equalized, config.size, config.size)?;
    normalize_pm1(&circle_mask(&resized)?)
}

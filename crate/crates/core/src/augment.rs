//! Online augmentation of normalized single-channel images: one composed
//! affine warp (rotation, shear, zoom, shift about the center), horizontal
//! flip, and multiplicative brightness.

use crate::error::{Error, Result};
use crate::imageproc::NormalizedImage;
use crate::tensor::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Degrees.
    pub rotation_max: f64,
    /// Fraction of width / height.
    pub shift_max: f64,
    /// Degrees.
    pub shear_max: f64,
    pub zoom_max: f64,
    pub hflip: bool,
    pub brightness_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max: 20.0,
            shift_max: 0.2,
            shear_max: 10.0,
            zoom_max: 0.2,
            hflip: true,
            brightness_range: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn none() -> Self {
        AugmentConfig {
            rotation_max: 0.0,
            shift_max: 0.0,
            shear_max: 0.0,
            zoom_max: 0.0,
            hflip: false,
            brightness_range: (1.0, 1.0),
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::none()
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_max, self.shift_max, self.shear_max, self.zoom_max];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("augmentation ranges must be finite and non-negative".into()));
        }
        if self.zoom_max >= 1.0 {
            return Err(Error::Config(format!("zoom_max must be < 1, got {}", self.zoom_max)));
        }
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid brightness range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Scale factor; > 1 enlarges the content.
    pub zoom: f64,
    /// Fractions of width and height; positive moves content right / down.
    pub shift: (f64, f64),
    pub flip: bool,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { rotation_deg: 0.0, shear_deg: 0.0, zoom: 1.0, shift: (0.0, 0.0), flip: false, brightness: 1.0 }
    }

    fn is_identity_warp(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear_deg == 0.0 && self.zoom == 1.0 && self.shift == (0.0, 0.0) && !self.flip
    }
}

/// Each parameter uniform over its symmetric range, in the order rotation,
/// shift x, shift y, shear, zoom, flip, brightness.
pub fn sample_params(config: &AugmentConfig, rng: &mut RngStream) -> AugmentParams {
    let sym = |rng: &mut RngStream, m: f64| if m > 0.0 { rng.uniform(-m, m) } else { 0.0 };
    let rotation_deg = sym(rng, config.rotation_max);
    let shift = (sym(rng, config.shift_max), sym(rng, config.shift_max));
    let shear_deg = sym(rng, config.shear_max);
    let zoom = 1.0 + sym(rng, config.zoom_max);
    let flip = config.hflip && rng.bernoulli(0.5);
    let (lo, hi) = config.brightness_range;
    let brightness = if hi > lo { rng.uniform(lo, hi) } else { lo };
    AugmentParams { rotation_deg, shear_deg, zoom, shift, flip, brightness }
}

/// Parameters for one image in one epoch, from its own substream.
pub fn params_for(config: &AugmentConfig, seed: u64, epoch: u64, index: u64) -> AugmentParams {
    sample_params(config, &mut RngStream::derive(seed, &[epoch, index]))
}

/// Warps `img` by `A = R(rotation)·S(shear)·Z(zoom)` about the center, then
/// shifts, then mirrors horizontally if `flip`. Samples bilinearly; pixels
/// mapped from outside the source are −1.
pub fn apply_affine(img: &NormalizedImage, params: &AugmentParams) -> NormalizedImage {
    if params.is_identity_warp() {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let k = params.shear_deg.to_radians().tan();
    let z = params.zoom;
    // A = R · S · Z with S = [[1, k], [0, 1]]
    let a = [[cos * z, (cos * k - sin) * z], [sin * z, (sin * k + cos) * z]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (tx, ty) = (params.shift.0 * w as f64, params.shift.1 * h as f64);

    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            -1.0
        } else {
            f64::from(img.at(x as usize, y as usize))
        }
    };
    let mut out = Vec::with_capacity(w * h);
    for oy in 0..h {
        for ox in 0..w {
            let ox = if params.flip { w - 1 - ox } else { ox };
            let (dx, dy) = (ox as f64 - cx - tx, oy as f64 - cy - ty);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = sample(x0, y0) * (1.0 - fx) + if fx > 0.0 { sample(x0 + 1, y0) * fx } else { 0.0 };
            let bottom = if fy > 0.0 {
                sample(x0, y0 + 1) * (1.0 - fx) + if fx > 0.0 { sample(x0 + 1, y0 + 1) * fx } else { 0.0 }
            } else {
                0.0
            };
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    NormalizedImage::from_clamped(w, h, out)
}

/// `clamp(((in + 1) / 2 · factor) · 2 − 1, −1, 1)`.
pub fn apply_brightness(img: &NormalizedImage, factor: f64) -> Result<NormalizedImage> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("brightness factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let data = img.data().iter().map(|&v| (((f64::from(v) + 1.0) / 2.0 * factor) * 2.0 - 1.0) as f32).collect();
    Ok(NormalizedImage::from_clamped(img.width(), img.height(), data))
}

pub fn augment(img: &NormalizedImage, params: &AugmentParams) -> Result<NormalizedImage> {
    apply_brightness(&apply_affine(img, params), params.brightness)
}

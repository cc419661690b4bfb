use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageFormat};

use super::RasterImage;
use crate::error::{Error, Result};

/// Reads PNG or binary PGM/PPM. Alpha is dropped; 16-bit samples are reduced
/// to 8 bits.
pub fn load_image(path: &Path) -> Result<RasterImage> {
    let decoded = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => RasterImage::new(w, h, 1, buf.into_raw()),
        other if !other.color().has_color() => RasterImage::new(w, h, 1, other.to_luma8().into_raw()),
        other => RasterImage::new(w, h, 3, other.to_rgb8().into_raw()),
    }
}

/// Writes PNG, or binary PGM/PPM for `.pgm`/`.ppm`/`.pnm`.
pub fn save_image(img: &RasterImage, path: &Path) -> Result<()> {
    let format = ImageFormat::from_path(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::invalid(format!("unsupported output format for {}", path.display())));
    }
    let color = if img.channels() == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, img.data(), img.width() as u32, img.height() as u32, color, format)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

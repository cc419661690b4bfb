use super::RasterImage;
use crate::error::{Error, Result};

/// Samples above this are foreground.
pub const CROP_THRESHOLD: u8 = 10;

/// Crops to the square around the foreground bounding box and zeroes
/// everything outside the inscribed circle. Repeats until the result is
/// stable, so applying it twice changes nothing.
pub fn circle_crop(img: &RasterImage, threshold: u8) -> Result<RasterImage> {
    img.require_gray("circle_crop")?;
    let mut current = crop_once(img, threshold)?;
    loop {
        let next = crop_once(&current, threshold)?;
        if next == current {
            return Ok(current);
        }
        current = next;
    }
}

fn crop_once(img: &RasterImage, threshold: u8) -> Result<RasterImage> {
    let (w, h) = (img.width(), img.height());
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if img.at(x, y) > threshold {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::Data("circle_crop: no foreground above threshold".into()));
    }
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let side = bw.max(bh);
    let left = x0 as isize - ((side - bw) / 2) as isize;
    let top = y0 as isize - ((side - bh) / 2) as isize;
    let square = RasterImage::from_fn(side, side, |x, y| {
        let (sx, sy) = (left + x as isize, top + y as isize);
        if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
            0
        } else {
            img.at(sx as usize, sy as usize)
        }
    });
    circle_mask(&square)
}

/// Zeroes samples outside the circle inscribed in the image.
pub fn circle_mask(img: &RasterImage) -> Result<RasterImage> {
    img.require_gray("circle_mask")?;
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let r = w.min(h) as f64 / 2.0;
    Ok(RasterImage::from_fn(w, h, |x, y| if (x as f64 - cx).hypot(y as f64 - cy) <= r { img.at(x, y) } else { 0 }))
}

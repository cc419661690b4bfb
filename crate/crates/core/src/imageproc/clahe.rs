use super::RasterImage;
use crate::error::{Error, Result};

/// Half-open tile boundaries along one axis.
fn bounds(len: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * len / tiles).collect()
}

fn centers(bounds: &[usize]) -> Vec<f64> {
    bounds.windows(2).map(|b| (b[0] + b[1]) as f64 / 2.0 - 0.5).collect()
}

/// Lower tile index and weight of the upper one for a pixel coordinate.
fn neighbours(centers: &[f64], p: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.windows(2).position(|c| p < c[1]).expect("inside the center range");
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

/// Equalization mapping of one tile: bins are clipped at
/// `clip_limit · area / 256`, the excess is spread over all bins, and the
/// mapping is the scaled cumulative histogram.
fn tile_lut(img: &RasterImage, xs: (usize, usize), ys: (usize, usize), clip_limit: f64) -> [f64; 256] {
    let mut hist = [0f64; 256];
    for y in ys.0..ys.1 {
        for x in xs.0..xs.1 {
            hist[img.at(x, y) as usize] += 1.0;
        }
    }
    let area = ((xs.1 - xs.0) * (ys.1 - ys.0)) as f64;
    let limit = clip_limit * area / 256.0;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / 256.0;
    let mut lut = [0f64; 256];
    let mut cdf = 0.0;
    for (v, h) in hist.iter().enumerate() {
        cdf += h + share;
        lut[v] = 255.0 * cdf / area;
    }
    lut
}

/// Contrast-limited adaptive histogram equalization over a `tiles_x` by
/// `tiles_y` grid; tile mappings are blended bilinearly between tile centers.
pub fn clahe(img: &RasterImage, tiles_x: usize, tiles_y: usize, clip_limit: f64) -> Result<RasterImage> {
    img.require_gray("clahe")?;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::invalid("clahe needs at least one tile"));
    }
    if img.width() < tiles_x || img.height() < tiles_y {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than the {tiles_x}x{tiles_y} tile grid",
            img.width(),
            img.height()
        )));
    }
    if !(clip_limit > 0.0) {
        return Err(Error::invalid(format!("clip limit must be positive, got {clip_limit}")));
    }
    let (bx, by) = (bounds(img.width(), tiles_x), bounds(img.height(), tiles_y));
    let luts: Vec<[f64; 256]> = (0..tiles_y)
        .flat_map(|ty| (0..tiles_x).map(move |tx| (tx, ty)))
        .map(|(tx, ty)| tile_lut(img, (bx[tx], bx[tx + 1]), (by[ty], by[ty + 1]), clip_limit))
        .collect();
    let (cx, cy) = (centers(&bx), centers(&by));
    let columns: Vec<_> = (0..img.width()).map(|x| neighbours(&cx, x as f64)).collect();
    Ok(RasterImage::from_fn(img.width(), img.height(), |x, y| {
        let (y0, y1, fy) = neighbours(&cy, y as f64);
        let (x0, x1, fx) = columns[x];
        let v = img.at(x, y) as usize;
        let l = |tx: usize, ty: usize| luts[ty * tiles_x + tx][v];
        let top = l(x0, y0) * (1.0 - fx) + l(x1, y0) * fx;
        let bottom = l(x0, y1) * (1.0 - fx) + l(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    }))
}

/// Shannon entropy of the 256-bin histogram, in bits.
pub fn histogram_entropy(img: &RasterImage) -> f64 {
    let mut hist = [0usize; 256];
    img.data().iter().for_each(|&v| hist[v as usize] += 1);
    let n = img.data().len() as f64;
    hist.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> RasterImage {
        RasterImage::from_fn(256, 256, |x, _| (100 + 31 * x / 256) as u8)
    }

    #[test]
    fn constant_stays_constant() {
        for v in [0u8, 37, 200, 255] {
            let img = RasterImage::from_fn(50, 37, |_, _| v);
            let out = clahe(&img, 8, 8, 2.0).unwrap();
            assert!(out.data().iter().all(|&s| s == out.data()[0]), "{v}");
        }
    }

    /// Per-pixel reference: rebuilds the four surrounding tile mappings from
    /// scratch for every pixel.
    fn oracle(img: &RasterImage, tiles: (usize, usize), clip: f64) -> Vec<u8> {
        let (w, h) = (img.width(), img.height());
        let tile_map = |tx: usize, ty: usize, v: usize| {
            let (x0, x1) = (tx * w / tiles.0, (tx + 1) * w / tiles.0);
            let (y0, y1) = (ty * h / tiles.1, (ty + 1) * h / tiles.1);
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            let mut counts = vec![0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[img.at(x, y) as usize] += 1.0;
                }
            }
            let limit = clip * area / 256.0;
            let excess: f64 = counts.iter().map(|&c| (c - limit).max(0.0)).sum();
            let below: f64 = counts[..=v].iter().map(|&c| c.min(limit) + excess / 256.0).sum();
            255.0 * below / area
        };
        let locate = |p: usize, len: usize, tiles: usize| {
            let c: Vec<f64> =
                (0..tiles).map(|i| ((i * len / tiles + (i + 1) * len / tiles) as f64 - 1.0) / 2.0).collect();
            let p = p as f64;
            if p <= c[0] {
                (0, 0, 0.0)
            } else if p >= c[tiles - 1] {
                (tiles - 1, tiles - 1, 0.0)
            } else {
                let i = (0..tiles - 1).find(|&i| p < c[i + 1]).unwrap();
                (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
            }
        };
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = img.at(x, y) as usize;
                let (a, b, fx) = locate(x, w, tiles.0);
                let (c, d, fy) = locate(y, h, tiles.1);
                let top = tile_map(a, c, v) * (1.0 - fx) + tile_map(b, c, v) * fx;
                let bottom = tile_map(a, d, v) * (1.0 - fx) + tile_map(b, d, v) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).round() as u8);
            }
        }
        out
    }

    #[test]
    fn matches_per_pixel_oracle() {
        let mut rng = crate::tensor::RngStream::new(5, 0);
        let img = RasterImage::from_fn(45, 38, |x, y| ((x * 3 + y) as f64 + rng.uniform(0.0, 40.0)) as u8);
        assert_eq!(clahe(&img, 4, 3, 2.0).unwrap().into_data(), oracle(&img, (4, 3), 2.0));
        for clip in [1.0, 2.0, 40.0] {
            let got = clahe(&ramp_small(), 4, 4, clip).unwrap().into_data();
            assert_eq!(got, oracle(&ramp_small(), (4, 4), clip), "clip {clip}");
        }
    }

    fn ramp_small() -> RasterImage {
        RasterImage::from_fn(64, 64, |x, y| (100 + 31 * (x + y) / 128) as u8)
    }

    #[test]
    fn ramp_stretch_is_bounded_by_the_clip_limit() {
        let img = ramp();
        let out = clahe(&img, 8, 8, 2.0).unwrap();
        let reference = oracle(&img, (8, 8), 2.0);
        assert_eq!(out.data(), reference.as_slice());
        let (lo, hi) = (*reference.iter().min().unwrap(), *reference.iter().max().unwrap());
        assert_eq!((lo, hi), (99, 134));
        let unclipped = clahe(&img, 8, 8, 1000.0).unwrap();
        assert_eq!(unclipped.data().iter().max(), Some(&255));
    }

    #[test]
    fn entropy_rises_on_radial_ramp() {
        let img = RasterImage::from_fn(128, 128, |x, y| {
            let d = (x as f64 - 64.0).hypot(y as f64 - 64.0) / 64.0;
            (100.0 + (31.0 * d.min(0.999)).floor()) as u8
        });
        let out = clahe(&img, 8, 8, 2.0).unwrap();
        assert!(histogram_entropy(&out) > histogram_entropy(&img));
    }
}

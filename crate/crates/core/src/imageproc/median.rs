use super::RasterImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MedianMode {
    /// `clamp(img − median(img, window) + 128, 0, 255)`.
    Subtract { window: usize },
    /// Plain 3x3 median filter.
    Filter,
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!("median window must be odd and >= 3, got {window}")));
    }
    Ok(())
}

/// Square median filter with replicated borders, using a sliding histogram
/// per row.
pub fn median_filter(img: &RasterImage, window: usize) -> Result<RasterImage> {
    img.require_gray("median_filter")?;
    check_window(window)?;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let r = (window / 2) as isize;
    let rank = window * window / 2;
    let at = |x: isize, y: isize| img.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as usize;
    let mut out = Vec::with_capacity(img.data().len());
    for y in 0..h {
        let mut hist = [0u32; 256];
        for dy in -r..=r {
            for dx in -r..=r {
                hist[at(dx, y + dy)] += 1;
            }
        }
        for x in 0..w {
            if x > 0 {
                for dy in -r..=r {
                    hist[at(x - r - 1, y + dy)] -= 1;
                    hist[at(x + r, y + dy)] += 1;
                }
            }
            let mut seen = 0usize;
            let median = hist
                .iter()
                .position(|&c| {
                    seen += c as usize;
                    seen > rank
                })
                .expect("window is non-empty");
            out.push(median as u8);
        }
    }
    RasterImage::gray(img.width(), img.height(), out)
}

pub fn median_subtract(img: &RasterImage, window: usize) -> Result<RasterImage> {
    let background = median_filter(img, window)?;
    let data = img
        .data()
        .iter()
        .zip(background.data())
        .map(|(&v, &m)| (i16::from(v) - i16::from(m) + 128).clamp(0, 255) as u8)
        .collect();
    RasterImage::gray(img.width(), img.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Sorts each replicated-border window.
    fn sort_oracle(img: &RasterImage, window: usize) -> Vec<u8> {
        let (w, h, r) = (img.width() as isize, img.height() as isize, (window / 2) as isize);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut v: Vec<u8> = (-r..=r)
                    .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| img.at((x + dx).clamp(0, w - 1) as usize, (y + dy).clamp(0, h - 1) as usize))
                    .collect();
                v.sort_unstable();
                out.push(v[v.len() / 2]);
            }
        }
        out
    }

    #[test]
    fn patch_center() {
        let img = RasterImage::gray(3, 3, vec![1, 2, 3, 4, 100, 6, 7, 8, 9]).unwrap();
        assert_eq!(median_filter(&img, 3).unwrap().at(1, 1), 6);
    }

    #[test]
    fn constants() {
        let img = RasterImage::from_fn(17, 9, |_, _| 77);
        assert_eq!(median_filter(&img, 3).unwrap(), img);
        for window in [3, 5, 31] {
            assert!(median_subtract(&img, window).unwrap().data().iter().all(|&v| v == 128));
        }
    }

    #[test]
    fn rejects_bad_windows() {
        let img = RasterImage::from_fn(5, 5, |_, _| 0);
        for window in [0, 1, 2, 4] {
            assert!(median_filter(&img, window).is_err());
        }
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(w in 1usize..12, h in 1usize..12, window in prop::sample::select(vec![3usize, 5, 7]), seed in 0u64..1000) {
            let mut rng = crate::tensor::RngStream::new(seed, 2);
            let img = RasterImage::from_fn(w, h, |_, _| rng.uniform(0.0, 255.99) as u8);
            prop_assert_eq!(median_filter(&img, window).unwrap().into_data(), sort_oracle(&img, window));
        }
    }
}

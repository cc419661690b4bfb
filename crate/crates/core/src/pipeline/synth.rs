//! Generated datasets for desk-scale runs.

use std::path::Path;

use crate::classifier::{DrClass, NUM_CLASSES};
use crate::error::Result;
use crate::imageproc::{save_image, NormalizedImage};
use crate::tensor::RngStream;

use super::LabeledImages;

/// Class mix of the shape dataset: 60/15/15/5/5 %.
pub const SHAPE_FRACTIONS: [f64; NUM_CLASSES] = [0.60, 0.15, 0.15, 0.05, 0.05];

/// Shape drawn for each class, in [`DrClass`] order.
pub const SHAPE_NAMES: [&str; NUM_CLASSES] = ["disc", "square", "triangle", "cross", "ring"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeStyle {
    pub size: usize,
    pub noise: f64,
}

impl Default for ShapeStyle {
    fn default() -> Self {
        ShapeStyle { size: 32, noise: 0.05 }
    }
}

fn inside(class: DrClass, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        DrClass::NoDR => dx.hypot(dy) <= r,
        DrClass::Mild => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        DrClass::Moderate => dy.abs() <= 0.85 * r && dx.abs() <= 0.5 * (dy + 0.85 * r),
        DrClass::Severe => {
            let arm = 0.3 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        DrClass::Proliferative => (0.55 * r..=r).contains(&dx.hypot(dy)),
    }
}

/// One shape with random radius, position, intensity and pixel noise on a
/// −1 background.
pub fn shape_image(class: DrClass, style: ShapeStyle, rng: &mut RngStream) -> NormalizedImage {
    let s = style.size as f64;
    let r = rng.uniform(0.2 * s, 0.34 * s);
    let cx = rng.uniform(r + 1.0, s - r - 2.0);
    let cy = rng.uniform(r + 1.0, s - r - 2.0);
    let level = rng.uniform(0.2, 1.0);
    let data = (0..style.size * style.size)
        .map(|i| {
            let (x, y) = ((i % style.size) as f64 + 0.5, (i / style.size) as f64 + 0.5);
            let base = if inside(class, x - cx, y - cy, r) { level } else { -1.0 };
            (base + rng.normal(0.0, style.noise)) as f32
        })
        .collect();
    NormalizedImage::from_clamped(style.size, style.size, data)
}

/// Per-class counts for `total` images by largest remainder.
pub fn class_counts(total: usize, fractions: [f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let exact = fractions.map(|f| f * total as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total.saturating_sub(counts.iter().sum());
    order.iter().cycle().take(short).for_each(|&i| counts[i] += 1);
    counts
}

/// Images are grouped by class; image `i` of class `c` is drawn from its own
/// derived stream, so subsets are reproducible independently.
pub fn shape_dataset(total: usize, fractions: [f64; NUM_CLASSES], style: ShapeStyle, seed: u64) -> LabeledImages {
    let counts = class_counts(total, fractions);
    let mut out = LabeledImages::default();
    for c in DrClass::ALL {
        for i in 0..counts[c.index()] {
            let mut rng = RngStream::derive(seed, &[0x5A9E, c.index() as u64, i as u64]);
            out.push(shape_image(c, style, &mut rng), c);
        }
    }
    out
}

/// Bright discs and rings for GAN training, alternating.
pub fn disc_ring_images(n: usize, size: usize, seed: u64) -> Vec<NormalizedImage> {
    let style = ShapeStyle { size, noise: 0.03 };
    (0..n)
        .map(|i| {
            let class = if i % 2 == 0 { DrClass::NoDR } else { DrClass::Proliferative };
            shape_image(class, style, &mut RngStream::derive(seed, &[0xD15C, i as u64]))
        })
        .collect()
}

/// Writes `root/{class dir}/{index:05}.png`, loadable with `load_manifest`.
pub fn write_class_folders(data: &LabeledImages, root: &Path) -> Result<()> {
    for (i, (img, label)) in data.images.iter().zip(&data.labels).enumerate() {
        save_image(&img.to_raster(), &root.join(label.dir_name()).join(format!("{i:05}.png")))?;
    }
    Ok(())
}

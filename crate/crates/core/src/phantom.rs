//! Synthetic chest-slice phantoms with analytically known lung regions, plus
//! toy circle and blob images for training experiments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::morphoseg::BinaryMask;
use crate::raster::{save_image, save_mask, Label, Raster};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Pixel centres are tested, so `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.rx * self.ry
    }

    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x, y))
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Raster,
    /// Union of the two lung ellipses.
    pub truth: BinaryMask,
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
    pub nodule: Option<Ellipse>,
    pub label: Label,
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A `size × size` slice: a bright body disk on a dark background holding two
/// dark lung ellipses; cancerous phantoms add a bright nodule inside one lung.
/// Geometry is jittered by the seed and pixels get uniform noise.
pub fn chest_phantom(size: usize, label: Label, seed: u64) -> Result<Phantom> {
    if size < 16 {
        return Err(Error::param("size", "phantoms need at least 16 pixels per side"));
    }
    let mut rng = rng_for(seed, 0);
    let s = size as f64;
    let mut jit = |scale: f64| rng.gen_range(-scale..=scale) * s;
    let c = s / 2.0;
    let body = Ellipse {
        cx: c + jit(0.01),
        cy: c + jit(0.01),
        rx: 0.47 * s,
        ry: 0.45 * s,
    };
    let lung = |side: f64, j: &mut dyn FnMut(f64) -> f64| Ellipse {
        cx: c + side * 0.234 * s + j(0.015),
        cy: c + j(0.02),
        rx: 0.125 * s + j(0.008),
        ry: 0.266 * s + j(0.015),
    };
    let lungs = [lung(-1.0, &mut jit), lung(1.0, &mut jit)];
    let nodule = (label == Label::Cancerous).then(|| {
        let l = lungs[rng.gen_range(0..2)];
        let r = 0.05 * s;
        Ellipse {
            cx: l.cx + rng.gen_range(-0.3..0.3) * l.rx,
            cy: l.cy + rng.gen_range(-0.4..0.4) * l.ry,
            rx: r,
            ry: r,
        }
    });
    let background = rng.gen_range(8..20) as f64;
    let tissue = rng.gen_range(150..185) as f64;
    let air = rng.gen_range(30..50) as f64;
    let lesion = rng.gen_range(150..200) as f64;
    let noise = 6.0;
    let image = Raster::from_fn(size, size, |x, y| {
        let base = if nodule.is_some_and(|n| n.contains(x, y)) {
            lesion
        } else if lungs.iter().any(|l| l.contains(x, y)) {
            air
        } else if body.contains(x, y) {
            tissue
        } else {
            background
        };
        (base + rng.gen_range(-noise..=noise)).round().clamp(0.0, 255.0) as u8
    });
    let truth = BinaryMask::from_fn(size, size, |x, y| lungs.iter().any(|l| l.contains(x, y)));
    Ok(Phantom {
        image,
        truth,
        body,
        lungs,
        nodule,
        label,
    })
}

/// `n` phantoms alternating normal / cancerous, image `i` seeded from `(seed, i)`.
pub fn chest_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Phantom>> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Normal } else { Label::Cancerous };
            chest_phantom(size, label, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1))
        })
        .collect()
}

/// Writes `normal/` and `cancerous/` PGM images under `dir` plus ground-truth
/// lung masks under `truth/`. Returns the image paths.
pub fn write_chest_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(n);
    for sub in ["normal", "cancerous", "truth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (i, p) in chest_dataset(n, size, seed)?.into_iter().enumerate() {
        let class = match p.label {
            Label::Normal => "normal",
            Label::Cancerous => "cancerous",
        };
        let stem = format!("phantom_{i:04}");
        let path = dir.join(class).join(format!("{stem}.pgm"));
        save_image(&p.image, &path)?;
        save_mask(&p.truth, dir.join("truth").join(format!("{stem}.pgm")))?;
        paths.push(path);
    }
    Ok(paths)
}

/// A bright disk on a dark background with its exact mask.
pub fn circle_image(size: usize, seed: u64) -> (Raster, BinaryMask) {
    let mut rng = rng_for(seed, 1);
    let s = size as f64;
    let r = rng.gen_range(0.15..0.3) * s;
    let disk = Ellipse {
        cx: rng.gen_range(r..s - r),
        cy: rng.gen_range(r..s - r),
        rx: r,
        ry: r,
    };
    let img = Raster::from_fn(size, size, |x, y| {
        let base = if disk.contains(x, y) { 200.0 } else { 40.0 };
        (base + rng.gen_range(-10.0f64..=10.0)).round() as u8
    });
    (img, disk.mask(size, size))
}

/// Mid-gray image with one blob that is bright (`true`) or dark (`false`).
pub fn blob_image(size: usize, bright: bool, seed: u64) -> Raster {
    let mut rng = rng_for(seed, 2);
    let s = size as f64;
    let r = rng.gen_range(0.12..0.2) * s;
    let blob = Ellipse {
        cx: rng.gen_range(r..s - r),
        cy: rng.gen_range(r..s - r),
        rx: r,
        ry: r * rng.gen_range(0.8..1.25),
    };
    let value = if bright { 215.0 } else { 40.0 };
    Raster::from_fn(size, size, |x, y| {
        let base = if blob.contains(x, y) { value } else { 128.0 };
        (base + rng.gen_range(-12.0f64..=12.0)).round() as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_geometry() {
        let p = chest_phantom(128, Label::Cancerous, 3).unwrap();
        assert!(p.nodule.is_some());
        let gap = (p.lungs[1].cx - p.lungs[1].rx) - (p.lungs[0].cx + p.lungs[0].rx);
        assert!(gap > 20.0, "lungs {gap} px apart");
        let frac = p.truth.area_fraction();
        assert!((0.1..0.3).contains(&frac), "lung fraction {frac}");
        let again = chest_phantom(128, Label::Cancerous, 3).unwrap();
        assert_eq!(again.image, p.image);
        assert!(chest_phantom(128, Label::Normal, 3).unwrap().nodule.is_none());
    }

    #[test]
    fn dataset_alternates_labels() {
        let d = chest_dataset(6, 64, 1).unwrap();
        let labels: Vec<Label> = d.iter().map(|p| p.label).collect();
        assert_eq!(labels[0], Label::Normal);
        assert_eq!(labels[1], Label::Cancerous);
        assert_ne!(d[0].image, d[2].image);
    }
}

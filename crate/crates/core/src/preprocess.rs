//! Contrast enhancement (CLAHE), rescaling and intensity normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FloatRaster, Raster};

pub const HIST_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            clip_limit: 2.0,
            tiles_x: 8,
            tiles_y: 8,
        }
    }
}

impl ClaheParams {
    pub fn new(clip_limit: f64, tiles_x: usize, tiles_y: usize) -> Result<Self> {
        let p = ClaheParams {
            clip_limit,
            tiles_x,
            tiles_y,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_limit >= 1.0) || !self.clip_limit.is_finite() {
            return Err(Error::param("clip_limit", "must be finite and >= 1.0"));
        }
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::param("grid", "tile counts must be >= 1"));
        }
        Ok(())
    }
}

/// Tile boundaries along one axis; the last tile absorbs the remainder.
fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    let base = len / tiles;
    (0..tiles)
        .map(|i| {
            let start = i * base;
            let end = if i + 1 == tiles { len } else { start + base };
            (start, end)
        })
        .collect()
}

/// Clipped-histogram equalization mapping for one tile.
fn tile_mapping(hist: &mut [u64; HIST_BINS], n: u64, clip_limit: f64) -> [u8; HIST_BINS] {
    let clip = (clip_limit * n as f64 / HIST_BINS as f64).ceil() as u64;
    let mut excess = 0u64;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let share = excess / HIST_BINS as u64;
    let rem = (excess % HIST_BINS as u64) as usize;
    for (i, h) in hist.iter_mut().enumerate() {
        *h += share + u64::from(i < rem);
    }
    let mut map = [0u8; HIST_BINS];
    let mut cdf = 0u64;
    for (v, m) in map.iter_mut().enumerate() {
        cdf += hist[v];
        *m = (255.0 * cdf as f64 / n as f64).round().clamp(0.0, 255.0) as u8;
    }
    map
}

/// Interpolation neighbours and weight of coordinate `p` against tile centres.
fn neighbours(p: f64, centres: &[f64]) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if p <= centres[0] {
        return (0, 0, 0.0);
    }
    if p >= centres[last] {
        return (last, last, 0.0);
    }
    // centres are strictly increasing
    let i = centres.partition_point(|&c| c <= p) - 1;
    let w = (p - centres[i]) / (centres[i + 1] - centres[i]);
    (i, i + 1, w)
}

pub fn clahe(img: &Raster, p: &ClaheParams) -> Result<Raster> {
    p.validate()?;
    let (w, h) = img.dims();
    if w < p.tiles_x || h < p.tiles_y {
        return Err(Error::DimensionMismatch(format!(
            "{w}x{h} image is smaller than the {}x{} tile grid",
            p.tiles_x, p.tiles_y
        )));
    }
    let xs = tile_bounds(w, p.tiles_x);
    let ys = tile_bounds(h, p.tiles_y);
    let mut maps = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            let mut hist = [0u64; HIST_BINS];
            for y in y0..y1 {
                for &v in &img.data()[y * w + x0..y * w + x1] {
                    hist[v as usize] += 1;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as u64;
            maps.push(tile_mapping(&mut hist, n, p.clip_limit));
        }
    }
    let centre = |&(a, b): &(usize, usize)| (a + b - 1) as f64 / 2.0;
    let cx: Vec<f64> = xs.iter().map(centre).collect();
    let cy: Vec<f64> = ys.iter().map(centre).collect();
    let col: Vec<(usize, usize, f64)> = (0..w).map(|x| neighbours(x as f64, &cx)).collect();

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ty0, ty1, wy) = neighbours(y as f64, &cy);
        for (x, &(tx0, tx1, wx)) in col.iter().enumerate() {
            let v = img.get(x, y) as usize;
            let m = |ty: usize, tx: usize| maps[ty * p.tiles_x + tx][v] as f64;
            let top = m(ty0, tx0) * (1.0 - wx) + m(ty0, tx1) * wx;
            let bottom = m(ty1, tx0) * (1.0 - wx) + m(ty1, tx1) * wx;
            let value = top * (1.0 - wy) + bottom * wy;
            out.push(value.round().clamp(0.0, 255.0) as u8);
        }
    }
    Raster::new(w, h, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeKind {
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeSpec {
    pub target_w: usize,
    pub target_h: usize,
    pub kind: ResizeKind,
}

impl ResizeSpec {
    pub fn square(size: usize, kind: ResizeKind) -> Self {
        ResizeSpec {
            target_w: size,
            target_h: size,
            kind,
        }
    }
}

pub fn resize(img: &Raster, spec: &ResizeSpec) -> Result<Raster> {
    let (tw, th) = (spec.target_w, spec.target_h);
    if tw == 0 || th == 0 {
        return Err(Error::param("resize", "target dimensions must be > 0"));
    }
    let (w, h) = img.dims();
    let sx = w as f64 / tw as f64;
    let sy = h as f64 / th as f64;
    let out = match spec.kind {
        ResizeKind::Nearest => {
            let col: Vec<usize> = (0..tw).map(|x| (x * w / tw).min(w - 1)).collect();
            Raster::from_fn(tw, th, |x, y| img.get(col[x], (y * h / th).min(h - 1)))
        }
        ResizeKind::Bilinear => {
            let sample = |d: usize, scale: f64, len: usize| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            };
            let col: Vec<_> = (0..tw).map(|x| sample(x, sx, w)).collect();
            Raster::from_fn(tw, th, |x, y| {
                let (x0, x1, fx) = col[x];
                let (y0, y1, fy) = sample(y, sy, h);
                let g = |xx, yy| img.get(xx, yy) as f64;
                let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
                let bottom = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
                (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
            })
        }
    };
    Ok(out)
}

pub fn normalize(img: &Raster) -> FloatRaster {
    FloatRaster {
        width: img.width(),
        height: img.height(),
        data: img.data().iter().map(|&v| v as f64 / 255.0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_stays_constant() {
        let img = Raster::filled(128, 128, 64);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }

    #[test]
    fn single_tile_equalization() {
        let img = Raster::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        let p = ClaheParams::new(1000.0, 1, 1).unwrap();
        let out = clahe(&img, &p).unwrap();
        assert_eq!(out.data(), &[128, 128, 255, 255]);
    }

    #[test]
    fn clip_redistribution_conserves_mass() {
        let mut hist = [0u64; HIST_BINS];
        hist[10] = 900;
        hist[200] = 124;
        let map = tile_mapping(&mut hist, 1024, 2.0);
        assert_eq!(hist.iter().sum::<u64>(), 1024);
        assert_eq!(map[255], 255);
        // clip = ceil(2 * 1024 / 256) = 8
        assert!(hist[10] <= 8 + 1 + 1024 / 256);
    }

    #[test]
    fn grid_larger_than_image() {
        let img = Raster::filled(4, 4, 1);
        assert!(clahe(&img, &ClaheParams::default()).is_err());
        assert!(ClaheParams::new(0.5, 8, 8).is_err());
        assert!(ClaheParams::new(2.0, 0, 8).is_err());
    }

    #[test]
    fn nearest_upsample_checkerboard() {
        let img = Raster::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let out = resize(&img, &ResizeSpec::square(4, ResizeKind::Nearest)).unwrap();
        #[rustfmt::skip]
        let expected = [
            0, 0, 255, 255,
            0, 0, 255, 255,
            255, 255, 0, 0,
            255, 255, 0, 0,
        ];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn identity_resize() {
        let img = Raster::from_fn(7, 5, |x, y| (x * 31 + y * 7) as u8);
        let nn = resize(&img, &ResizeSpec { target_w: 7, target_h: 5, kind: ResizeKind::Nearest }).unwrap();
        assert_eq!(nn, img);
        let bl = resize(&img, &ResizeSpec { target_w: 7, target_h: 5, kind: ResizeKind::Bilinear }).unwrap();
        assert_eq!(bl, img);
        assert!(resize(&img, &ResizeSpec::square(0, ResizeKind::Nearest)).is_err());
    }

    #[test]
    fn normalize_values() {
        let img = Raster::new(3, 1, vec![0, 128, 255]).unwrap();
        let f = normalize(&img);
        assert_eq!(f.data[0], 0.0);
        assert!((f.data[1] - 0.50196).abs() < 1e-5);
        assert_eq!(f.data[1], 128.0 / 255.0);
        assert_eq!(f.data[2], 1.0);
    }

    fn raster_strategy() -> impl Strategy<Value = Raster> {
        (8usize..40, 8usize..40).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h)
                .prop_map(move |d| Raster::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clahe_shape_and_determinism(img in raster_strategy(), clip in 1.0f64..6.0, g in 1usize..8) {
            let p = ClaheParams::new(clip, g, g).unwrap();
            let a = clahe(&img, &p).unwrap();
            let b = clahe(&img, &p).unwrap();
            prop_assert_eq!(a.dims(), img.dims());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn resize_constant_and_binary(v in any::<u8>(), w in 1usize..20, h in 1usize..20, tw in 1usize..30, th in 1usize..30, bits in proptest::collection::vec(any::<bool>(), 400)) {
            let img = Raster::filled(w, h, v);
            for kind in [ResizeKind::Nearest, ResizeKind::Bilinear] {
                let out = resize(&img, &ResizeSpec { target_w: tw, target_h: th, kind }).unwrap();
                prop_assert_eq!(out.dims(), (tw, th));
                prop_assert!(out.data().iter().all(|&x| x == v));
            }
            let bin = Raster::from_fn(w, h, |x, y| if bits[y * 20 + x] { 255 } else { 0 });
            let out = resize(&bin, &ResizeSpec { target_w: tw, target_h: th, kind: ResizeKind::Nearest }).unwrap();
            prop_assert!(out.data().iter().all(|&x| x == 0 || x == 255));
        }

        #[test]
        fn normalize_is_monotone(a in any::<u8>(), b in any::<u8>()) {
            let f = normalize(&Raster::new(2, 1, vec![a.min(b), a.max(b)]).unwrap());
            prop_assert!(f.data[0] <= f.data[1]);
            prop_assert!((0.0..=1.0).contains(&f.data[0]) && (0.0..=1.0).contains(&f.data[1]));
        }
    }
}

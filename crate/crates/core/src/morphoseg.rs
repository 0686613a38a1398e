//! Classical lung segmentation: Otsu binarization, binary morphology,
//! connected components and the nine-step lung-mask pipeline.
//!
//! Border semantics: pixels outside the grid are background for both
//! dilation and erosion. Foreground connectivity defaults to 8, background
//! connectivity (hole filling) is 4.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    /// Pixels strictly above `threshold` become foreground.
    pub fn from_raster(r: &Raster, threshold: u8) -> Self {
        BinaryMask {
            width: r.width(),
            height: r.height(),
            bits: r.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(
            self.width.max(1),
            self.height.max(1),
            self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("mask dimensions are consistent")
    }

    pub fn area_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }
}

/// Disk-shaped structuring element, stored both as offsets and as
/// horizontal runs `(dy, dx_lo, dx_hi)` for the sliding-window kernels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    radius: usize,
    offsets: Vec<(i64, i64)>,
    runs: Vec<(i64, i64, i64)>,
}

impl StructuringElement {
    /// All offsets with `dx² + dy² ≤ r²`.
    pub fn disk(radius: usize) -> Self {
        let r = radius as i64;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    offsets.push((dx, dy));
                }
            }
        }
        Self::from_offsets(radius, offsets)
    }

    fn from_offsets(radius: usize, mut offsets: Vec<(i64, i64)>) -> Self {
        offsets.sort_by_key(|&(dx, dy)| (dy, dx));
        offsets.dedup();
        let mut runs: Vec<(i64, i64, i64)> = Vec::new();
        for &(dx, dy) in &offsets {
            match runs.last_mut() {
                Some(run) if run.0 == dy && run.2 + 1 == dx => run.2 = dx,
                _ => runs.push((dy, dx, dx)),
            }
        }
        StructuringElement {
            radius,
            offsets,
            runs,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }
}

/// Per-row prefix counts of foreground pixels; `row[y][x]` counts `[0, x)`.
fn row_prefix(m: &BinaryMask) -> Vec<u32> {
    let w = m.width;
    let mut p = vec![0u32; (w + 1) * m.height];
    for y in 0..m.height {
        let base = y * (w + 1);
        for x in 0..w {
            p[base + x + 1] = p[base + x] + m.bits[y * w + x] as u32;
        }
    }
    p
}

/// `out(x,y) = OR over se of m(x−dx, y−dy)`.
pub fn dilate(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (w, h) = (m.width as i64, m.height as i64);
    let prefix = row_prefix(m);
    let mut out = BinaryMask::empty(m.width, m.height);
    for y in 0..h {
        for x in 0..w {
            let hit = se.runs.iter().any(|&(dy, lo, hi)| {
                let sy = y - dy;
                if sy < 0 || sy >= h {
                    return false;
                }
                let a = (x - hi).max(0);
                let b = (x - lo).min(w - 1);
                if a > b {
                    return false;
                }
                let base = sy as usize * (m.width + 1);
                prefix[base + b as usize + 1] > prefix[base + a as usize]
            });
            if hit {
                out.bits[(y * w + x) as usize] = true;
            }
        }
    }
    out
}

/// `out(x,y) = AND over se of m(x+dx, y+dy)`.
pub fn erode(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (w, h) = (m.width as i64, m.height as i64);
    let prefix = row_prefix(m);
    let mut out = BinaryMask::empty(m.width, m.height);
    for y in 0..h {
        for x in 0..w {
            let fits = se.runs.iter().all(|&(dy, lo, hi)| {
                let sy = y + dy;
                let (a, b) = (x + lo, x + hi);
                if sy < 0 || sy >= h || a < 0 || b >= w {
                    return false;
                }
                let base = sy as usize * (m.width + 1);
                (prefix[base + b as usize + 1] - prefix[base + a as usize]) as i64 == b - a + 1
            });
            if fits {
                out.bits[(y * w + x) as usize] = true;
            }
        }
    }
    out
}

/// Dilation followed by erosion with the same element.
pub fn close(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    erode(&dilate(m, se), se)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Breadth-first flood over pixels where `pred(idx)` holds, starting from `seeds`.
fn flood(
    w: usize,
    h: usize,
    conn: Connectivity,
    seeds: impl IntoIterator<Item = usize>,
    mut pred: impl FnMut(usize) -> bool,
) -> Vec<bool> {
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    for s in seeds {
        if !seen[s] && pred(s) {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for &(dx, dy) in conn.offsets() {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !seen[j] && pred(j) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn border_indices(w: usize, h: usize) -> impl Iterator<Item = usize> {
    let top_bottom = (0..w).flat_map(move |x| [x, (h - 1) * w + x]);
    let sides = (0..h).flat_map(move |y| [y * w, y * w + w - 1]);
    top_bottom.chain(sides)
}

/// Removes every 8-connected foreground component touching the image border.
pub fn clear_border(m: &BinaryMask) -> BinaryMask {
    clear_border_with(m, Connectivity::Eight)
}

pub fn clear_border_with(m: &BinaryMask, conn: Connectivity) -> BinaryMask {
    if m.bits.is_empty() {
        return m.clone();
    }
    let touching = flood(m.width, m.height, conn, border_indices(m.width, m.height), |i| {
        m.bits[i]
    });
    BinaryMask {
        width: m.width,
        height: m.height,
        bits: m.bits.iter().zip(&touching).map(|(&b, &t)| b && !t).collect(),
    }
}

/// Connected-component labels; 0 is background, components are numbered
/// 1..=n in first-encounter raster-scan order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub n_components: usize,
}

impl LabelMap {
    /// Pixel area of each component, index `i` holding label `i + 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.n_components];
        for &l in &self.labels {
            if l > 0 {
                areas[l as usize - 1] += 1;
            }
        }
        areas
    }
}

pub fn label_components(m: &BinaryMask, conn: Connectivity) -> LabelMap {
    let (w, h) = m.dims();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !m.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if m.bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    LabelMap {
        width: w,
        height: h,
        labels,
        n_components: next as usize,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    FewerComponents { found: usize, requested: usize },
    EmptyMask,
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::FewerComponents { found, requested } => {
                write!(f, "only {found} component(s) found, {requested} requested")
            }
            Warning::EmptyMask => write!(f, "no foreground survived; mask is empty"),
        }
    }
}

/// Keeps the `k` largest components (ties to the smaller label).
pub fn select_largest(lm: &LabelMap, k: usize) -> (BinaryMask, Option<Warning>) {
    let areas = lm.areas();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    let mut keep = vec![false; lm.n_components + 1];
    for &i in order.iter().take(k) {
        keep[i + 1] = true;
    }
    let warning = (lm.n_components < k).then_some(Warning::FewerComponents {
        found: lm.n_components,
        requested: k,
    });
    let mask = BinaryMask {
        width: lm.width,
        height: lm.height,
        bits: lm.labels.iter().map(|&l| l > 0 && keep[l as usize]).collect(),
    };
    (mask, warning)
}

/// Background regions not 4-connected to the border become foreground.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    if m.bits.is_empty() {
        return m.clone();
    }
    let outside = flood(
        m.width,
        m.height,
        Connectivity::Four,
        border_indices(m.width, m.height),
        |i| !m.bits[i],
    );
    BinaryMask {
        width: m.width,
        height: m.height,
        bits: outside.iter().map(|&o| !o).collect(),
    }
}

pub fn apply_mask(img: &Raster, m: &BinaryMask) -> Result<Raster> {
    if img.dims() != m.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image {:?} vs mask {:?}",
            img.dims(),
            m.dims()
        )));
    }
    let data = img
        .data()
        .iter()
        .zip(&m.bits)
        .map(|(&v, &b)| if b { v } else { 0 })
        .collect();
    Raster::new(img.width(), img.height(), data)
}

/// Threshold maximizing between-class variance, classes `{v ≤ t}` / `{v > t}`.
/// Ties go to the smallest `t`; a constant image returns its value.
pub fn otsu_threshold(img: &Raster) -> Result<u8> {
    if img.data().is_empty() {
        return Err(Error::Empty("otsu on empty image".into()));
    }
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    Ok(otsu_from_histogram(&hist))
}

/// The objective `ω0·ω1·(μ0−μ1)²` is proportional to `(S0·N − S·n0)² / (n0·n1)`,
/// which is compared exactly in integers.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> u8 {
    let n: u64 = hist.iter().sum();
    let total: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    // best = (numerator, denominator, t)
    let mut best: Option<(u128, u128, u8)> = None;
    for t in 0..256usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 as i128 * n as i128 - total as i128 * n0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((bn, bd, _)) => match (num.checked_mul(bd), bn.checked_mul(den)) {
                (Some(l), Some(r)) => l > r,
                _ => (num as f64 / den as f64) > (bn as f64 / bd as f64),
            },
        };
        if better {
            best = Some((num, den, t as u8));
        }
    }
    match best {
        Some((_, _, t)) => t,
        // single populated bin
        None => hist.iter().position(|&c| c > 0).unwrap_or(0) as u8,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[serde(alias = "dark")]
    DarkForeground,
    #[serde(alias = "bright")]
    BrightForeground,
}

pub fn binarize(img: &Raster, t: u8, polarity: Polarity) -> BinaryMask {
    let bits = img
        .data()
        .iter()
        .map(|&v| match polarity {
            Polarity::DarkForeground => v <= t,
            Polarity::BrightForeground => v > t,
        })
        .collect();
    BinaryMask {
        width: img.width(),
        height: img.height(),
        bits,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LungMaskConfig {
    pub polarity: Polarity,
    pub r_dilate: usize,
    pub r_erode: usize,
    pub r_close: usize,
    pub keep: usize,
}

impl Default for LungMaskConfig {
    fn default() -> Self {
        LungMaskConfig {
            polarity: Polarity::DarkForeground,
            r_dilate: 5,
            r_erode: 4,
            r_close: 10,
            keep: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LungMask {
    pub mask: BinaryMask,
    pub masked: Raster,
    pub threshold: u8,
    /// Components found after dilation, before selection.
    pub components: usize,
    pub warnings: Vec<Warning>,
}

/// Intermediate masks of the pipeline, in execution order.
#[derive(Clone, Debug)]
pub struct PipelineStages {
    pub binary: BinaryMask,
    pub cleared: BinaryMask,
    pub dilated: BinaryMask,
    pub labels: LabelMap,
    pub selected: BinaryMask,
    pub eroded: BinaryMask,
    pub closed: BinaryMask,
    pub filled: BinaryMask,
}

pub fn lung_mask_stages(img: &Raster, cfg: &LungMaskConfig) -> Result<(PipelineStages, u8, Vec<Warning>)> {
    if cfg.keep == 0 {
        return Err(Error::param("keep", "must be >= 1"));
    }
    let t = otsu_threshold(img)?;
    let binary = binarize(img, t, cfg.polarity);
    let cleared = clear_border(&binary);
    let dilated = dilate(&cleared, &StructuringElement::disk(cfg.r_dilate));
    let labels = label_components(&dilated, Connectivity::Eight);
    let (selected, warn) = select_largest(&labels, cfg.keep);
    let eroded = erode(&selected, &StructuringElement::disk(cfg.r_erode));
    let closed = close(&eroded, &StructuringElement::disk(cfg.r_close));
    let filled = fill_holes(&closed);
    let mut warnings: Vec<Warning> = warn.into_iter().collect();
    if filled.is_empty() {
        warnings.push(Warning::EmptyMask);
    }
    Ok((
        PipelineStages {
            binary,
            cleared,
            dilated,
            labels,
            selected,
            eroded,
            closed,
            filled,
        },
        t,
        warnings,
    ))
}

/// Otsu → binarize → clear border → dilate → label → keep largest →
/// erode → close → fill holes → mask the input.
pub fn generate_lung_mask(img: &Raster, cfg: &LungMaskConfig) -> Result<LungMask> {
    let (stages, threshold, warnings) = lung_mask_stages(img, cfg)?;
    let masked = apply_mask(img, &stages.filled)?;
    Ok(LungMask {
        components: stages.labels.n_components,
        mask: stages.filled,
        masked,
        threshold,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn disk_discretization() {
        assert_eq!(StructuringElement::disk(0).offsets(), &[(0, 0)]);
        assert_eq!(StructuringElement::disk(1).offsets().len(), 5);
        assert_eq!(StructuringElement::disk(2).offsets().len(), 13);
        let d5 = StructuringElement::disk(5);
        for &(dx, dy) in d5.offsets() {
            assert!(d5.offsets().contains(&(-dx, -dy)));
        }
    }

    #[test]
    fn dilate_single_pixel_plus() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, &StructuringElement::disk(1));
        assert_eq!(
            d,
            mask_from(&[".....", "..#..", ".###.", "..#..", "....."])
        );
        assert!(dilate(&BinaryMask::empty(5, 5), &StructuringElement::disk(3)).is_empty());
    }

    #[test]
    fn erode_full_and_single() {
        let e = erode(&BinaryMask::full(5, 5), &StructuringElement::disk(1));
        assert_eq!(e, mask_from(&[".....", ".###.", ".###.", ".###.", "....."]));
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        assert!(erode(&m, &StructuringElement::disk(1)).is_empty());
    }

    #[test]
    fn close_bridges_gap() {
        let m = mask_from(&[".........", ".###.###.", ".###.###.", ".###.###.", "........."]);
        assert_eq!(label_components(&m, Connectivity::Eight).n_components, 2);
        let c = close(&m, &StructuringElement::disk(1));
        assert!(c.get(4, 2) && !c.get(4, 1));
        assert_eq!(label_components(&c, Connectivity::Eight).n_components, 1);
        let square = BinaryMask::from_fn(9, 9, |x, y| (2..7).contains(&x) && (2..7).contains(&y));
        assert_eq!(close(&square, &StructuringElement::disk(1)), square);
    }

    #[test]
    fn clear_border_keeps_interior() {
        let m = mask_from(&["#....", "#....", "#.##.", "..##.", "....."]);
        assert_eq!(clear_border(&m), mask_from(&[".....", ".....", "..##.", "..##.", "....."]));
        assert!(clear_border(&BinaryMask::full(6, 4)).is_empty());
    }

    #[test]
    fn labeling_cases() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (x < 2 && y < 2) || (x >= 4 && y >= 4));
        assert_eq!(label_components(&m, Connectivity::Eight).n_components, 2);
        assert_eq!(label_components(&BinaryMask::empty(3, 3), Connectivity::Four).n_components, 0);
        let diag = mask_from(&["#.", ".#"]);
        assert_eq!(label_components(&diag, Connectivity::Eight).n_components, 1);
        assert_eq!(label_components(&diag, Connectivity::Four).n_components, 2);
        let lm = label_components(&mask_from(&["..#", "#..", "..."]), Connectivity::Four);
        // first encounter in raster order gets label 1
        assert_eq!(lm.labels[2], 1);
        assert_eq!(lm.labels[3], 2);
    }

    #[test]
    fn select_largest_cases() {
        let lm = LabelMap {
            width: 22,
            height: 1,
            labels: [vec![1; 12], vec![2; 7], vec![3; 3]].concat(),
            n_components: 3,
        };
        let (m, w) = select_largest(&lm, 2);
        assert!(w.is_none());
        assert_eq!(m.count(), 19);
        assert!(!m.get(21, 0));
        let lm1 = LabelMap {
            width: 3,
            height: 1,
            labels: vec![1, 1, 0],
            n_components: 1,
        };
        let (m, w) = select_largest(&lm1, 2);
        assert_eq!(m.count(), 2);
        assert_eq!(
            w,
            Some(Warning::FewerComponents {
                found: 1,
                requested: 2
            })
        );
    }

    #[test]
    fn fill_ring() {
        let ring = BinaryMask::from_fn(5, 5, |x, y| {
            (1..4).contains(&x) && (1..4).contains(&y) && !(x == 2 && y == 2)
        });
        let solid = BinaryMask::from_fn(5, 5, |x, y| (1..4).contains(&x) && (1..4).contains(&y));
        assert_eq!(fill_holes(&ring), solid);
        assert_eq!(fill_holes(&solid), solid);
    }

    #[test]
    fn apply_mask_rules() {
        let img = Raster::filled(4, 4, 10);
        let mut m = BinaryMask::empty(4, 4);
        m.set(0, 0, true);
        m.set(1, 2, true);
        m.set(3, 3, true);
        let out = apply_mask(&img, &m).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 10).count(), 3);
        assert_eq!(out.data().iter().filter(|&&v| v == 0).count(), 13);
        assert_eq!(apply_mask(&img, &BinaryMask::full(4, 4)).unwrap(), img);
        assert!(apply_mask(&img, &BinaryMask::empty(4, 4)).unwrap().data().iter().all(|&v| v == 0));
        assert!(apply_mask(&img, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn otsu_cases() {
        let img = Raster::new(4, 1, vec![0, 0, 200, 200]).unwrap();
        assert_eq!(otsu_threshold(&img).unwrap(), 0);
        assert_eq!(otsu_threshold(&Raster::filled(3, 3, 99)).unwrap(), 99);
        let b = binarize(&img, 0, Polarity::DarkForeground);
        assert_eq!(b.bits(), &[true, true, false, false]);
        let b = binarize(&img, 0, Polarity::BrightForeground);
        assert_eq!(b.bits(), &[false, false, true, true]);
    }

    #[test]
    fn all_black_gives_empty_mask() {
        let out = generate_lung_mask(&Raster::filled(32, 32, 0), &LungMaskConfig::default()).unwrap();
        assert!(out.mask.is_empty());
        assert!(out.warnings.contains(&Warning::EmptyMask));
        assert!(out.masked.data().iter().all(|&v| v == 0));
    }
}

//! Naive reference implementations used as test oracles. Each is written
//! directly from its definition and shares no code with the library kernels.
#![allow(dead_code)]

use std::collections::VecDeque;

use lungkit::BinaryMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let p = rng.gen_range(0.05..0.95);
    BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(p))
}

fn inside(m: &BinaryMask, x: i64, y: i64) -> bool {
    x >= 0 && y >= 0 && x < m.width() as i64 && y < m.height() as i64
}

fn fg(m: &BinaryMask, x: i64, y: i64) -> bool {
    inside(m, x, y) && m.get(x as usize, y as usize)
}

pub fn disk_offsets(r: usize) -> Vec<(i64, i64)> {
    let r = r as i64;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect()
}

/// Minkowski sum: every foreground pixel stamps the disk.
pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(m.width(), m.height());
    let se = disk_offsets(r);
    for y in 0..m.height() as i64 {
        for x in 0..m.width() as i64 {
            if !m.get(x as usize, y as usize) {
                continue;
            }
            for &(dx, dy) in &se {
                if inside(m, x + dx, y + dy) {
                    out.set((x + dx) as usize, (y + dy) as usize, true);
                }
            }
        }
    }
    out
}

/// A pixel survives when the whole disk around it is foreground; outside is background.
pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
    let se = disk_offsets(r);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| {
        se.iter().all(|&(dx, dy)| fg(m, x as i64 + dx, y as i64 + dy))
    })
}

pub fn close(m: &BinaryMask, r: usize) -> BinaryMask {
    erode(&dilate(m, r), r)
}

fn steps(eight: bool) -> &'static [(i64, i64)] {
    if eight {
        &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    } else {
        &[(0, -1), (-1, 0), (1, 0), (0, 1)]
    }
}

/// Breadth-first component labels numbered in raster-scan order of each
/// component's first pixel.
pub fn label(m: &BinaryMask, eight: bool) -> (Vec<u32>, usize) {
    let (w, h) = m.dims();
    let mut labels = vec![0u32; w * h];
    let mut n = 0;
    for start in 0..w * h {
        if !m.bits()[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n as u32;
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for &(dx, dy) in steps(eight) {
                if fg(m, x + dx, y + dy) {
                    let j = (y + dy) as usize * w + (x + dx) as usize;
                    if labels[j] == 0 {
                        labels[j] = n as u32;
                        q.push_back(j);
                    }
                }
            }
        }
    }
    (labels, n)
}

pub fn clear_border(m: &BinaryMask) -> BinaryMask {
    let (w, h) = m.dims();
    let (labels, n) = label(m, true);
    let mut touching = vec![false; n + 1];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                touching[labels[y * w + x] as usize] = true;
            }
        }
    }
    BinaryMask::from_fn(w, h, |x, y| {
        let l = labels[y * w + x];
        l != 0 && !touching[l as usize]
    })
}

/// Background components (4-connected) that never reach the border are filled.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (w, h) = m.dims();
    let (labels, n) = label(&m.complement(), false);
    let mut outer = vec![false; n + 1];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                outer[labels[y * w + x] as usize] = true;
            }
        }
    }
    BinaryMask::from_fn(w, h, |x, y| {
        let l = labels[y * w + x];
        l == 0 || !outer[l as usize]
    })
}

/// Exhaustive Otsu from the definition `w0·w1·(μ0−μ1)²` with classes
/// `{v ≤ t}` / `{v > t}`, evaluated in exact rational arithmetic; the
/// first maximizing `t` wins and a single populated bin returns that bin.
pub fn otsu(hist: &[u64; 256]) -> u8 {
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let mut best: Option<(u128, u128, usize)> = None;
    for t in 0..256 {
        let n0: u128 = hist[..=t].iter().map(|&c| c as u128).sum();
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u128 = hist[..=t].iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
        let s1: u128 = hist[t + 1..].iter().enumerate().map(|(v, &c)| (v + t + 1) as u128 * c as u128).sum();
        // μ0 − μ1 = (s0·n1 − s1·n0) / (n0·n1), so w0·w1·(μ0−μ1)² · n² = (s0·n1 − s1·n0)² / (n0·n1)
        let d = (s0 * n1).abs_diff(s1 * n0);
        let (num, den) = (d * d, n0 * n1);
        if best.is_none_or(|(bn, bd, _)| num * bd > bn * den) {
            best = Some((num, den, t));
        }
    }
    match best {
        Some((_, _, t)) => t as u8,
        None => hist.iter().position(|&c| c > 0).unwrap_or(0) as u8,
    }
}

/// Mann–Whitney concordance with half credit for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                credit += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    credit / pairs
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count() as f64;
    let total = (a.count() + b.count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

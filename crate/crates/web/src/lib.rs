//! WebAssembly bindings for the browser demo: synthetic chest phantoms,
//! CLAHE, the staged lung-mask pipeline and Dice against the phantom truth.
//!
//! Images cross the boundary as row-major gray bytes; masks as 0/255 bytes.
//! The plain functions below carry the logic so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors.

use lungkit::metrics::dice;
use lungkit::morphoseg::{lung_mask_stages, LungMaskConfig};
use lungkit::phantom::chest_phantom;
use lungkit::preprocess::{clahe, ClaheParams};
use lungkit::{BinaryMask, Label, Raster};
use wasm_bindgen::prelude::*;

fn mask_bytes(m: &BinaryMask) -> Vec<u8> {
    m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect()
}

fn to_mask(bytes: &[u8], width: usize, height: usize) -> Result<BinaryMask, String> {
    BinaryMask::new(width, height, bytes.iter().map(|&v| v >= 128).collect()).map_err(|e| e.to_string())
}

fn to_raster(pixels: &[u8], width: usize, height: usize) -> Result<Raster, String> {
    Raster::new(width, height, pixels.to_vec()).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub struct Phantom {
    size: usize,
    image: Vec<u8>,
    truth: Vec<u8>,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    /// Union of the two lung ellipses.
    pub fn truth(&self) -> Vec<u8> {
        self.truth.clone()
    }
}

pub fn phantom_impl(size: usize, cancerous: bool, seed: u64) -> Result<Phantom, String> {
    let label = if cancerous { Label::Cancerous } else { Label::Normal };
    let p = chest_phantom(size, label, seed).map_err(|e| e.to_string())?;
    Ok(Phantom {
        size,
        image: p.image.data().to_vec(),
        truth: mask_bytes(&p.truth),
    })
}

#[wasm_bindgen]
pub fn phantom(size: usize, cancerous: bool, seed: u32) -> Result<Phantom, JsError> {
    phantom_impl(size, cancerous, seed as u64).map_err(|e| JsError::new(&e))
}

pub fn clahe_impl(pixels: &[u8], width: usize, height: usize, clip: f64, grid: usize) -> Result<Vec<u8>, String> {
    let params = ClaheParams::new(clip, grid, grid).map_err(|e| e.to_string())?;
    let out = clahe(&to_raster(pixels, width, height)?, &params).map_err(|e| e.to_string())?;
    Ok(out.into_data())
}

#[wasm_bindgen(js_name = clahe)]
pub fn clahe_js(pixels: &[u8], width: usize, height: usize, clip: f64, grid: usize) -> Result<Vec<u8>, JsError> {
    clahe_impl(pixels, width, height, clip, grid).map_err(|e| JsError::new(&e))
}

/// Every intermediate mask of one pipeline run, in execution order.
#[wasm_bindgen]
pub struct Stages {
    threshold: u8,
    components: usize,
    names: Vec<&'static str>,
    masks: Vec<Vec<u8>>,
    warnings: Vec<String>,
}

#[wasm_bindgen]
impl Stages {
    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> u8 {
        self.threshold
    }

    /// Components after dilation, before the largest are kept.
    #[wasm_bindgen(getter)]
    pub fn components(&self) -> usize {
        self.components
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> usize {
        self.masks.len()
    }

    pub fn name(&self, i: usize) -> String {
        self.names.get(i).map_or_else(String::new, |s| s.to_string())
    }

    pub fn mask(&self, i: usize) -> Vec<u8> {
        self.masks.get(i).cloned().unwrap_or_default()
    }

    /// The final mask.
    pub fn result(&self) -> Vec<u8> {
        self.masks.last().cloned().unwrap_or_default()
    }

    pub fn warnings(&self) -> String {
        self.warnings.join("; ")
    }
}

pub fn stages_impl(
    pixels: &[u8],
    width: usize,
    height: usize,
    r_dilate: usize,
    r_erode: usize,
    r_close: usize,
) -> Result<Stages, String> {
    let cfg = LungMaskConfig { r_dilate, r_erode, r_close, ..LungMaskConfig::default() };
    let (s, threshold, warnings) = lung_mask_stages(&to_raster(pixels, width, height)?, &cfg).map_err(|e| e.to_string())?;
    let named = [
        ("binary", &s.binary),
        ("border cleared", &s.cleared),
        ("dilated", &s.dilated),
        ("largest kept", &s.selected),
        ("eroded", &s.eroded),
        ("closed", &s.closed),
        ("holes filled", &s.filled),
    ];
    Ok(Stages {
        threshold,
        components: s.labels.n_components,
        names: named.iter().map(|(n, _)| *n).collect(),
        masks: named.iter().map(|(_, m)| mask_bytes(m)).collect(),
        warnings: warnings.iter().map(|w| w.to_string()).collect(),
    })
}

#[wasm_bindgen]
pub fn stages(
    pixels: &[u8],
    width: usize,
    height: usize,
    r_dilate: usize,
    r_erode: usize,
    r_close: usize,
) -> Result<Stages, JsError> {
    stages_impl(pixels, width, height, r_dilate, r_erode, r_close).map_err(|e| JsError::new(&e))
}

pub fn dice_impl(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, String> {
    dice(&to_mask(a, width, height)?, &to_mask(b, width, height)?).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = dice)]
pub fn dice_js(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    dice_impl(a, b, width, height).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_recovers_phantom_lungs() {
        let p = phantom_impl(128, true, 3).unwrap();
        let s = stages_impl(&p.image, 128, 128, 5, 4, 10).unwrap();
        assert_eq!(s.count(), 7);
        assert_eq!(s.name(6), "holes filled");
        assert!(dice_impl(&s.result(), &p.truth, 128, 128).unwrap() >= 0.9);
    }

    #[test]
    fn clahe_keeps_size_and_rejects_bad_clip() {
        let p = phantom_impl(64, false, 1).unwrap();
        assert_eq!(clahe_impl(&p.image, 64, 64, 2.0, 8).unwrap().len(), 64 * 64);
        assert!(clahe_impl(&p.image, 64, 64, 0.5, 8).unwrap_err().contains("clip_limit"));
    }

    #[test]
    fn size_mismatch_is_an_error() {
        assert!(stages_impl(&[0; 10], 4, 4, 1, 1, 1).is_err());
        assert!(dice_impl(&[0; 16], &[0; 15], 4, 4).is_err());
    }
}

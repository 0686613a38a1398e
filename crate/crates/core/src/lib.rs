//! Lung CT toolkit: classical morphological lung-mask generation, CLAHE
//! preprocessing, a small from-scratch convolutional network engine
//! (U-Net segmenter and CNN classifier), classical classifier heads over
//! CNN features, evaluation metrics and seeded k-fold cross-validation.

pub mod classic;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod morphoseg;
pub mod phantom;
pub mod preprocess;
pub mod raster;
pub mod selftest;
pub mod tinynet;

pub use error::{Error, Result};
pub use morphoseg::{BinaryMask, LabelMap, StructuringElement};
pub use raster::{FloatRaster, Label, Raster};

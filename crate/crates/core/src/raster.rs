//! 8-bit grayscale rasters, PGM/PNG file I/O and dataset manifests.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphoseg::BinaryMask;

/// Row-major 8-bit grayscale image, top-left origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroArea);
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {}x{} raster",
                data.len(),
                width,
                height
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "zero-area raster");
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "zero-area raster");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster {
            width,
            height,
            data,
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// Floating-point raster, produced by [`crate::preprocess::normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Integer BT.601 luma with round-half-up.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let acc = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((acc + 500) / 1000) as u8
}

/// Loads a binary PGM (`P5`) or an 8-bit PNG. Color PNGs are reduced with [`luma`].
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes an in-memory PGM or PNG file.
pub fn decode_image(bytes: &[u8]) -> Result<Raster> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(Error::MalformedHeader(
            "neither a binary PGM (P5) nor a PNG signature".into(),
        ))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader("header field out of range".into()))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedHeader("missing separator after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("invalid maxval {maxval}")));
    }
    if maxval > 255 {
        return Err(Error::BitDepth(16));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroArea);
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::MalformedHeader(format!(
            "payload has {} bytes, header requires {n}",
            payload.len()
        )));
    }
    Raster::new(width, height, payload[..n].to_vec())
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let (width, height, depth, color) = {
        let info = reader.info();
        (
            info.width as usize,
            info.height as usize,
            info.bit_depth,
            info.color_type,
        )
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::BitDepth(depth as u32));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroArea);
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let n = width * height;
    let mut data = Vec::with_capacity(n);
    for y in 0..height {
        let line = &buf[y * frame.line_size..(y + 1) * frame.line_size];
        match color {
            png::ColorType::Grayscale => data.extend_from_slice(&line[..width]),
            png::ColorType::GrayscaleAlpha => data.extend(line.chunks_exact(2).map(|p| p[0])),
            png::ColorType::Rgb => data.extend(line.chunks_exact(3).map(|p| luma(p[0], p[1], p[2]))),
            png::ColorType::Rgba => data.extend(line.chunks_exact(4).map(|p| luma(p[0], p[1], p[2]))),
            png::ColorType::Indexed => {
                let palette = reader
                    .info()
                    .palette
                    .as_ref()
                    .ok_or_else(|| Error::Decode("indexed PNG without palette".into()))?;
                for &idx in &line[..width] {
                    let i = idx as usize * 3;
                    let rgb = palette
                        .get(i..i + 3)
                        .ok_or_else(|| Error::Decode("palette index out of range".into()))?;
                    data.push(luma(rgb[0], rgb[1], rgb[2]));
                }
            }
        }
    }
    Raster::new(width, height, data)
}

/// Encodes a raster as a binary PGM.
pub fn encode_pgm(r: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Decode(e.to_string()))?;
        writer
            .write_image_data(&r.data)
            .map_err(|e| Error::Decode(e.to_string()))?;
    }
    Ok(out)
}

/// Writes `r` as PNG when the extension is `.png`, PGM otherwise.
pub fn save_image(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(r)? } else { encode_pgm(r) };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a mask with foreground = 255, background = 0.
pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_image(&m.to_raster(), path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal = 0,
    Cancerous = 1,
}

impl Label {
    pub fn from_token(token: &str) -> Result<Self> {
        match token.trim() {
            "0" => Ok(Label::Normal),
            "1" => Ok(Label::Cancerous),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_positive(self) -> bool {
        self == Label::Cancerous
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    /// Indexed by label value: `[normal, cancerous]`.
    class_counts: [usize; 2],
}

impl DatasetManifest {
    /// Builds a manifest, sorting entries by path and rejecting duplicates.
    pub fn from_entries(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut seen = BTreeSet::new();
        let mut class_counts = [0usize; 2];
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(Error::DuplicatePath(e.path.display().to_string()));
            }
            class_counts[e.label as usize] += 1;
        }
        Ok(DatasetManifest {
            entries,
            class_counts,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_count(&self, label: Label) -> usize {
        self.class_counts[label as usize]
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

fn is_image_file(p: &Path) -> bool {
    let hidden = p
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'));
    let ext_ok = p
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"));
    p.is_file() && !hidden && ext_ok
}

/// Loads a manifest from a `cancerous/` + `normal/` directory tree or a
/// `path,label` CSV. Relative CSV paths are resolved against the CSV's directory.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if root.is_dir() {
        let mut entries = Vec::new();
        for (sub, label) in [("cancerous", Label::Cancerous), ("normal", Label::Normal)] {
            let dir = root.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for item in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = item.map_err(|e| Error::io(&dir, e))?.path();
                if is_image_file(&path) {
                    entries.push(ManifestEntry { path, label });
                }
            }
        }
        DatasetManifest::from_entries(entries)
    } else {
        let text = fs::read_to_string(root).map_err(|e| Error::io(root, e))?;
        let base = root.parent().unwrap_or(Path::new(""));
        parse_manifest_csv(&text, base)
    }
}

pub fn parse_manifest_csv(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::MalformedHeader(
            "manifest CSV header must be `path,label`".into(),
        ));
    }
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let label = Label::from_token(&record[1])?;
        let p = Path::new(&record[0]);
        let path = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        };
        entries.push(ManifestEntry { path, label });
    }
    DatasetManifest::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_passthrough() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 7]);
        let r = decode_image(&bytes).unwrap();
        assert_eq!(r, Raster::new(2, 2, vec![0, 128, 255, 7]).unwrap());
        assert_eq!(encode_pgm(&r), bytes);
    }

    #[test]
    fn pgm_with_comment() {
        let mut bytes = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        bytes.push(42);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[42]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(
            decode_image(b"P5\n2 x\n255\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_image(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::BitDepth(16))
        ));
        assert!(matches!(decode_image(b"P5\n0 4\n255\n"), Err(Error::ZeroArea)));
        assert!(matches!(
            decode_image(b"P5\n4 4\n255\n\0"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn luma_rule() {
        assert_eq!(luma(10, 20, 30), 18);
        for v in 0..=255u8 {
            assert_eq!(luma(v, v, v), v);
        }
    }

    #[test]
    fn rgb_png_is_reduced_to_luma() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[10, 20, 30]).unwrap();
        }
        assert_eq!(decode_image(&out).unwrap().data(), &[18]);
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2]).unwrap();
        }
        assert!(matches!(decode_image(&out), Err(Error::BitDepth(16))));
    }

    #[test]
    fn png_round_trip() {
        let r = Raster::from_fn(5, 3, |x, y| (x * 40 + y) as u8);
        let bytes = encode_png(&r).unwrap();
        assert_eq!(decode_image(&bytes).unwrap(), r);
    }

    #[test]
    fn csv_manifest() {
        let m = parse_manifest_csv("path,label\na.png,1\nb.png,0\n", Path::new("")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.class_count(Label::Cancerous), 1);
        assert_eq!(m.class_count(Label::Normal), 1);
        assert!(matches!(
            parse_manifest_csv("path,label\na.png,2\n", Path::new("")),
            Err(Error::UnknownLabel(t)) if t == "2"
        ));
        assert!(matches!(
            parse_manifest_csv("path,label\na.png,1\na.png,0\n", Path::new("")),
            Err(Error::DuplicatePath(_))
        ));
        assert!(matches!(
            parse_manifest_csv("path,label\n", Path::new("")),
            Err(Error::EmptyDataset)
        ));
    }
}

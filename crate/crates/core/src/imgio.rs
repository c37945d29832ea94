//! Binary PPM (P6) / PGM (P5) raster IO and the in-memory image types.
//!
//! Images are stored planar (channel-major, CHW) so they can be handed to the
//! networks without a layout shuffle; the PPM wire format is interleaved RGB.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

/// RGB raster with values in [0,1], stored channel-major (CHW, row-major
/// within a channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Per-pixel semantic class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Semantic classes emitted by the renderer.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_SKIN: u8 = 1;
pub const CLASS_HAIR: u8 = 2;
pub const CLASS_BROW: u8 = 3;
pub const CLASS_EYE: u8 = 4;
pub const CLASS_NOSE: u8 = 5;
pub const CLASS_MOUTH: u8 = 6;
pub const NUM_CLASSES: usize = 7;

#[derive(Debug)]
pub enum ImgError {
    Io(io::Error),
    /// Malformed file contents; carries the byte offset of the first
    /// offending byte.
    Malformed { offset: usize, what: String },
}

impl fmt::Display for ImgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImgError::Io(e) => write!(f, "io error: {e}"),
            ImgError::Malformed { offset, what } => {
                write!(f, "malformed image at byte {offset}: {what}")
            }
        }
    }
}

impl std::error::Error for ImgError {}

impl From<io::Error> for ImgError {
    fn from(e: io::Error) -> Self {
        ImgError::Io(e)
    }
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![0.0; 3 * width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.width * self.height;
        let idx = y * self.width + x;
        self.data[idx] = rgb[0];
        self.data[plane + idx] = rgb[1];
        self.data[2 * plane + idx] = rgb[2];
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean absolute per-pixel-channel difference between two same-sized images.
    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.data.len(), other.data.len(), "image size mismatch");
        let s: f32 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len() as f32
    }
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> LabelMap {
        LabelMap { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Centroid (x, y) of all pixels of `class`, or None when absent.
    pub fn centroid(&self, class: u8) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == class {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some((sx / n as f64, sy / n as f64))
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), ImgError> {
    let mut buf = Vec::with_capacity(32 + 3 * img.width * img.height);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
    let plane = img.width * img.height;
    for i in 0..plane {
        buf.push(quantize(img.data[i]));
        buf.push(quantize(img.data[plane + i]));
        buf.push(quantize(img.data[2 * plane + i]));
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<(), ImgError> {
    let mut buf = Vec::with_capacity(32 + map.width * map.height);
    write!(buf, "P5\n{} {}\n255\n", map.width, map.height)?;
    buf.extend_from_slice(&map.data);
    fs::write(path, buf)?;
    Ok(())
}

/// Cursor over a Netpbm header that tracks the byte offset for error reports.
struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmCursor<'a> {
    fn err<T>(&self, what: &str) -> Result<T, ImgError> {
        Err(ImgError::Malformed { offset: self.pos, what: what.to_string() })
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize, ImgError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected decimal integer");
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse().map_err(|_| ImgError::Malformed {
            offset: start,
            what: "integer out of range".to_string(),
        })
    }
}

fn read_pnm_header<'a>(
    bytes: &'a [u8],
    magic: &str,
) -> Result<(usize, usize, PnmCursor<'a>), ImgError> {
    let mut cur = PnmCursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return cur.err(&format!("expected {magic} magic"));
    }
    cur.pos = 2;
    let width = cur.read_uint()?;
    let height = cur.read_uint()?;
    let maxval = cur.read_uint()?;
    if maxval != 255 {
        return cur.err("maxval must be 255");
    }
    if width == 0 || height == 0 {
        return cur.err("zero image dimension");
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return cur.err("expected single whitespace before raster");
    }
    cur.pos += 1;
    Ok((width, height, cur))
}

pub fn read_ppm(path: &Path) -> Result<Image, ImgError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Image, ImgError> {
    let (width, height, cur) = read_pnm_header(bytes, "P6")?;
    let need = 3 * width * height;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(ImgError::Malformed {
            offset: bytes.len(),
            what: format!("raster truncated: need {need} bytes, have {}", raster.len()),
        });
    }
    let mut img = Image::new(width, height);
    let plane = width * height;
    for i in 0..plane {
        img.data[i] = raster[3 * i] as f32 / 255.0;
        img.data[plane + i] = raster[3 * i + 1] as f32 / 255.0;
        img.data[2 * plane + i] = raster[3 * i + 2] as f32 / 255.0;
    }
    Ok(img)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap, ImgError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (width, height, cur) = read_pnm_header(&bytes, "P5")?;
    let need = width * height;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(ImgError::Malformed {
            offset: bytes.len(),
            what: format!("raster truncated: need {need} bytes, have {}", raster.len()),
        });
    }
    Ok(LabelMap { width, height, data: raster[..need].to_vec() })
}

/// Center-crops to a square and box-resizes to `side`×`side`; the alignment
/// shim for arbitrary input photos.
pub fn center_crop_resize(img: &Image, side: usize) -> Image {
    let sq = img.width.min(img.height);
    let x0 = (img.width - sq) / 2;
    let y0 = (img.height - sq) / 2;
    let mut out = Image::new(side, side);
    for oy in 0..side {
        for ox in 0..side {
            // Box filter over the source region covered by this output pixel.
            let sx0 = x0 + ox * sq / side;
            let sx1 = (x0 + ((ox + 1) * sq).div_ceil(side)).min(x0 + sq);
            let sy0 = y0 + oy * sq / side;
            let sy1 = (y0 + ((oy + 1) * sq).div_ceil(side)).min(y0 + sq);
            let mut acc = [0f32; 3];
            let mut n = 0f32;
            for sy in sy0..sy1 {
                for sx in sx0..sx1 {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += img.get(sx, sy, c);
                    }
                    n += 1.0;
                }
            }
            out.set(ox, oy, [acc[0] / n, acc[1] / n, acc[2] / n]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_image() -> Image {
        let mut img = Image::new(8, 6);
        for y in 0..6 {
            for x in 0..8 {
                img.set(x, y, [x as f32 / 7.0, y as f32 / 5.0, ((x + y) % 2) as f32]);
            }
        }
        img
    }

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        // Quantize first so the round trip is bit-exact.
        let mut img = sample_image();
        for v in &mut img.data {
            *v = quantize(*v) as f32 / 255.0;
        }
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img.width, back.width);
        assert_eq!(img.height, back.height);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
        // Byte-identical when rewritten.
        let first = std::fs::read(&path).unwrap();
        write_ppm(&path, &back).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut map = LabelMap::new(5, 4);
        for (i, v) in map.data.iter_mut().enumerate() {
            *v = (i % 7) as u8;
        }
        write_pgm(&path, &map).unwrap();
        assert_eq!(map, read_pgm(&path).unwrap());
    }

    #[test]
    fn malformed_ppm_reports_byte_offset() {
        match parse_ppm(b"P6\n4 x\n255\n") {
            Err(ImgError::Malformed { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected malformed error, got {other:?}"),
        }
        match parse_ppm(b"P5\n4 4\n255\n") {
            Err(ImgError::Malformed { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let bytes = b"P6\n4 4\n255\nshort";
        match parse_ppm(bytes) {
            Err(ImgError::Malformed { what, .. }) => assert!(what.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn centroid_and_mean_abs_diff() {
        let mut map = LabelMap::new(4, 4);
        map.set(1, 2, 3);
        map.set(3, 2, 3);
        assert_eq!(map.centroid(3), Some((2.0, 2.0)));
        assert_eq!(map.centroid(5), None);

        let a = sample_image();
        assert_eq!(a.mean_abs_diff(&a), 0.0);
    }

    #[test]
    fn center_crop_resize_identity_when_square_same_size() {
        let mut img = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(x, y, [0.1 * x as f32, 0.2 * y as f32, 0.5]);
            }
        }
        let out = center_crop_resize(&img, 4);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn center_crop_resize_downsamples_wide_input() {
        let mut img = Image::new(8, 4);
        for y in 0..4 {
            for x in 0..8 {
                let v = if x >= 2 && x < 6 { 1.0 } else { 0.0 };
                img.set(x, y, [v, v, v]);
            }
        }
        // Central 4x4 square is all ones.
        let out = center_crop_resize(&img, 2);
        for v in &out.data {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}

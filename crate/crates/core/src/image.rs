//! Single-channel 8-bit images: PGM/PNG loading, PGM saving, bilinear resize.
//!
//! Binary PGM (P5, maxval 255) is the canonical interchange format; it
//! round-trips bit-exactly. PNG is accepted on input only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Row-major single-channel intensity grid with values in 0..=255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::BadBufferLength {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self> {
        GrayImage::new(
            width,
            height,
            vec![value; (width as usize) * (height as usize)],
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[(y as usize) * (self.width as usize) + (x as usize)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        debug_assert!(x < self.width && y < self.height);
        self.data[(y as usize) * (self.width as usize) + (x as usize)] = value;
    }

    /// Mean intensity over a box; the box must lie within the image.
    pub fn mean_in_box(&self, bbox: &BBox) -> Result<f64> {
        bbox.check_within(self.width, self.height)?;
        let mut sum = 0u64;
        for y in bbox.y1()..bbox.y2() {
            let row = (y as usize) * (self.width as usize);
            for x in bbox.x1()..bbox.x2() {
                sum += self.data[row + x as usize] as u64;
            }
        }
        Ok(sum as f64 / bbox.area() as f64)
    }

    /// Bilinear resample to the requested dimensions, rounding half-up.
    ///
    /// Resizing to the current dimensions returns a bit-exact copy.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Result<GrayImage> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut out = vec![0u8; (width as usize) * (height as usize)];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for oy in 0..height {
            // Map output pixel centers onto input pixel-center coordinates.
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as u32;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as u32;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let p00 = self.get(x0, y0) as f64;
                let p10 = self.get(x1, y0) as f64;
                let p01 = self.get(x0, y1) as f64;
                let p11 = self.get(x1, y1) as f64;
                let top = p00 * (1.0 - wx) + p10 * wx;
                let bot = p01 * (1.0 - wx) + p11 * wx;
                let v = top * (1.0 - wy) + bot * wy;
                out[(oy as usize) * (width as usize) + (ox as usize)] = (v + 0.5).floor() as u8;
            }
        }
        GrayImage::new(width, height, out)
    }
}

/// Encode as binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

/// Decode binary PGM (P5, maxval 255). Comments in the header are allowed.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |reason: &str| Error::ImageFormat {
        path: "<memory>".into(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2usize;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("expected integer header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse::<u32>()
            .map_err(|_| bad("header field out of range"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    // Exactly one whitespace byte separates the header from raster data.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing raster separator")),
    }
    let n = (width as usize) * (height as usize);
    if bytes.len() < pos + n {
        return Err(bad("truncated raster data"));
    }
    GrayImage::new(width, height, bytes[pos..pos + n].to_vec())
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |reason: String| Error::ImageFormat {
        path: path.to_path_buf(),
        reason,
    };
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| bad(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "png must be 8-bit grayscale, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    GrayImage::new(info.width, info.height, buf)
}

/// Load a PGM (P5) or 8-bit grayscale PNG and resample it to `expect`.
///
/// A PGM already at the expected dimensions loads bit-exactly.
pub fn load_image(path: impl AsRef<Path>, expect: (u32, u32)) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(|e| match e {
            Error::ImageFormat { reason, .. } => Error::ImageFormat {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })?
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, path)?
    } else {
        return Err(Error::ImageFormat {
            path: path.to_path_buf(),
            reason: "not a P5 PGM or PNG file".to_string(),
        });
    };
    img.resize_bilinear(expect.0, expect.1)
}

/// Write a binary PGM. `load_image` of the result round-trips bit-exactly.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_load_is_bit_exact() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 250]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        save_image(&img, &path).unwrap();
        let back = load_image(&path, (3, 2)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_of_constant_field_is_constant() {
        let img = GrayImage::filled(448, 448, 7).unwrap();
        let small = img.resize_bilinear(224, 224).unwrap();
        assert!(small.data().iter().all(|&v| v == 7));
    }

    #[test]
    fn bilinear_mean_rounds_half_up() {
        // [[0,255],[255,0]] collapsed to one pixel: mean 127.5 rounds to 128.
        let img = GrayImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let one = img.resize_bilinear(1, 1).unwrap();
        assert_eq!(one.data(), &[128]);
    }

    #[test]
    fn empty_path_errors() {
        let img = GrayImage::filled(1, 1, 0).unwrap();
        assert!(save_image(&img, "").is_err());
    }

    #[test]
    fn minimal_image_round_trips() {
        let img = GrayImage::filled(1, 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.pgm");
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path, (1, 1)).unwrap(), img);
    }

    #[test]
    fn pgm_with_comment_parses() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 4]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.dimensions(), (2, 1));
        assert_eq!(img.data(), &[3, 4]);
    }

    #[test]
    fn rejects_wrong_maxval_and_truncation() {
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(GrayImage::new(0, 4, vec![]).is_err());
        assert!(decode_pgm(b"P5\n0 4\n255\n").is_err());
    }

    #[test]
    fn pgm_round_trip_random_images() {
        use proptest::prelude::*;
        proptest!(|(w in 1u32..24, h in 1u32..24, seed in 0u64..1000)| {
            let n = (w * h) as usize;
            let data: Vec<u8> = (0..n)
                .map(|i| ((seed as usize).wrapping_mul(2654435761).wrapping_add(i * 97) % 256) as u8)
                .collect();
            let img = GrayImage::new(w, h, data).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        });
    }

    #[test]
    fn png_grayscale_loads() {
        // Encode a tiny grayscale PNG with the png crate, read it back.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let file = std::fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[1, 2, 3, 4]).unwrap();
        drop(writer);
        let img = load_image(&path, (2, 2)).unwrap();
        assert_eq!(img.data(), &[1, 2, 3, 4]);
    }
}

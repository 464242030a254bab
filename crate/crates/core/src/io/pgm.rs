//! Binary 8-bit PGM (P5).

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return fmt_err(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fmt_err(start, format!("{what} out of range")), Ok)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return fmt_err(0, "not a binary PGM (P5) file");
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return fmt_err(maxval_at, format!("maxval {maxval} unsupported, expected 255"));
    }
    if width == 0 || height == 0 {
        return fmt_err(2, format!("empty {width}x{height} image"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return fmt_err(h.pos, "missing whitespace after header"),
    }
    let payload = &bytes[h.pos..];
    let need = width * height;
    if payload.len() < need {
        return fmt_err(bytes.len(), format!("payload truncated: {} of {need} bytes", payload.len()));
    }
    if payload.len() > need {
        return fmt_err(h.pos + need, "trailing bytes after payload");
    }
    Image::new(height, width, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Quantize `[0,1]` to a byte with round-half-up; values outside are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    decode(&std::fs::read(path)?)
}

pub fn save(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

//! Image files and border handling.

pub mod pgm;

use std::io::Cursor;
use std::path::Path;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::image::Image;
use crate::sparsity::reflect_index;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// BT.601 studio-range luma of an 8-bit RGB triple, rounded to 8 bits.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = (65.481 * r as f64 + 128.553 * g as f64 + 24.966 * b as f64) / 255.0 + 16.0;
    (y + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn png_err(e: ::png::DecodingError) -> Error {
    Error::Format { offset: 0, msg: format!("png: {e}") }
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut dec = ::png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(::png::Transformations::EXPAND | ::png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format { offset: 0, msg: "png too large".into() })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            let v = match channels {
                1 | 2 => px[0],
                _ => luma(px[0], px[1], px[2]),
            };
            data.push(v as f64 / 255.0);
        }
    }
    Image::new(h, w, data)
}

/// Load a PGM (P5) or PNG file, chosen by its leading bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P5") {
        pgm::decode(&bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else {
        Err(Error::Format { offset: 0, msg: "unknown image format".into() })
    }
}

pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    pgm::save(path, img)
}

/// Reflect-pad right and bottom up to the next multiple of `m`.
/// Returns the padded image and the original `(height, width)`.
pub fn pad_to_multiple(img: &Image, m: usize) -> Result<(Image, (usize, usize))> {
    if m == 0 {
        return contract_err("padding multiple must be positive");
    }
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let out = Image::from_fn(ph, pw, |y, x| img.get(reflect_index(y as isize, h), reflect_index(x as isize, w)));
    Ok((out, (h, w)))
}

/// Top-left `height×width` region.
pub fn crop(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height > img.height() || width > img.width() || height == 0 || width == 0 {
        return dim_err(format!("cannot crop {}x{} to {height}x{width}", img.height(), img.width()));
    }
    Ok(Image::from_fn(height, width, |y, x| img.get(y, x)))
}

//! The `ICSM` measurement file.
//!
//! ```text
//! b"ICSM" | u32 version
//! header: u32 H | u32 W | u32 B | f64 sr_t | u32 n0 | u32 h | u32 w
//! u32 m_ij × (h·w), raster block order
//! f64 measurements, concatenated per block in raster order
//! ```
//! All fields little-endian.

use std::path::Path;

use super::MeasurementSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ICSM";
pub const VERSION: u32 = 1;

pub fn encode(set: &MeasurementSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut out = Vec::with_capacity(44 + 4 * set.counts.len() + 8 * set.total());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [set.image_height, set.image_width, set.block] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&set.sr_target.to_le_bytes());
    for v in [set.n0, set.rows, set.cols] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &c in &set.counts {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for y in &set.y {
        for v in y {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated ICSM while reading {what} (needed {n} bytes at {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MeasurementSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "missing ICSM magic".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format { offset: 4, msg: format!("unsupported ICSM version {version}") });
    }
    let image_height = r.u32("H")?;
    let image_width = r.u32("W")?;
    let block = r.u32("B")?;
    let sr_target = r.f64("sr_t")?;
    let n0 = r.u32("n0")?;
    let rows = r.u32("h")?;
    let cols = r.u32("w")?;
    let counts = (0..rows * cols)
        .map(|_| r.u32("counts"))
        .collect::<Result<Vec<_>>>()?;
    let mut y = Vec::with_capacity(counts.len());
    for &c in &counts {
        y.push((0..c).map(|_| r.f64("measurements")).collect::<Result<Vec<_>>>()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes after ICSM payload".into() });
    }
    let set = MeasurementSet { rows, cols, block, sr_target, n0, image_height, image_width, counts, y };
    set.validate()?;
    Ok(set)
}

pub fn save(path: impl AsRef<Path>, set: &MeasurementSet) -> Result<()> {
    std::fs::write(path, encode(set)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MeasurementSet> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> MeasurementSet {
        MeasurementSet {
            rows: 1,
            cols: 2,
            block: 2,
            sr_target: 0.75,
            n0: 1,
            image_height: 2,
            image_width: 4,
            counts: vec![1, 3],
            y: vec![vec![0.5], vec![-1.0, 2.0, 1e-300]],
        }
    }

    #[test]
    fn round_trip_and_header() {
        let bytes = encode(&set()).unwrap();
        assert_eq!(&bytes[..4], b"ICSM");
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 0.75);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, set());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_reports_offset() {
        let bytes = encode(&set()).unwrap();
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset as usize == bytes.len() - 1));
    }
}

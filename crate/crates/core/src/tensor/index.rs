//! Index maps for pure data-movement ops, all executed through
//! [`Graph::gather`] so their gradients come for free.

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{dim_err, Result};

/// `[(r²·C)×H×W] -> [C×(rH)×(rW)]`: output `(c, hr+i, wr+j)` reads input
/// channel `c·r² + i·r + j` at `(h, w)`.
pub fn pixel_shuffle_index(channels: usize, h: usize, w: usize, r: usize) -> Result<(Arc<[usize]>, [usize; 3])> {
    if r == 0 || !channels.is_multiple_of(r * r) {
        return dim_err(format!("pixel_shuffle: {channels} channels not divisible by {r}²"));
    }
    let c_out = channels / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(channels * h * w);
    for c in 0..c_out {
        for y in 0..ho {
            let (hh, i) = (y / r, y % r);
            for x in 0..wo {
                let (ww, j) = (x / r, x % r);
                let cin = c * r * r + i * r + j;
                idx.push((cin * h + hh) * w + ww);
            }
        }
    }
    Ok((idx.into(), [c_out, ho, wo]))
}

/// Exact inverse of [`pixel_shuffle_index`]: `[C×H×W] -> [(r²·C)×(H/r)×(W/r)]`.
pub fn pixel_unshuffle_index(channels: usize, h: usize, w: usize, r: usize) -> Result<(Arc<[usize]>, [usize; 3])> {
    if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return dim_err(format!("pixel_unshuffle: {h}x{w} not divisible by {r}"));
    }
    let (ho, wo) = (h / r, w / r);
    let c_out = channels * r * r;
    let mut idx = Vec::with_capacity(channels * h * w);
    for co in 0..c_out {
        let (c, i, j) = (co / (r * r), (co % (r * r)) / r, co % r);
        for hh in 0..ho {
            for ww in 0..wo {
                idx.push((c * h + hh * r + i) * w + ww * r + j);
            }
        }
    }
    Ok((idx.into(), [c_out, ho, wo]))
}

/// `[C×H×W] -> [(H·W)×C]` token layout.
pub fn chw_to_tokens_index(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(c * hw);
    for p in 0..hw {
        for ch in 0..c {
            idx.push(ch * hw + p);
        }
    }
    idx.into()
}

pub fn tokens_to_chw_index(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(c * hw);
    for ch in 0..c {
        for p in 0..hw {
            idx.push(p * c + ch);
        }
    }
    idx.into()
}

/// `[C×H×W] -> [nb × C × B²]` with blocks in raster order and each block
/// flattened row-major.
pub fn blocks_index(c: usize, h: usize, w: usize, b: usize) -> Result<Arc<[usize]>> {
    if b == 0 || !h.is_multiple_of(b) || !w.is_multiple_of(b) {
        return dim_err(format!("{h}x{w} is not divisible into {b}x{b} blocks"));
    }
    let (bh, bw) = (h / b, w / b);
    let mut idx = Vec::with_capacity(c * h * w);
    for bi in 0..bh {
        for bj in 0..bw {
            for ch in 0..c {
                for y in 0..b {
                    for x in 0..b {
                        idx.push((ch * h + bi * b + y) * w + bj * b + x);
                    }
                }
            }
        }
    }
    Ok(idx.into())
}

/// Inverse permutation of an index map that is a bijection.
pub fn invert(index: &[usize]) -> Arc<[usize]> {
    let mut inv = vec![0; index.len()];
    for (j, &i) in index.iter().enumerate() {
        inv[i] = j;
    }
    inv.into()
}

fn chw(g: &Graph, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => dim_err(format!("{what}: expected [C,H,W], got {s:?}")),
    }
}

impl Graph {
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = chw(self, x, "pixel_shuffle")?;
        let (idx, shape) = pixel_shuffle_index(c, h, w, r)?;
        self.gather(x, idx, &shape)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = chw(self, x, "pixel_unshuffle")?;
        let (idx, shape) = pixel_unshuffle_index(c, h, w, r)?;
        self.gather(x, idx, &shape)
    }

    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self, x, "chw_to_tokens")?;
        self.gather(x, chw_to_tokens_index(c, h, w), &[h * w, c])
    }

    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != h * w {
            return dim_err(format!("tokens_to_chw: {s:?} is not {}x{w} tokens", h));
        }
        let c = s[1];
        self.gather(x, tokens_to_chw_index(c, h, w), &[c, h, w])
    }
}

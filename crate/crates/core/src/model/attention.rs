//! Window multi-head self-attention with relative position bias, plain and
//! cyclically shifted.

use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::tensor::index::invert;
use crate::tensor::{Graph, Tensor, Var};

/// Logit added between tokens that were not neighbors before the shift.
pub const MASK_VALUE: f64 = -1e9;

/// Graph handles of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `[(2W−1)² · heads]`, entry `idx · heads + h`.
    pub bias_table: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGeometry {
    pub fn new(height: usize, width: usize, dim: usize, heads: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return dim_err(format!("{height}x{width} features are not divisible into {window}x{window} windows"));
        }
        if heads == 0 || !dim.is_multiple_of(heads) {
            return dim_err(format!("{dim} channels cannot be split into {heads} heads"));
        }
        let shift = if shifted { window / 2 } else { 0 };
        Ok(Self { height, width, dim, heads, window, shift })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Source token of position `p` in window `win` after rolling the map by
    /// `−shift` on both axes.
    fn source_token(&self, win: usize, p: usize) -> usize {
        let wc = self.width / self.window;
        let (wy, wx) = (win / wc, win % wc);
        let (py, px) = (p / self.window, p % self.window);
        let y = (wy * self.window + py + self.shift) % self.height;
        let x = (wx * self.window + px + self.shift) % self.width;
        y * self.width + x
    }

    /// Gather map `[T, d] -> [nW·heads, Tw, hd]`.
    pub fn partition_index(&self) -> Arc<[usize]> {
        let (tw, hd) = (self.tokens_per_window(), self.head_dim());
        let mut idx = Vec::with_capacity(self.height * self.width * self.dim);
        for win in 0..self.num_windows() {
            for h in 0..self.heads {
                for p in 0..tw {
                    let t = self.source_token(win, p);
                    for j in 0..hd {
                        idx.push(t * self.dim + h * hd + j);
                    }
                }
            }
        }
        idx.into()
    }

    /// Gather map `[heads, Tw, Tw]` into the bias table.
    pub fn bias_index(&self) -> Arc<[usize]> {
        let w = self.window as isize;
        let span = (2 * w - 1) as usize;
        let tw = self.tokens_per_window();
        let mut idx = Vec::with_capacity(self.heads * tw * tw);
        for h in 0..self.heads {
            for p in 0..tw {
                let (r1, c1) = ((p / self.window) as isize, (p % self.window) as isize);
                for q in 0..tw {
                    let (r2, c2) = ((q / self.window) as isize, (q % self.window) as isize);
                    let rel = ((r1 - r2 + w - 1) as usize) * span + (c1 - c2 + w - 1) as usize;
                    idx.push(rel * self.heads + h);
                }
            }
        }
        idx.into()
    }

    /// `[nW·heads, Tw, Tw]` mask separating regions that only touch because
    /// of the cyclic roll; `None` without a shift.
    pub fn shift_mask(&self) -> Option<Tensor> {
        if self.shift == 0 {
            return None;
        }
        let label = |v: usize, n: usize| {
            if v < n - self.window {
                0
            } else if v < n - self.shift {
                1
            } else {
                2
            }
        };
        let wc = self.width / self.window;
        let tw = self.tokens_per_window();
        let mut data = Vec::with_capacity(self.num_windows() * self.heads * tw * tw);
        for win in 0..self.num_windows() {
            let (wy, wx) = (win / wc, win % wc);
            let region: Vec<(u8, u8)> = (0..tw)
                .map(|p| {
                    let y = wy * self.window + p / self.window;
                    let x = wx * self.window + p % self.window;
                    (label(y, self.height), label(x, self.width))
                })
                .collect();
            for _ in 0..self.heads {
                for p in 0..tw {
                    for q in 0..tw {
                        data.push(if region[p] == region[q] { 0.0 } else { MASK_VALUE });
                    }
                }
            }
        }
        Some(Tensor::new(&[self.num_windows() * self.heads, tw, tw], data).unwrap())
    }
}

/// Bias table length for window side `w`.
pub fn bias_table_len(window: usize, heads: usize) -> usize {
    (2 * window - 1) * (2 * window - 1) * heads
}

/// `softmax(QKᵀ/√d_h + B)V` per window and head on tokens `z: [H·W, d]`.
pub fn window_attention(g: &mut Graph, z: Var, p: &AttentionVars, geo: &WindowGeometry) -> Result<Var> {
    let t = geo.height * geo.width;
    if g.shape(z) != [t, geo.dim] {
        return dim_err(format!("attention: tokens {:?} vs {t}x{}", g.shape(z), geo.dim));
    }
    if g.shape(p.bias_table) != [bias_table_len(geo.window, geo.heads)] {
        return dim_err(format!("attention: bias table {:?}", g.shape(p.bias_table)));
    }
    let (nw, tw, hd, heads) = (geo.num_windows(), geo.tokens_per_window(), geo.head_dim(), geo.heads);
    let part = geo.partition_index();
    let wshape = [nw * heads, tw, hd];

    let q = g.matmul(z, p.wq)?;
    let k = g.matmul(z, p.wk)?;
    let v = g.matmul(z, p.wv)?;
    let q = g.gather(q, part.clone(), &wshape)?;
    let k = g.gather(k, part.clone(), &wshape)?;
    let v = g.gather(v, part.clone(), &wshape)?;

    let logits = g.matmul_t(q, k, false, true)?;
    let logits = g.scale(logits, 1.0 / (hd as f64).sqrt());
    let logits = g.reshape(logits, &[nw, heads, tw, tw])?;
    let bias = g.gather(p.bias_table, geo.bias_index(), &[heads, tw, tw])?;
    let mut logits = g.add_broadcast(logits, bias)?;
    logits = g.reshape(logits, &[nw * heads, tw, tw])?;
    if let Some(mask) = geo.shift_mask() {
        let m = g.constant(mask);
        logits = g.add(logits, m)?;
    }
    let attn = g.softmax(logits)?;
    let out = g.matmul(attn, v)?;
    g.gather(out, invert(&part), &[t, geo.dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck::{grad_check_many, DEFAULT_EPS};

    fn rand(shape: &[usize], seed: u64, std: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng::normal_vec(&mut rng::rng(seed), n, std)).unwrap()
    }

    struct Fixture {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        table: Tensor,
    }

    fn fixture(d: usize, window: usize, heads: usize, seed: u64) -> Fixture {
        Fixture {
            wq: rand(&[d, d], seed, 0.5),
            wk: rand(&[d, d], seed + 1, 0.5),
            wv: rand(&[d, d], seed + 2, 0.5),
            table: rand(&[bias_table_len(window, heads)], seed + 3, 0.5),
        }
    }

    fn run(z: &Tensor, f: &Fixture, geo: &WindowGeometry) -> Tensor {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = AttentionVars {
            wq: g.constant(f.wq.clone()),
            wk: g.constant(f.wk.clone()),
            wv: g.constant(f.wv.clone()),
            bias_table: g.constant(f.table.clone()),
        };
        let out = window_attention(&mut g, zv, &p, geo).unwrap();
        g.value(out).clone()
    }

    fn matvec_t(z: &[f64], w: &[f64], d: usize, t: usize) -> Vec<f64> {
        // z[t, d] · w[d, d]
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| z[i * d + k] * w[k * d + j]).sum();
            }
        }
        out
    }

    #[test]
    fn single_window_matches_dense_formula() {
        let (d, heads, window) = (4, 2, 2);
        let geo = WindowGeometry::new(2, 2, d, heads, window, false).unwrap();
        let z = rand(&[4, d], 40, 1.0);
        let f = fixture(d, window, heads, 41);
        let got = run(&z, &f, &geo);

        let q = matvec_t(z.data(), f.wq.data(), d, 4);
        let k = matvec_t(z.data(), f.wk.data(), d, 4);
        let v = matvec_t(z.data(), f.wv.data(), d, 4);
        let hd = d / heads;
        let mut want = vec![0.0; 4 * d];
        for h in 0..heads {
            for p in 0..4 {
                let mut logits = [0.0; 4];
                for qq in 0..4 {
                    let dot: f64 = (0..hd).map(|j| q[p * d + h * hd + j] * k[qq * d + h * hd + j]).sum();
                    let dr = (p / 2) as isize - (qq / 2) as isize;
                    let dc = (p % 2) as isize - (qq % 2) as isize;
                    let rel = ((dr + 1) * 3 + (dc + 1)) as usize;
                    logits[qq] = dot / (hd as f64).sqrt() + f.table.data()[rel * heads + h];
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..hd {
                    want[p * d + h * hd + j] = (0..4).map(|qq| e[qq] / s * v[qq * d + h * hd + j]).sum();
                }
            }
        }
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_and_bias_average_window_values() {
        let (d, window) = (3, 2);
        let geo = WindowGeometry::new(4, 4, d, 1, window, false).unwrap();
        let z = rand(&[16, d], 42, 1.0);
        let mut f = fixture(d, window, 1, 43);
        f.wq = Tensor::zeros(&[d, d]);
        f.table = Tensor::zeros(&[bias_table_len(window, 1)]);
        let got = run(&z, &f, &geo);
        let v = matvec_t(z.data(), f.wv.data(), d, 16);
        for y in 0..4 {
            for x in 0..4 {
                let (wy, wx) = (y / 2 * 2, x / 2 * 2);
                for j in 0..d {
                    let mean: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(a, b)| v[((wy + a) * 4 + wx + b) * d + j])
                        .sum::<f64>()
                        / 4.0;
                    assert!((got.data()[(y * 4 + x) * d + j] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn plain_windows_are_independent_and_shifted_are_not() {
        let d = 2;
        let z = rand(&[64, d], 44, 1.0);
        let f = fixture(d, 4, 1, 45);
        let mut edited = z.clone();
        // token (3, 3) lives in the top-left window
        edited.data_mut()[27 * d] += 1.0;
        let in_other_window = |t: usize| (t / 8) >= 4 || (t % 8) >= 4;

        let geo = WindowGeometry::new(8, 8, d, 1, 4, false).unwrap();
        let (a, b) = (run(&z, &f, &geo), run(&edited, &f, &geo));
        for t in (0..64).filter(|&t| in_other_window(t)) {
            assert_eq!(a.data()[t * d..(t + 1) * d], b.data()[t * d..(t + 1) * d]);
        }

        let geo = WindowGeometry::new(8, 8, d, 1, 4, true).unwrap();
        let (a, b) = (run(&z, &f, &geo), run(&edited, &f, &geo));
        let crossed = (0..64)
            .filter(|&t| in_other_window(t))
            .any(|t| a.data()[t * d..(t + 1) * d] != b.data()[t * d..(t + 1) * d]);
        assert!(crossed);
    }

    #[test]
    fn swapping_windows_swaps_outputs() {
        let d = 2;
        let geo = WindowGeometry::new(2, 4, d, 1, 2, false).unwrap();
        let z = rand(&[8, d], 46, 1.0);
        let f = fixture(d, 2, 1, 47);
        let swap = |t: usize| {
            let (y, x) = (t / 4, t % 4);
            y * 4 + (x + 2) % 4
        };
        let mut zs = z.clone();
        for t in 0..8 {
            zs.data_mut()[t * d..(t + 1) * d].copy_from_slice(&z.data()[swap(t) * d..(swap(t) + 1) * d]);
        }
        let (a, b) = (run(&z, &f, &geo), run(&zs, &f, &geo));
        for t in 0..8 {
            assert_eq!(b.data()[t * d..(t + 1) * d], a.data()[swap(t) * d..(swap(t) + 1) * d]);
        }
    }

    #[test]
    fn mask_blocks_wrapped_regions() {
        let geo = WindowGeometry::new(4, 4, 1, 1, 2, true).unwrap();
        let m = geo.shift_mask().unwrap();
        // the last window mixes all three row and column regions
        let last = &m.data()[3 * 16..4 * 16];
        assert_eq!(last[0], 0.0);
        assert_eq!(last[1], MASK_VALUE);
        // the first window lies in one region
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        assert!(WindowGeometry::new(4, 4, 1, 1, 2, false).unwrap().shift_mask().is_none());
    }

    #[test]
    fn geometry_errors() {
        assert!(WindowGeometry::new(6, 8, 4, 1, 4, false).is_err());
        assert!(WindowGeometry::new(8, 8, 6, 4, 4, false).is_err());
    }

    #[test]
    fn attention_gradients() {
        let (d, heads, window) = (4, 2, 2);
        let f = fixture(d, window, heads, 48);
        let z = rand(&[16, d], 49, 1.0);
        let weights = rng::normal_vec(&mut rng::rng(50), 16 * d, 1.0);
        for shifted in [false, true] {
            let geo = WindowGeometry::new(4, 4, d, heads, window, shifted).unwrap();
            let err = grad_check_many(
                |g, v| {
                    let p = AttentionVars { wq: v[1], wk: v[2], wv: v[3], bias_table: v[4] };
                    let out = window_attention(g, v[0], &p, &geo)?;
                    let w = g.constant(Tensor::new(&[16, d], weights.clone())?);
                    let s = g.mul(out, w)?;
                    Ok(g.sum(s))
                },
                &[z.clone(), f.wq.clone(), f.wk.clone(), f.wv.clone(), f.table.clone()],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "shifted={shifted}: {err}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // with V = identity-like values the output rows are the weights
        let geo = WindowGeometry::new(2, 2, 4, 1, 2, false).unwrap();
        let z = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut f = fixture(4, 2, 1, 51);
        f.wv = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let out = run(&z, &f, &geo);
        for row in out.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

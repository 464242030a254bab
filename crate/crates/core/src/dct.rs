//! Orthonormal type-II 2D DCT via separable basis matrices.

use crate::image::Image;
use crate::tensor::kernels::gemm;

/// Orthonormal DCT-II basis, `c[k, n] = a_k cos(π (2n + 1) k / 2N)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            c[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    c
}

/// Cached bases for repeated transforms of one `h×w` shape.
#[derive(Clone, Debug)]
pub struct DctPlan {
    h: usize,
    w: usize,
    ch: Vec<f64>,
    cw: Vec<f64>,
}

impl DctPlan {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, ch: dct_matrix(h), cw: dct_matrix(w) }
    }

    /// `C_h · x · C_wᵀ`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        gemm(h, h, w, &self.ch, false, x, false, &mut tmp, false);
        let mut out = vec![0.0; h * w];
        gemm(h, w, w, &tmp, false, &self.cw, true, &mut out, false);
        out
    }

    /// `C_hᵀ · y · C_w`.
    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        gemm(h, h, w, &self.ch, true, y, false, &mut tmp, false);
        let mut out = vec![0.0; h * w];
        gemm(h, w, w, &tmp, false, &self.cw, false, &mut out, false);
        out
    }
}

pub fn dct2(x: &Image) -> Image {
    let plan = DctPlan::new(x.height(), x.width());
    Image::new(x.height(), x.width(), plan.forward(x.data())).unwrap()
}

pub fn idct2(y: &Image) -> Image {
    let plan = DctPlan::new(y.height(), y.width());
    Image::new(y.height(), y.width(), plan.inverse(y.data())).unwrap()
}

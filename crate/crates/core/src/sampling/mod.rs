//! Block partitioning and scalable sampling with one shared measurement
//! matrix: every block is first measured with the leading `n0` rows, then
//! topped up with rows `n0..m_ij` of the same matrix.

pub mod icsm;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::image::{partition_blocks, vectorize_block, Image};
use crate::parallel::Exec;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Block side B.
    pub block: usize,
    /// Target sampling ratio for the whole image.
    pub sr_target: f64,
    /// Maximum measurements per block (rows of Φ).
    pub max_measurements: usize,
    pub seed: u64,
}

impl SamplingConfig {
    /// Config with `M = B²`.
    pub fn new(block: usize, sr_target: f64, seed: u64) -> Result<Self> {
        let cfg = Self { block, sr_target, max_measurements: block * block, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `sr_t / 2` up to 0.1, `sr_t / 3` above.
    pub fn sr_init(&self) -> f64 {
        if self.sr_target <= 0.1 {
            self.sr_target / 2.0
        } else {
            self.sr_target / 3.0
        }
    }

    /// Initial measurements per block, `floor(B² · sr_init)`.
    pub fn n0(&self) -> usize {
        ((self.block * self.block) as f64 * self.sr_init()).floor() as usize
    }

    pub fn block_len(&self) -> usize {
        self.block * self.block
    }

    pub fn validate(&self) -> Result<()> {
        let b2 = self.block * self.block;
        if self.block == 0 {
            return contract_err("block side must be positive");
        }
        if !(self.sr_target > 0.0 && self.sr_target <= 1.0) {
            return contract_err(format!("target ratio {} outside (0, 1]", self.sr_target));
        }
        if self.max_measurements == 0 || self.max_measurements > b2 {
            return contract_err(format!("M = {} must lie in [1, B² = {b2}]", self.max_measurements));
        }
        let n0 = self.n0();
        if n0 < 1 || n0 >= self.max_measurements {
            return contract_err(format!(
                "initial count n0 = {n0} must satisfy 1 <= n0 < M = {} (sr_t = {})",
                self.max_measurements, self.sr_target
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixInit {
    /// i.i.d. N(0, 1/B²) entries.
    Gaussian,
    /// Gaussian rows orthonormalized by Gram–Schmidt.
    OrthonormalRows,
}

/// The shared sampler Φ (`M×B²`) and its linear mapper Ψ (`B²×M`).
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    pub phi: Tensor,
    pub psi: Tensor,
}

impl MeasurementMatrix {
    pub fn from_parts(phi: Tensor, psi: Tensor) -> Result<Self> {
        let (sp, ss) = (phi.shape(), psi.shape());
        if sp.len() != 2 || ss.len() != 2 || sp[0] != ss[1] || sp[1] != ss[0] {
            return dim_err(format!("phi {sp:?} and psi {ss:?} are not transposed shapes"));
        }
        let b = (sp[1] as f64).sqrt().round() as usize;
        if b * b != sp[1] {
            return dim_err(format!("phi width {} is not a square block", sp[1]));
        }
        Ok(Self { phi, psi })
    }

    pub fn rows(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn block_len(&self) -> usize {
        self.phi.shape()[1]
    }

    pub fn block_side(&self) -> usize {
        (self.block_len() as f64).sqrt().round() as usize
    }

    /// Rows `start..end` of Φ as a contiguous row-major slice.
    pub fn phi_rows(&self, start: usize, end: usize) -> &[f64] {
        let n = self.block_len();
        &self.phi.data()[start * n..end * n]
    }

    /// `Ψ[:, 0..k] · y` for a length-`k` measurement vector.
    pub fn map_back(&self, y: &[f64]) -> Vec<f64> {
        let m = self.rows();
        let psi = self.psi.data();
        (0..self.block_len())
            .map(|r| {
                let row = &psi[r * m..r * m + y.len()];
                row.iter().zip(y).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

pub fn init_measurement_matrix(cfg: &SamplingConfig, mode: MatrixInit) -> Result<MeasurementMatrix> {
    let n = cfg.block_len();
    let m = cfg.max_measurements;
    if m > n {
        return contract_err(format!("M = {m} exceeds B² = {n}"));
    }
    let mut r = rng::rng(cfg.seed);
    let mut phi = rng::normal_vec(&mut r, m * n, 1.0 / cfg.block as f64);
    if mode == MatrixInit::OrthonormalRows {
        orthonormalize_rows(&mut phi, m, n)?;
    }
    let phi = Tensor::new(&[m, n], phi)?;
    let psi = transpose(&phi);
    Ok(MeasurementMatrix { phi, psi })
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).unwrap()
}

/// Classical Gram–Schmidt with one re-orthogonalization pass per row.
fn orthonormalize_rows(a: &mut [f64], m: usize, n: usize) -> Result<()> {
    let mut coef = vec![0.0; m];
    for i in 0..m {
        let (done, rest) = a.split_at_mut(i * n);
        let row = &mut rest[..n];
        for _pass in 0..2 {
            if i > 0 {
                crate::tensor::kernels::gemm(i, n, 1, done, false, row, false, &mut coef[..i], false);
                for (q, &c) in done.chunks_exact(n).zip(&coef[..i]) {
                    for (r, &qv) in row.iter_mut().zip(q) {
                        *r -= c * qv;
                    }
                }
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return contract_err("rank deficient draw during orthonormalization");
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// `phi_rows · 𝔗(block)` for a `k×B²` row-major slab. Each output is an
/// independent dot product, so any row prefix yields a prefix of the result.
pub fn sample_block(phi_rows: &[f64], block_vec: &[f64]) -> Vec<f64> {
    let n = block_vec.len();
    debug_assert_eq!(phi_rows.len() % n, 0);
    phi_rows
        .chunks_exact(n)
        .map(|row| row.iter().zip(block_vec).map(|(a, b)| a * b).sum())
        .collect()
}

/// Per-block initial measurements `y⁰_ij` in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialMeasurements {
    pub rows: usize,
    pub cols: usize,
    pub n0: usize,
    pub y0: Vec<Vec<f64>>,
}

/// All measurements of one image: ragged per-block vectors with their counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub rows: usize,
    pub cols: usize,
    pub block: usize,
    pub sr_target: f64,
    pub n0: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub counts: Vec<usize>,
    pub y: Vec<Vec<f64>>,
}

impl MeasurementSet {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols
    }

    /// Check the ragged structure against the counts and grid.
    pub fn validate(&self) -> Result<()> {
        let nb = self.rows * self.cols;
        if self.counts.len() != nb || self.y.len() != nb {
            return dim_err(format!("measurement grid {}x{} has {} counts / {} vectors", self.rows, self.cols, self.counts.len(), self.y.len()));
        }
        if self.rows * self.block != self.image_height || self.cols * self.block != self.image_width {
            return dim_err("measurement grid does not tile the image");
        }
        for (i, (c, y)) in self.counts.iter().zip(&self.y).enumerate() {
            if *c != y.len() || *c < self.n0 || *c == 0 {
                return dim_err(format!("block {i}: count {c}, {} values, n0 {}", y.len(), self.n0));
            }
        }
        Ok(())
    }

    /// The first `n0` measurements of every block.
    pub fn initial(&self) -> InitialMeasurements {
        InitialMeasurements {
            rows: self.rows,
            cols: self.cols,
            n0: self.n0,
            y0: self.y.iter().map(|v| v[..self.n0].to_vec()).collect(),
        }
    }
}

fn block_vectors(image: &Image, side: usize) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let grid = partition_blocks(image, side)?;
    let vecs = grid.blocks.iter().map(vectorize_block).collect();
    Ok((grid.rows, grid.cols, vecs))
}

pub fn initial_sample(image: &Image, mm: &MeasurementMatrix, cfg: &SamplingConfig) -> Result<InitialMeasurements> {
    initial_sample_with(image, mm, cfg, Exec::default())
}

pub fn initial_sample_with(
    image: &Image,
    mm: &MeasurementMatrix,
    cfg: &SamplingConfig,
    exec: Exec,
) -> Result<InitialMeasurements> {
    cfg.validate()?;
    if mm.block_len() != cfg.block_len() || mm.rows() < cfg.max_measurements {
        return dim_err(format!(
            "matrix {:?} does not fit block {} with M = {}",
            mm.phi.shape(),
            cfg.block,
            cfg.max_measurements
        ));
    }
    let (rows, cols, vecs) = block_vectors(image, cfg.block)?;
    let n0 = cfg.n0();
    let head = mm.phi_rows(0, n0);
    let y0 = exec.map(vecs.len(), |i| sample_block(head, &vecs[i]));
    Ok(InitialMeasurements { rows, cols, n0, y0 })
}

/// Extend each block's initial measurements with rows `n0..m_ij` of Φ.
pub fn adaptive_sample(
    image: &Image,
    mm: &MeasurementMatrix,
    cfg: &SamplingConfig,
    counts: &[usize],
    initial: &InitialMeasurements,
) -> Result<MeasurementSet> {
    adaptive_sample_with(image, mm, cfg, counts, initial, Exec::default())
}

pub fn adaptive_sample_with(
    image: &Image,
    mm: &MeasurementMatrix,
    cfg: &SamplingConfig,
    counts: &[usize],
    initial: &InitialMeasurements,
    exec: Exec,
) -> Result<MeasurementSet> {
    let (rows, cols, vecs) = block_vectors(image, cfg.block)?;
    let n0 = cfg.n0();
    if counts.len() != vecs.len() || initial.y0.len() != vecs.len() || initial.n0 != n0 {
        return dim_err("allocation, initial measurements and image disagree on the block grid");
    }
    let m_max = cfg.max_measurements.min(mm.rows());
    if let Some((i, &c)) = counts.iter().enumerate().find(|(_, &c)| c < n0 || c > m_max) {
        return contract_err(format!("block {i}: count {c} outside [{n0}, {m_max}]"));
    }
    let y = exec.map(vecs.len(), |i| {
        let mut y = initial.y0[i].clone();
        y.extend(sample_block(mm.phi_rows(n0, counts[i]), &vecs[i]));
        y
    });
    Ok(MeasurementSet {
        rows,
        cols,
        block: cfg.block,
        sr_target: cfg.sr_target,
        n0,
        image_height: image.height(),
        image_width: image.width(),
        counts: counts.to_vec(),
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg(sr: f64) -> SamplingConfig {
        SamplingConfig::new(4, sr, 0).unwrap()
    }

    #[test]
    fn n0_follows_ratio_rule() {
        assert_eq!(SamplingConfig::new(32, 0.1, 0).unwrap().n0(), 51);
        assert_eq!(SamplingConfig::new(32, 0.25, 0).unwrap().n0(), 85);
        assert_eq!(SamplingConfig::new(32, 0.01, 0).unwrap().n0(), 5);
        assert_eq!(SamplingConfig::new(32, 0.5, 0).unwrap().n0(), 170);
        assert!(SamplingConfig::new(32, 0.001, 0).is_err());
        assert!(SamplingConfig::new(32, 1.5, 0).is_err());
    }

    #[test]
    fn identity_rows_pick_pixels_and_mean_row() {
        let b: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut eye = vec![0.0; 3 * 16];
        for k in 0..3 {
            eye[k * 16 + k] = 1.0;
        }
        assert_eq!(sample_block(&eye, &b), vec![0.0, 1.0, 2.0]);
        let mean_row = vec![1.0 / 16.0; 16];
        assert_eq!(sample_block(&mean_row, &b), vec![7.5]);
    }

    #[test]
    fn gaussian_sample_matches_double_loop() {
        let cfg = small_cfg(0.5);
        let mm = init_measurement_matrix(&cfg, MatrixInit::Gaussian).unwrap();
        let block: Vec<f64> = (0..16).map(|i| ((i * 5 % 7) as f64) / 7.0).collect();
        let y = sample_block(mm.phi_rows(0, 16), &block);
        for r in 0..16 {
            let mut s = 0.0;
            for c in 0..16 {
                s += mm.phi.data()[r * 16 + c] * block[c];
            }
            assert!((y[r] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_init_and_psi_transpose() {
        let cfg = SamplingConfig::new(8, 0.25, 3).unwrap();
        let mm = init_measurement_matrix(&cfg, MatrixInit::OrthonormalRows).unwrap();
        let (m, n) = (mm.rows(), mm.block_len());
        let p = mm.phi.data();
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = (0..n).map(|k| p[i * n + k] * p[j * n + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "{i},{j}: {dot}");
            }
        }
        for i in 0..m {
            for k in 0..n {
                assert_eq!(mm.psi.data()[k * m + i].to_bits(), p[i * n + k].to_bits());
            }
        }
        let again = init_measurement_matrix(&cfg, MatrixInit::OrthonormalRows).unwrap();
        assert_eq!(again, mm);
    }

    #[test]
    fn too_many_rows_is_contract_error() {
        let mut cfg = small_cfg(0.5);
        cfg.max_measurements = 17;
        assert!(matches!(init_measurement_matrix(&cfg, MatrixInit::Gaussian), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn initial_and_adaptive_sampling() {
        let cfg = small_cfg(0.5);
        let mm = init_measurement_matrix(&cfg, MatrixInit::Gaussian).unwrap();
        let zero = Image::zeros(8, 8);
        let init = initial_sample(&zero, &mm, &cfg).unwrap();
        assert_eq!(init.n0, 2);
        assert!(init.y0.iter().all(|v| v.len() == 2 && v.iter().all(|&x| x == 0.0)));

        let img = Image::from_fn(8, 8, |y, x| ((y * 8 + x) as f64 * 0.37).sin());
        let init = initial_sample(&img, &mm, &cfg).unwrap();
        let same = adaptive_sample(&img, &mm, &cfg, &[2, 2, 2, 2], &init).unwrap();
        assert_eq!(same.y, init.y0);
        let full = adaptive_sample(&img, &mm, &cfg, &[16, 2, 5, 2], &init).unwrap();
        let grid = partition_blocks(&img, 4).unwrap();
        let direct = sample_block(mm.phi_rows(0, 16), grid.block(0, 0).data());
        assert_eq!(full.y[0], direct);
        assert_eq!(full.y[2].len(), 5);
        assert!(adaptive_sample(&img, &mm, &cfg, &[17, 2, 2, 2], &init).is_err());
        assert!(adaptive_sample(&img, &mm, &cfg, &[1, 2, 2, 2], &init).is_err());
    }

    proptest! {
        #[test]
        fn prefix_consistency(k1 in 1usize..16, extra in 0usize..16, seed in any::<u64>()) {
            let k2 = (k1 + extra).min(16);
            let cfg = SamplingConfig::new(4, 0.5, seed).unwrap();
            let mm = init_measurement_matrix(&cfg, MatrixInit::Gaussian).unwrap();
            let x = crate::rng::normal_vec(&mut crate::rng::rng(seed ^ 1), 16, 1.0);
            let a = sample_block(mm.phi_rows(0, k1), &x);
            let b = sample_block(mm.phi_rows(0, k2), &x);
            prop_assert_eq!(&a[..], &b[..k1]);
        }

        #[test]
        fn sampling_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
            let cfg = SamplingConfig::new(4, 0.5, seed).unwrap();
            let mm = init_measurement_matrix(&cfg, MatrixInit::Gaussian).unwrap();
            let mut r = crate::rng::rng(seed ^ 7);
            let x = crate::rng::normal_vec(&mut r, 16, 1.0);
            let z = crate::rng::normal_vec(&mut r, 16, 1.0);
            let comb: Vec<f64> = x.iter().zip(&z).map(|(a, b)| alpha * a + beta * b).collect();
            let rows = mm.phi_rows(0, 16);
            let (yx, yz, yc) = (sample_block(rows, &x), sample_block(rows, &z), sample_block(rows, &comb));
            for i in 0..16 {
                prop_assert!((yc[i] - (alpha * yx[i] + beta * yz[i])).abs() < 1e-12);
            }
        }
    }
}

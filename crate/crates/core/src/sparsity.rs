//! Per-block sparsity estimation from the low-quality initial estimate and
//! allocation of the remaining measurement budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dct::DctPlan;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::image::{assemble_vectors, partition_blocks, Image};
use crate::sampling::{InitialMeasurements, MeasurementMatrix, SamplingConfig};

pub const GAUSSIAN_SIZE: usize = 9;
pub const GAUSSIAN_SIGMA: f64 = 2.0;

/// Snap tolerance for the floor in the allocation step, so exact-integer
/// shares survive 1-ulp rounding of the normalization.
const FLOOR_SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// DCT sign-spectrum saliency.
    Sm,
    /// Block standard deviation.
    Std,
    /// Mean absolute difference to adjacent blocks.
    Diff,
    /// No adaptation: equal weight per block.
    Uniform,
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm" => Ok(Estimator::Sm),
            "std" => Ok(Estimator::Std),
            "diff" => Ok(Estimator::Diff),
            "uniform" => Ok(Estimator::Uniform),
            other => contract_err(format!("unknown estimator '{other}'")),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Sm => "sm",
            Estimator::Std => "std",
            Estimator::Diff => "diff",
            Estimator::Uniform => "uniform",
        })
    }
}

/// Non-negative per-block scores in raster order; larger means less sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub method: Estimator,
}

impl SparsityMap {
    pub fn uniform(rows: usize, cols: usize, method: Estimator) -> Self {
        let n = rows * cols;
        Self { rows, cols, values: vec![1.0 / n as f64; n], method }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationMap {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<usize>,
    pub total_budget: usize,
    pub n0: usize,
}

impl AllocationMap {
    pub fn sum(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Low-quality estimate `X⁰` from initial measurements: `Ψ[:, 0..n0] · y⁰`
/// per block, reassembled in raster order.
pub fn low_quality_estimate(initial: &InitialMeasurements, mm: &MeasurementMatrix) -> Result<Image> {
    if let Some(bad) = initial.y0.iter().find(|y| y.len() != initial.n0) {
        return dim_err(format!("initial vector of length {} where n0 = {}", bad.len(), initial.n0));
    }
    if initial.n0 > mm.rows() {
        return dim_err(format!("n0 = {} exceeds {} rows of the mapper", initial.n0, mm.rows()));
    }
    let vecs: Vec<Vec<f64>> = initial.y0.iter().map(|y| mm.map_back(y)).collect();
    assemble_vectors(&vecs, initial.rows, initial.cols, mm.block_side())
}

pub fn estimate(x0: &Image, block: usize, method: Estimator) -> Result<SparsityMap> {
    match method {
        Estimator::Sm => estimate_sparsity_sm(x0, block),
        Estimator::Std => estimate_sparsity_std(x0, block),
        Estimator::Diff => estimate_sparsity_diff(x0, block),
        Estimator::Uniform => {
            let g = partition_blocks(x0, block)?;
            Ok(SparsityMap::uniform(g.rows, g.cols, Estimator::Uniform))
        }
    }
}

fn is_constant(img: &Image) -> bool {
    let first = img.data()[0];
    img.data().iter().all(|&v| v == first)
}

/// Saliency: `F = |idct2(sign(dct2(X⁰)))|`, `S = G * F²`, and each block's
/// share of the total of `S`.
pub fn estimate_sparsity_sm(x0: &Image, block: usize) -> Result<SparsityMap> {
    let grid = partition_blocks(x0, block)?;
    if is_constant(x0) {
        return Ok(SparsityMap::uniform(grid.rows, grid.cols, Estimator::Sm));
    }
    let (h, w) = (x0.height(), x0.width());
    let plan = DctPlan::new(h, w);
    let coef = plan.forward(x0.data());
    // coefficients at rounding-noise level count as zero
    let tol = 1e-12 * coef.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let signs: Vec<f64> = coef
        .iter()
        .map(|&c| if c.abs() <= tol { 0.0 } else { c.signum() })
        .collect();
    let f = plan.inverse(&signs);
    let f2 = Image::new(h, w, f.iter().map(|v| v * v).collect())?;
    let s = gaussian_blur(&f2, GAUSSIAN_SIZE, GAUSSIAN_SIGMA);
    let total: f64 = s.data().iter().sum();
    let sums = block_sums(&s, block)?;
    if !(total > 0.0) {
        return Ok(SparsityMap::uniform(grid.rows, grid.cols, Estimator::Sm));
    }
    Ok(SparsityMap {
        rows: grid.rows,
        cols: grid.cols,
        values: sums.into_iter().map(|v| v / total).collect(),
        method: Estimator::Sm,
    })
}

/// Population standard deviation of each block.
pub fn estimate_sparsity_std(x0: &Image, block: usize) -> Result<SparsityMap> {
    let grid = partition_blocks(x0, block)?;
    let values = grid
        .blocks
        .iter()
        .map(|b| {
            let d = b.data();
            if d.iter().all(|&v| v == d[0]) {
                return 0.0;
            }
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(SparsityMap { rows: grid.rows, cols: grid.cols, values, method: Estimator::Std })
}

/// Mean over existing 4-neighbors (left, up, right, down) of the mean
/// absolute pixel difference between the two blocks.
pub fn estimate_sparsity_diff(x0: &Image, block: usize) -> Result<SparsityMap> {
    let grid = partition_blocks(x0, block)?;
    let (rows, cols) = (grid.rows, grid.cols);
    let mad = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let here = grid.block(i, j).data();
            let mut acc = 0.0;
            let mut n = 0usize;
            let neighbors = [
                (j > 0).then(|| (i, j - 1)),
                (i > 0).then(|| (i - 1, j)),
                (j + 1 < cols).then(|| (i, j + 1)),
                (i + 1 < rows).then(|| (i + 1, j)),
            ];
            for (ni, nj) in neighbors.into_iter().flatten() {
                acc += mad(here, grid.block(ni, nj).data());
                n += 1;
            }
            values.push(if n == 0 { 0.0 } else { acc / n as f64 });
        }
    }
    Ok(SparsityMap { rows, cols, values, method: Estimator::Diff })
}

/// Split the budget `floor(sr_t·H·W)`: every block keeps `n0`, the rest is
/// shared in proportion to `V` (floored), then counts above `M` are clipped
/// and the surplus handed out one at a time to uncapped blocks in
/// descending-`V` order.
pub fn allocate(v: &SparsityMap, cfg: &SamplingConfig, height: usize, width: usize) -> Result<AllocationMap> {
    cfg.validate()?;
    let b = cfg.block;
    if !height.is_multiple_of(b) || !width.is_multiple_of(b) || height / b != v.rows || width / b != v.cols {
        return dim_err(format!(
            "sparsity grid {}x{} does not tile a {height}x{width} image with B = {b}",
            v.rows, v.cols
        ));
    }
    let nb = v.rows * v.cols;
    if v.values.len() != nb {
        return dim_err("sparsity map length disagrees with its grid");
    }
    let n0 = cfg.n0();
    let total = (cfg.sr_target * (height * width) as f64).floor() as usize;
    let rest = total as i64 - (n0 * nb) as i64;
    if rest < 0 {
        return contract_err(format!(
            "budget {total} is below the {} initial measurements",
            n0 * nb
        ));
    }
    if v.values.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return contract_err("sparsity values must be finite and non-negative");
    }
    let sum: f64 = v.values.iter().sum();
    let weights: Vec<f64> = if sum > 0.0 {
        v.values.clone()
    } else {
        vec![1.0; nb]
    };
    let sum = if sum > 0.0 { sum } else { nb as f64 };

    let rest_f = rest as f64;
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|&x| n0 + (rest_f * (x / sum) + FLOOR_SNAP).floor() as usize)
        .collect();

    let cap = cfg.max_measurements;
    let mut surplus: usize = counts.iter().map(|&c| c.saturating_sub(cap)).sum();
    counts.iter_mut().for_each(|c| *c = (*c).min(cap));
    if surplus > 0 {
        let mut order: Vec<usize> = (0..nb).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        while surplus > 0 {
            let mut gave = false;
            for &i in &order {
                if surplus == 0 {
                    break;
                }
                if counts[i] < cap {
                    counts[i] += 1;
                    surplus -= 1;
                    gave = true;
                }
            }
            if !gave {
                break;
            }
        }
    }
    debug_assert!(counts.iter().sum::<usize>() <= total);
    Ok(AllocationMap { rows: v.rows, cols: v.cols, counts, total_budget: total, n0 })
}

fn block_sums(img: &Image, block: usize) -> Result<Vec<f64>> {
    Ok(partition_blocks(img, block)?
        .blocks
        .iter()
        .map(|b| b.data().iter().sum())
        .collect())
}

/// Mirror index without repeating the edge sample, folded periodically so
/// any offset maps into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable normalized Gaussian smoothing with reflect padding.
pub fn gaussian_blur(img: &Image, size: usize, sigma: f64) -> Image {
    let k = gaussian_kernel_1d(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * img.get(y, reflect_index(x as isize + t as isize - r, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect_index(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    Image::new(h, w, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(sr: f64) -> SamplingConfig {
        SamplingConfig::new(32, sr, 0).unwrap()
    }

    fn map(values: Vec<f64>, rows: usize, cols: usize) -> SparsityMap {
        SparsityMap { rows, cols, values, method: Estimator::Std }
    }

    use crate::synthetic::quadrant_texture;

    #[test]
    fn uniform_allocation_64() {
        let a = allocate(&map(vec![1.0; 4], 2, 2), &cfg(0.25), 64, 64).unwrap();
        assert_eq!(a.total_budget, 1024);
        assert_eq!(a.n0, 85);
        assert_eq!(a.counts, vec![256; 4]);
    }

    #[test]
    fn worked_example() {
        let a = allocate(&map(vec![0.4, 0.3, 0.2, 0.1], 2, 2), &cfg(0.25), 64, 64).unwrap();
        assert_eq!(a.counts, vec![358, 290, 221, 153]);
        assert_eq!(a.sum(), 1022);
    }

    #[test]
    fn zero_map_falls_back_to_uniform() {
        let a = allocate(&map(vec![0.0; 4], 2, 2), &cfg(0.25), 64, 64).unwrap();
        assert_eq!(a.counts, vec![256; 4]);
    }

    #[test]
    fn concentrated_map_is_capped_and_redistributed() {
        // sr 0.5 on 4 blocks: total 2048, n0 170, rest 1368, all to block 0
        let a = allocate(&map(vec![1.0, 0.0, 0.0, 0.0], 2, 2), &cfg(0.5), 64, 64).unwrap();
        assert_eq!(a.counts[0], 1024);
        assert_eq!(a.sum(), 2048);
        assert!(a.counts.iter().all(|&c| (170..=1024).contains(&c)));
    }

    #[test]
    fn allocation_rejects_wrong_grid() {
        assert!(allocate(&map(vec![1.0; 4], 2, 2), &cfg(0.25), 96, 64).is_err());
    }

    #[test]
    fn std_examples() {
        let flat = Image::filled(32, 32, 0.3);
        assert_eq!(estimate_sparsity_std(&flat, 32).unwrap().values, vec![0.0]);
        let alt = Image::from_fn(32, 32, |y, x| if (y + x) % 2 == 0 { 0.0 } else { 2.0 });
        assert!((estimate_sparsity_std(&alt, 32).unwrap().values[0] - 1.0).abs() < 1e-15);

        let img = quadrant_texture(64);
        let v1 = estimate_sparsity_std(&img, 32).unwrap();
        let v2 = estimate_sparsity_std(&img.map(|p| 3.0 * p), 32).unwrap();
        for (a, b) in v1.values.iter().zip(&v2.values) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        let c = cfg(0.1);
        assert_eq!(allocate(&v1, &c, 64, 64).unwrap(), allocate(&v2, &c, 64, 64).unwrap());
    }

    #[test]
    fn diff_examples() {
        let same = Image::filled(64, 64, 0.7);
        let v = estimate_sparsity_diff(&same, 32).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
        assert_eq!(allocate(&v, &cfg(0.25), 64, 64).unwrap().counts, vec![256; 4]);

        let two = Image::from_fn(64, 32, |y, _| if y < 32 { 0.0 } else { 1.0 });
        assert_eq!(estimate_sparsity_diff(&two, 32).unwrap().values, vec![1.0, 1.0]);

        // 3x3 grid with only the center block nonzero: the corner averages
        // over its 2 neighbors, none of which is the center
        let center = Image::from_fn(96, 96, |y, x| if (32..64).contains(&y) && (32..64).contains(&x) { 1.0 } else { 0.0 });
        let v = estimate_sparsity_diff(&center, 32).unwrap();
        assert_eq!(v.values[0], 0.0);
        assert_eq!(v.values[1], 1.0 / 3.0); // edge block: 3 neighbors, one differs
        assert_eq!(v.values[4], 1.0);
    }

    #[test]
    fn sm_constant_is_uniform_and_normalized() {
        let v = estimate_sparsity_sm(&Image::filled(64, 64, 0.4), 32).unwrap();
        assert_eq!(v.values, vec![0.25; 4]);
        let v = estimate_sparsity_sm(&Image::zeros(64, 64), 32).unwrap();
        assert_eq!(v.values, vec![0.25; 4]);
        let r = Image::new(64, 96, crate::rng::normal_vec(&mut crate::rng::rng(5), 64 * 96, 1.0)).unwrap();
        let v = estimate_sparsity_sm(&r, 32).unwrap();
        assert!((v.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.values.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn sm_prefers_textured_quadrant() {
        let v = estimate_sparsity_sm(&quadrant_texture(64), 32).unwrap();
        let best = v.values[1];
        for (i, &x) in v.values.iter().enumerate() {
            if i != 1 {
                assert!(best > x, "{:?}", v.values);
            }
        }
    }

    #[test]
    fn low_quality_estimate_zero_and_projection() {
        use crate::sampling::{init_measurement_matrix, initial_sample, MatrixInit};
        let c = SamplingConfig::new(4, 0.5, 9).unwrap();
        let mm = init_measurement_matrix(&c, MatrixInit::OrthonormalRows).unwrap();
        let zero = initial_sample(&Image::zeros(8, 8), &mm, &c).unwrap();
        assert!(low_quality_estimate(&zero, &mm).unwrap().data().iter().all(|&v| v == 0.0));

        // image whose blocks lie in the span of the first n0 rows
        let n0 = c.n0();
        let rows = mm.phi_rows(0, n0);
        let coeffs = [[0.3, -1.2], [2.0, 0.5], [0.0, 1.0], [-0.7, 0.1]];
        let vecs: Vec<Vec<f64>> = coeffs
            .iter()
            .map(|cf| (0..16).map(|k| cf[0] * rows[k] + cf[1] * rows[16 + k]).collect())
            .collect();
        let img = assemble_vectors(&vecs, 2, 2, 4).unwrap();
        let init = initial_sample(&img, &mm, &c).unwrap();
        let x0 = low_quality_estimate(&init, &mm).unwrap();
        for (a, b) in x0.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn low_quality_estimate_matches_matrix_product() {
        use crate::sampling::{init_measurement_matrix, initial_sample, MatrixInit};
        let mut c = SamplingConfig::new(4, 0.5, 0).unwrap();
        c.seed = 0;
        let mm = init_measurement_matrix(&c, MatrixInit::Gaussian).unwrap();
        assert_eq!(c.n0(), 2);
        let img = Image::from_fn(8, 8, |y, x| ((y * 3 + x * 5) % 7) as f64 / 7.0);
        let init = initial_sample(&img, &mm, &c).unwrap();
        let x0 = low_quality_estimate(&init, &mm).unwrap();
        let grid = partition_blocks(&img, 4).unwrap();
        let (m, n0) = (mm.rows(), init.n0);
        for (bi, b) in grid.blocks.iter().enumerate() {
            // x⁰ = Ψ[:, :n0] Φ[:n0, :] x
            let (br, bc) = (bi / 2, bi % 2);
            for r in 0..16 {
                let mut s = 0.0;
                for k in 0..n0 {
                    let mut y = 0.0;
                    for col in 0..16 {
                        y += mm.phi.data()[k * 16 + col] * b.data()[col];
                    }
                    s += mm.psi.data()[r * m + k] * y;
                }
                let got = x0.get(br * 4 + r / 4, bc * 4 + r % 4);
                assert!((got - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflect_padding_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
        let blurred = gaussian_blur(&Image::filled(10, 12, 0.8), 9, 2.0);
        assert!(blurred.data().iter().all(|&v| (v - 0.8).abs() < 1e-14));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn allocation_properties(
            vals in prop::collection::vec(0.0f64..1.0, 1..30),
            sr_idx in 0usize..5,
            alpha in 0.01f64..100.0,
        ) {
            let sr = [0.01, 0.04, 0.1, 0.25, 0.5][sr_idx];
            let nb = vals.len();
            let c = cfg(sr);
            let v = map(vals.clone(), 1, nb);
            let a = allocate(&v, &c, 32, 32 * nb).unwrap();
            let total = (sr * (1024 * nb) as f64).floor() as usize;
            prop_assert!(a.sum() <= total);
            prop_assert!(total - a.sum() < nb);
            prop_assert!(a.counts.iter().all(|&m| m >= c.n0() && m <= 1024));
            for i in 0..nb {
                for j in 0..nb {
                    if vals[i] > vals[j] {
                        prop_assert!(a.counts[i] >= a.counts[j]);
                    }
                }
            }
            let scaled = map(vals.iter().map(|x| x * alpha).collect(), 1, nb);
            prop_assert_eq!(allocate(&scaled, &c, 32, 32 * nb).unwrap().counts, a.counts);
        }
    }
}

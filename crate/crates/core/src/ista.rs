//! Training-free block reconstruction: alternate the measurement-consistency
//! projection with soft thresholding of the block's 2-D DCT.

use crate::dct::DctPlan;
use crate::error::{contract_err, dim_err, Result};
use crate::image::{assemble_vectors, Image};
use crate::parallel::Exec;
use crate::projection::project_block;
use crate::sampling::{MeasurementMatrix, MeasurementSet};

pub const DEFAULT_ITERS: usize = 200;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Reconstruct one block from `y = phi_rows · x`, starting at zero.
pub fn ista_block(y: &[f64], phi_rows: &[f64], plan: &DctPlan, iters: usize, threshold: f64) -> Result<Vec<f64>> {
    let n = phi_rows.len() / y.len().max(1);
    let mut x = vec![0.0; n];
    for _ in 0..iters {
        x = project_block(&x, y, phi_rows, 0.0)?;
        let c: Vec<f64> = plan.forward(&x).into_iter().map(|v| soft_threshold(v, threshold)).collect();
        x = plan.inverse(&c);
    }
    Ok(x)
}

pub fn ista_reconstruct(ms: &MeasurementSet, mm: &MeasurementMatrix, iters: usize, threshold: f64) -> Result<Image> {
    ista_reconstruct_with(ms, mm, iters, threshold, Exec::default())
}

pub fn ista_reconstruct_with(
    ms: &MeasurementSet,
    mm: &MeasurementMatrix,
    iters: usize,
    threshold: f64,
    exec: Exec,
) -> Result<Image> {
    ms.validate()?;
    if !(threshold >= 0.0) {
        return contract_err(format!("threshold {threshold} must be non-negative"));
    }
    if mm.block_side() != ms.block {
        return dim_err(format!("matrix block {} vs measurement block {}", mm.block_side(), ms.block));
    }
    if let Some(&m) = ms.counts.iter().find(|&&m| m > mm.rows()) {
        return dim_err(format!("{m} measurements exceed the {} matrix rows", mm.rows()));
    }
    let plan = DctPlan::new(ms.block, ms.block);
    let blocks = exec.try_map(ms.num_blocks(), |i| {
        ista_block(&ms.y[i], mm.phi_rows(0, ms.counts[i]), &plan, iters, threshold)
    })?;
    assemble_vectors(&blocks, ms.rows, ms.cols, ms.block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sampling::{init_measurement_matrix, sample_block, MatrixInit, SamplingConfig};

    fn ortho(b: usize, seed: u64) -> MeasurementMatrix {
        let cfg = SamplingConfig::new(b, 0.5, seed).unwrap();
        init_measurement_matrix(&cfg, MatrixInit::OrthonormalRows).unwrap()
    }

    fn single_block(y: Vec<f64>, b: usize) -> MeasurementSet {
        MeasurementSet {
            rows: 1,
            cols: 1,
            block: b,
            sr_target: 0.5,
            n0: 1,
            image_height: b,
            image_width: b,
            counts: vec![y.len()],
            y: vec![y],
        }
    }

    #[test]
    fn shrinkage() {
        assert_eq!(soft_threshold(0.5, 0.2), 0.3);
        assert_eq!(soft_threshold(-0.5, 0.2), -0.3);
        assert_eq!(soft_threshold(0.1, 0.2), 0.0);
    }

    #[test]
    fn full_sampling_recovers_in_one_step() {
        let mm = ortho(4, 1);
        let x = rng::normal_vec(&mut rng::rng(2), 16, 1.0);
        let ms = single_block(sample_block(mm.phi_rows(0, 16), &x), 4);
        let out = ista_reconstruct(&ms, &mm, 1, 0.0).unwrap();
        assert!(out.data().iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn zero_measurements_give_zero() {
        let mm = ortho(4, 3);
        let ms = single_block(vec![0.0; 7], 4);
        assert!(ista_reconstruct(&ms, &mm, 20, 0.1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_vanishes_after_each_projection() {
        let mm = ortho(4, 4);
        let x = rng::normal_vec(&mut rng::rng(5), 16, 1.0);
        let phi = mm.phi_rows(0, 9);
        let y = sample_block(phi, &x);
        let plan = DctPlan::new(4, 4);
        let mut est = vec![0.0; 16];
        for _ in 0..10 {
            est = project_block(&est, &y, phi, 0.0).unwrap();
            let r: f64 = sample_block(phi, &est).iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(r < 1e-8);
            est = plan.inverse(&plan.forward(&est));
        }
    }

    #[test]
    fn recovers_a_dct_sparse_block() {
        let mm = ortho(4, 6);
        let plan = DctPlan::new(4, 4);
        let mut coef = vec![0.0; 16];
        for (k, v) in [(0, 1.5), (1, -0.8), (4, 0.6), (6, 0.9), (11, -0.4)] {
            coef[k] = v;
        }
        let x = plan.inverse(&coef);
        let ms = single_block(sample_block(mm.phi_rows(0, 12), &x), 4);
        let err = |t: f64| {
            let out = ista_reconstruct(&ms, &mm, 200, t).unwrap();
            out.data().iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (fine, coarse) = (err(0.01), err(0.05));
        assert!(fine < 0.05, "{fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mm = ortho(4, 7);
        let img = crate::synthetic::scene(16, 16, 8);
        let cfg = SamplingConfig::new(4, 0.5, 0).unwrap();
        let init = crate::sampling::initial_sample(&img, &mm, &cfg).unwrap();
        let ms = crate::sampling::adaptive_sample(&img, &mm, &cfg, &[6; 16], &init).unwrap();
        let a = ista_reconstruct_with(&ms, &mm, 30, 0.01, Exec::Sequential).unwrap();
        let b = ista_reconstruct_with(&ms, &mm, 30, 0.01, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(ista_reconstruct(&ms, &mm, 5, -1.0).is_err());
    }
}

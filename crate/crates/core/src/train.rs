//! Losses, the Adam optimizer and the desk-scale trainer.
//!
//! Every training image gets its own graph: the allocation is planned from
//! the detached low-quality estimate, then sampling (`y = Φ[:m] x`), both
//! initial estimates, the network and the three loss terms are recorded so
//! gradients reach `Φ`, `Ψ` and all network weights.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::image::{partition_blocks, vectorize_block, Image};
use crate::model::{initialize_image_graph, uformer_forward, ModelConfig, ParamStore, ParamVars};
use crate::parallel::Exec;
use crate::projection::MeasurementVars;
use crate::rng;
use crate::sampling::{adaptive_sample, initial_sample, MeasurementMatrix, MeasurementSet, SamplingConfig};
use crate::sparsity::{allocate, estimate, low_quality_estimate, Estimator};
use crate::tensor::index::blocks_index;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1 }
    }
}

/// The three loss terms, each already divided by `2N`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self.l1, self.l2, self.l3, w)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1/2N) Σ_k ‖X̂_k − X_k‖²`.
pub fn loss_l1(xhat: &[Image], x: &[Image]) -> Result<f64> {
    if xhat.len() != x.len() || xhat.is_empty() {
        return dim_err(format!("loss over {} reconstructions and {} targets", xhat.len(), x.len()));
    }
    let mut s = 0.0;
    for (a, b) in xhat.iter().zip(x) {
        if !a.same_shape(b) {
            return dim_err("loss: image shapes differ");
        }
        s += sq_dist(a.data(), b.data());
    }
    Ok(s / (2.0 * x.len() as f64))
}

/// `(1/2N) Σ_k Σ_ij ‖y_kij − Φ[:m_kij] 𝔗(x̂_kij)‖²`.
pub fn loss_l2(ms: &[MeasurementSet], xhat: &[Image], mm: &MeasurementMatrix) -> Result<f64> {
    if ms.len() != xhat.len() || ms.is_empty() {
        return dim_err("loss: measurement sets and reconstructions differ in count");
    }
    let mut s = 0.0;
    for (set, img) in ms.iter().zip(xhat) {
        set.validate()?;
        if img.height() != set.image_height || img.width() != set.image_width {
            return dim_err("loss: reconstruction does not match its measurements");
        }
        let grid = partition_blocks(img, set.block)?;
        for (i, blk) in grid.blocks.iter().enumerate() {
            let m = set.counts[i];
            let y = crate::sampling::sample_block(mm.phi_rows(0, m), &vectorize_block(blk));
            s += sq_dist(&set.y[i], &y);
        }
    }
    Ok(s / (2.0 * ms.len() as f64))
}

/// Same formula as [`loss_l1`], applied to the low-quality estimates.
pub fn loss_l3(x0hat: &[Image], x: &[Image]) -> Result<f64> {
    loss_l1(x0hat, x)
}

pub fn total_loss(l1: f64, l2: f64, l3: f64, w: &LossWeights) -> f64 {
    l1 + w.lambda1 * l2 + w.lambda2 * l3
}

/// Per-block counts for `image` under the current `Φ`/`Ψ`, planned from the
/// low-quality estimate.
pub fn plan_counts(image: &Image, mm: &MeasurementMatrix, sr: f64, estimator: Estimator) -> Result<Vec<usize>> {
    let cfg = SamplingConfig::new(mm.block_side(), sr, 0)?;
    let init = initial_sample(image, mm, &cfg)?;
    let x0 = low_quality_estimate(&init, mm)?;
    let v = estimate(&x0, cfg.block, estimator)?;
    Ok(allocate(&v, &cfg, image.height(), image.width())?.counts)
}

/// Sample, allocate and measure one image in a single call.
pub fn measure_image(image: &Image, mm: &MeasurementMatrix, sr: f64, estimator: Estimator) -> Result<MeasurementSet> {
    let cfg = SamplingConfig::new(mm.block_side(), sr, 0)?;
    let init = initial_sample(image, mm, &cfg)?;
    let x0 = low_quality_estimate(&init, mm)?;
    let v = estimate(&x0, cfg.block, estimator)?;
    let alloc = allocate(&v, &cfg, image.height(), image.width())?;
    adaptive_sample(image, mm, &cfg, &alloc.counts, &init)
}

/// Recorded forward pass of one training image.
pub struct ImageGraph {
    pub graph: Graph,
    pub params: ParamVars,
    /// Unnormalized `‖X̂ − X‖²`, `Σ‖y − Φx̂‖²` and `‖X̂⁰ − X‖²`.
    pub sums: [Var; 3],
    pub xhat: Var,
}

impl ImageGraph {
    pub fn sums(&self) -> [f64; 3] {
        self.sums.map(|v| self.graph.value(v).item())
    }
}

/// Record sampling, initialization, reconstruction and the loss terms for
/// one image with fixed per-block counts.
pub fn image_graph(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &Image,
    counts: &[usize],
    n0: usize,
    trainable: bool,
) -> Result<ImageGraph> {
    let b = cfg.block;
    let (h, w) = (image.height(), image.width());
    let grid = partition_blocks(image, b)?;
    if counts.len() != grid.len() {
        return dim_err(format!("{} counts for {} blocks", counts.len(), grid.len()));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, trainable);
    let phi = p.get("phi")?;
    let mut prefixes: BTreeMap<usize, Var> = BTreeMap::new();
    let mut ys = Vec::with_capacity(grid.len());
    for (blk, &m) in grid.blocks.iter().zip(counts) {
        let phi_m = match prefixes.get(&m) {
            Some(&v) => v,
            None => {
                let v = g.narrow_rows(phi, 0, m)?;
                prefixes.insert(m, v);
                v
            }
        };
        let xb = g.constant(Tensor::new(&[b * b, 1], vectorize_block(blk))?);
        let y = g.matmul(phi_m, xb)?;
        ys.push(g.reshape(y, &[m])?);
    }
    let mut meas = MeasurementVars::from_parts(b, grid.rows, grid.cols, counts.to_vec(), phi, ys.clone())?;
    let psi = p.get("psi")?;
    let x0hat = initialize_image_graph(&mut g, psi, &meas, |_| n0)?;
    let x0 = initialize_image_graph(&mut g, psi, &meas, |i| counts[i])?;
    let xhat = uformer_forward(&mut g, cfg, &p, &mut meas, x0)?;

    let target = g.constant(image.to_tensor());
    let d1 = g.sub(xhat, target)?;
    let l1 = g.sum_squares(d1)?;
    let d3 = g.sub(x0hat, target)?;
    let l3 = g.sum_squares(d3)?;

    let blocks = g.gather(xhat, blocks_index(1, h, w, b)?, &[grid.len(), b * b])?;
    let mut l2 = None;
    for (i, &m) in counts.iter().enumerate() {
        let xb = g.narrow_rows(blocks, i, 1)?;
        let phi_m = meas.prefix(&mut g, m)?;
        let re = g.matmul_t(phi_m, xb, false, true)?;
        let re = g.reshape(re, &[m])?;
        let d = g.sub(ys[i], re)?;
        let s = g.sum_squares(d)?;
        l2 = Some(match l2 {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let l2 = l2.expect("image has at least one block");
    Ok(ImageGraph { graph: g, params: p, sums: [l1, l2, l3], xhat })
}

/// `(l1 + λ1·l2 + λ2·l3) / (2N)` on the graph.
fn weighted(g: &mut Graph, sums: [Var; 3], w: &LossWeights, n: usize) -> Result<Var> {
    let a = g.scale(sums[1], w.lambda1);
    let b = g.scale(sums[2], w.lambda2);
    let t = g.add(sums[0], a)?;
    let t = g.add(t, b)?;
    Ok(g.scale(t, 1.0 / (2.0 * n as f64)))
}

/// Total-loss gradients of one image (batch size `n`) and its loss sums.
fn image_gradients(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &Image,
    counts: &[usize],
    n0: usize,
    w: &LossWeights,
    n: usize,
) -> Result<(BTreeMap<String, Vec<f64>>, [f64; 3])> {
    let mut ig = image_graph(cfg, store, image, counts, n0, true)?;
    let loss = weighted(&mut ig.graph, ig.sums, w, n)?;
    ig.graph.backward(loss)?;
    let grads = ig
        .params
        .iter()
        .map(|(k, v)| (k.to_string(), ig.graph.grad(v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    Ok((grads, ig.sums()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update of one slice at (1-based) step `t`.
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
    }
}

/// Moments for every named parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One Adam step over every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, state: &mut OptimizerState) -> Result<()> {
    state.step += 1;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if g.len() != p.numel() {
            return dim_err(format!("gradient of '{name}' has {} entries for {}", g.len(), p.numel()));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        adam_update(p.data_mut(), g, m, v, state.step, &state.cfg);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Images per step, taken cyclically from the dataset.
    pub batch: usize,
    pub sr: f64,
    pub estimator: Estimator,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings of the desk-scale run.
    pub fn toy() -> Self {
        Self {
            steps: 200,
            batch: 4,
            sr: 0.25,
            estimator: Estimator::Sm,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Loss terms of one optimizer step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<StepRecord>,
}

/// Loss of `store` on a batch, with one gradient per parameter summed over
/// images in batch order.
pub fn batch_gradients(
    cfg: &ModelConfig,
    store: &ParamStore,
    images: &[&Image],
    sr: f64,
    estimator: Estimator,
    w: &LossWeights,
    exec: Exec,
) -> Result<(BTreeMap<String, Vec<f64>>, LossParts)> {
    let mm = store.measurement_matrix()?;
    let n0 = SamplingConfig::new(cfg.block, sr, 0)?.n0();
    let n = images.len();
    let per = exec.try_map(n, |i| {
        let counts = plan_counts(images[i], &mm, sr, estimator)?;
        image_gradients(cfg, store, images[i], &counts, n0, w, n)
    })?;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut sums = [0.0; 3];
    for (g, s) in per {
        for (k, v) in g {
            match grads.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(k, v);
                }
            }
        }
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let d = 2.0 * n as f64;
    Ok((grads, LossParts { l1: sums[0] / d, l2: sums[1] / d, l3: sums[2] / d }))
}

/// Loss terms and reconstructions of `images` without gradients.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore,
    images: &[Image],
    sr: f64,
    estimator: Estimator,
    exec: Exec,
) -> Result<(LossParts, Vec<Image>)> {
    let mm = store.measurement_matrix()?;
    let n0 = SamplingConfig::new(cfg.block, sr, 0)?.n0();
    let per = exec.try_map(images.len(), |i| {
        let counts = plan_counts(&images[i], &mm, sr, estimator)?;
        let ig = image_graph(cfg, store, &images[i], &counts, n0, false)?;
        Ok::<_, crate::Error>((ig.sums(), Image::from_tensor(ig.graph.value(ig.xhat))?))
    })?;
    let d = 2.0 * images.len() as f64;
    let mut parts = LossParts::default();
    let mut recon = Vec::with_capacity(per.len());
    for (s, img) in per {
        parts.l1 += s[0] / d;
        parts.l2 += s[1] / d;
        parts.l3 += s[2] / d;
        recon.push(img);
    }
    Ok((parts, recon))
}

/// Adam on the total loss, starting from `init`. Step `k` uses images
/// `k·batch .. k·batch + batch` modulo the dataset size.
pub fn train(
    cfg: &ModelConfig,
    init: ParamStore,
    images: &[Image],
    tc: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    if images.is_empty() || tc.batch == 0 {
        return dim_err("training needs images and a positive batch size");
    }
    let mut params = init;
    let mut state = OptimizerState::new(tc.adam);
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<&Image> = (0..tc.batch).map(|j| &images[(step * tc.batch + j) % images.len()]).collect();
        let (grads, parts) = batch_gradients(cfg, &params, &batch, tc.sr, tc.estimator, &tc.weights, exec)?;
        let rec = StepRecord { step, parts, total: parts.total(&tc.weights) };
        on_step(&rec);
        trace.push(rec);
        adam_step(&mut params, &grads, &mut state)?;
    }
    Ok(TrainOutcome { params, trace })
}

/// [`train`] from weights initialized with `tc.seed`.
pub fn train_toy(cfg: &ModelConfig, images: &[Image], tc: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    let init = ParamStore::init(cfg, tc.seed)?;
    train(cfg, init, images, tc, exec, |_| {})
}

/// Compare the total-loss gradient with central differences on `coords`
/// sampled coordinates (a parameter uniformly, then an entry uniformly),
/// keeping the allocation fixed. Returns the worst
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn model_grad_check(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &Image,
    sr: f64,
    coords: usize,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    let w = LossWeights::default();
    let mm = store.measurement_matrix()?;
    let n0 = SamplingConfig::new(cfg.block, sr, 0)?.n0();
    let counts = plan_counts(image, &mm, sr, Estimator::Sm)?;
    let (grads, _) = image_gradients(cfg, store, image, &counts, n0, &w, 1)?;

    let names: Vec<&str> = store.names().collect();
    let mut r = rng::rng(seed);
    let picks: Vec<(String, usize)> = (0..coords)
        .map(|_| {
            let name = names[r.gen_range(0..names.len())];
            let idx = r.gen_range(0..store.get(name).map(Tensor::numel).unwrap_or(1));
            (name.to_string(), idx)
        })
        .collect();

    let loss_at = |s: &ParamStore| -> Result<f64> {
        let ig = image_graph(cfg, s, image, &counts, n0, false)?;
        let [a, b, c] = ig.sums();
        Ok(total_loss(a, b, c, &w) / 2.0)
    };
    let numeric = Exec::default().try_map(picks.len(), |k| {
        let (name, idx) = &picks[k];
        let mut s = store.clone();
        let orig = s.get(name)?.data()[*idx];
        s.get_mut(name)?.data_mut()[*idx] = orig + eps;
        let fp = loss_at(&s)?;
        s.get_mut(name)?.data_mut()[*idx] = orig - eps;
        let fm = loss_at(&s)?;
        Ok::<_, crate::Error>((fp - fm) / (2.0 * eps))
    })?;
    let mut worst: f64 = 0.0;
    for ((name, idx), fd) in picks.iter().zip(numeric) {
        let a = grads[name][*idx];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

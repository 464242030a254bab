//! The U-shaped reconstruction network: initialization from measurements,
//! convolutional head and tail, and four levels of projection-based
//! transformer blocks.

pub mod attention;
mod layers;
mod params;

pub use layers::{
    conv, downsample, feature_fusion, head_forward, projection_transformer_block, res_block, tail_forward,
    transformer_block, upsample,
};
pub use params::{param_specs, Init, ParamSpec, ParamStore, ParamVars};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::image::{assemble_vectors, Image};
use crate::projection::MeasurementVars;
use crate::sampling::{MeasurementMatrix, MeasurementSet};
use crate::tensor::index::{blocks_index, invert};
use crate::tensor::{Graph, Var};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels at the finest level; level `i` has `2^i · c0`.
    pub c0: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub windows: Vec<usize>,
    pub ffn_ratio: usize,
    /// Sampling block side; `Φ` is `B² × B²`.
    pub block: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c0: 32,
            depths: vec![4, 4, 6, 6],
            heads: vec![1, 2, 4, 8],
            windows: vec![8, 8, 4, 4],
            ffn_ratio: 4,
            block: 32,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale training and checks.
    pub fn toy() -> Self {
        Self {
            c0: 8,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 1, 2, 2],
            windows: vec![4, 4, 2, 2],
            ffn_ratio: 4,
            block: 32,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.c0 << level
    }

    /// Channels after pixel-shuffling level `level` back to full resolution.
    pub fn mcp_channels(&self, level: usize) -> usize {
        self.channels(level) >> (2 * level)
    }

    pub fn measurement_rows(&self) -> usize {
        self.block * self.block
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != LEVELS || self.heads.len() != LEVELS || self.windows.len() != LEVELS {
            return contract_err(format!("model config needs {LEVELS} entries per level list"));
        }
        if self.c0 < 2 || !self.c0.is_multiple_of(2) || self.ffn_ratio == 0 || self.block == 0 {
            return contract_err("c0 must be even and positive; ffn ratio and block positive");
        }
        for i in 0..LEVELS {
            let c = self.channels(i);
            if !self.depths[i].is_multiple_of(2) {
                return contract_err(format!("depth {} at level {i} is odd", self.depths[i]));
            }
            if !c.is_multiple_of(1 << (2 * i)) {
                return contract_err(format!("{c} channels at level {i} are not divisible by {}", 1 << (2 * i)));
            }
            if self.heads[i] == 0 || !c.is_multiple_of(self.heads[i]) {
                return contract_err(format!("{c} channels at level {i} cannot split into {} heads", self.heads[i]));
            }
            if self.windows[i] == 0 {
                return contract_err("window size must be positive");
            }
        }
        Ok(())
    }

    /// Check that an `h×w` input works at every level.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.block) || !w.is_multiple_of(self.block) {
            return dim_err(format!("{h}x{w} is not a multiple of the block size {}", self.block));
        }
        for i in 0..LEVELS {
            let (lh, lw) = (h >> i, w >> i);
            if (lh << i) != h || (lw << i) != w || lh % self.windows[i] != 0 || lw % self.windows[i] != 0 {
                return dim_err(format!(
                    "{h}x{w} input does not reach level {i} with window {}",
                    self.windows[i]
                ));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        param_specs(self).iter().map(|s| s.numel()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `X₀`: every block's measurements mapped back through `Ψ[:, :m_ij]` and
/// placed at the block's position.
pub fn initialize_image(ms: &MeasurementSet, mm: &MeasurementMatrix) -> Result<Image> {
    ms.validate()?;
    if mm.block_side() != ms.block {
        return dim_err(format!("mapper block {} vs measurements block {}", mm.block_side(), ms.block));
    }
    if let Some(&m) = ms.counts.iter().find(|&&m| m > mm.rows()) {
        return dim_err(format!("{m} measurements exceed {} mapper columns", mm.rows()));
    }
    let vecs: Vec<Vec<f64>> = ms.y.iter().map(|y| mm.map_back(y)).collect();
    assemble_vectors(&vecs, ms.rows, ms.cols, ms.block)
}

/// Graph form of [`initialize_image`] over `psi: [B², M]`, using the leading
/// `take(i)` measurements of block `i`. Returns `[1, H, W]`.
pub fn initialize_image_graph(
    g: &mut Graph,
    psi: Var,
    meas: &MeasurementVars,
    take: impl Fn(usize) -> usize,
) -> Result<Var> {
    let b2 = meas.block * meas.block;
    let nb = meas.rows * meas.cols;
    let mut cache: HashMap<usize, Var> = HashMap::new();
    let mut cols = Vec::with_capacity(nb);
    for i in 0..nb {
        let m = take(i);
        let psi_m = match cache.get(&m) {
            Some(&v) => v,
            None => {
                let v = g.narrow_cols(psi, m)?;
                cache.insert(m, v);
                v
            }
        };
        let y = if g.shape(meas.y[i])[0] == m {
            meas.y[i]
        } else {
            g.narrow_rows(meas.y[i], 0, m)?
        };
        let y = g.reshape(y, &[m, 1])?;
        let x = g.matmul(psi_m, y)?;
        cols.push(g.reshape(x, &[1, b2])?);
    }
    let stacked = g.concat(&cols)?;
    let (h, w) = meas.image_size();
    let inv = invert(&blocks_index(1, h, w, meas.block)?);
    g.gather(stacked, inv, &[1, h, w])
}

/// Head, encoder, decoder and tail on top of `x0: [1, H, W]`.
pub fn uformer_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &ParamVars,
    meas: &mut MeasurementVars,
    x0: Var,
) -> Result<Var> {
    let (h, w) = match *g.shape(x0) {
        [1, h, w] => (h, w),
        ref s => return dim_err(format!("initial image must be [1, H, W], got {s:?}")),
    };
    cfg.check_resolution(h, w)?;
    if meas.image_size() != (h, w) || meas.block != cfg.block {
        return dim_err("measurements do not match the initial image");
    }

    let mut x = head_forward(g, p, x0)?;
    let mut skips = Vec::with_capacity(LEVELS);
    for i in 0..LEVELS {
        x = projection_transformer_block(g, p, cfg, "enc", i, x, meas)?;
        if i + 1 < LEVELS {
            skips.push(x);
            x = downsample(g, p, i, x)?;
        }
    }
    x = projection_transformer_block(g, p, cfg, "dec", LEVELS - 1, x, meas)?;
    for i in (0..LEVELS - 1).rev() {
        let up = upsample(g, p, i, x)?;
        let fused = feature_fusion(g, p, i, up, skips[i])?;
        x = projection_transformer_block(g, p, cfg, "dec", i, fused, meas)?;
    }
    tail_forward(g, p, x, x0)
}

/// A configuration with its weights, for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn measurement_matrix(&self) -> Result<MeasurementMatrix> {
        self.params.measurement_matrix()
    }

    /// Reconstruct an image from its measurements with fixed weights.
    pub fn reconstruct(&self, ms: &MeasurementSet) -> Result<Image> {
        ms.validate()?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut meas = MeasurementVars::with_phi(&mut g, ms, p.get("phi")?)?;
        let counts = meas.counts.clone();
        let x0 = initialize_image_graph(&mut g, p.get("psi")?, &meas, |i| counts[i])?;
        let out = uformer_forward(&mut g, &self.cfg, &p, &mut meas, x0)?;
        Image::from_tensor(g.value(out))
    }

    pub fn save(&self, weights: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<()> {
        self.params.save(weights)?;
        self.cfg.save(config)
    }

    pub fn load(weights: impl AsRef<Path>, config: impl AsRef<Path>) -> Result<Self> {
        let cfg = ModelConfig::load(config)?;
        let params = ParamStore::load(&cfg, weights)?;
        Ok(Self { cfg, params })
    }
}

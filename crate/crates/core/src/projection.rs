//! Measurement-consistency projections: the single-block step and its
//! multi-channel feature-domain version (MCP).

use std::collections::HashMap;

use crate::error::{contract_err, dim_err, Result};
use crate::sampling::{MeasurementMatrix, MeasurementSet};
use crate::tensor::index::{blocks_index, invert};
use crate::tensor::{Graph, Tensor, Var};

/// Learnable per-channel steps of one MCP module.
#[derive(Clone, Debug, PartialEq)]
pub struct McpParams {
    pub alpha: Vec<f64>,
    pub level: usize,
}

impl McpParams {
    /// `channels` is C', the channel count after pixel shuffling.
    pub fn new(channels: usize, level: usize) -> Self {
        Self { alpha: vec![0.0; channels], level }
    }

    pub fn upscale(&self) -> usize {
        1 << self.level
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(&self.alpha)
    }

    pub fn num_params(&self) -> usize {
        self.alpha.len()
    }
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    match alpha.iter().find(|&&a| !(a > -1.0)) {
        Some(a) => contract_err(format!("projection step {a} must exceed -1")),
        None => Ok(()),
    }
}

/// `x + Φₖᵀ(y − Φₖx)/(1+α)` with `Φₖ` the `k×B²` row slab.
pub fn project_block(x: &[f64], y: &[f64], phi_rows: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 || phi_rows.len() != y.len() * n {
        return dim_err(format!(
            "projection: {} matrix entries for {} measurements of a {n}-vector",
            phi_rows.len(),
            y.len()
        ));
    }
    check_alpha(&[alpha])?;
    let denom = 1.0 + alpha;
    let mut out = x.to_vec();
    for (row, &yk) in phi_rows.chunks_exact(n).zip(y) {
        let r = (yk - row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()) / denom;
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * r;
        }
    }
    Ok(out)
}

/// Measurements of one image living in a graph: the shared `Φ` node, one
/// measurement vector per block, and a cache of `Φ[:m]` slices.
pub struct MeasurementVars {
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<usize>,
    pub phi: Var,
    pub y: Vec<Var>,
    prefixes: HashMap<usize, Var>,
}

impl MeasurementVars {
    pub fn from_parts(
        block: usize,
        rows: usize,
        cols: usize,
        counts: Vec<usize>,
        phi: Var,
        y: Vec<Var>,
    ) -> Result<Self> {
        if counts.len() != rows * cols || y.len() != counts.len() {
            return dim_err("measurement vars disagree with their grid");
        }
        Ok(Self { block, rows, cols, counts, phi, y, prefixes: HashMap::new() })
    }

    /// Load a measurement set with `Φ` as a constant node.
    pub fn constant(g: &mut Graph, ms: &MeasurementSet, mm: &MeasurementMatrix) -> Result<Self> {
        let phi = g.constant(mm.phi.clone());
        Self::with_phi(g, ms, phi)
    }

    /// Load a measurement set against an existing `Φ` node.
    pub fn with_phi(g: &mut Graph, ms: &MeasurementSet, phi: Var) -> Result<Self> {
        ms.validate()?;
        let y = ms
            .y
            .iter()
            .map(|v| Ok(g.constant(Tensor::new(&[v.len()], v.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(ms.block, ms.rows, ms.cols, ms.counts.clone(), phi, y)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.rows * self.block, self.cols * self.block)
    }

    /// `Φ[:m]`, built once per graph.
    pub fn prefix(&mut self, g: &mut Graph, m: usize) -> Result<Var> {
        if let Some(&v) = self.prefixes.get(&m) {
            return Ok(v);
        }
        let v = g.narrow_rows(self.phi, 0, m)?;
        self.prefixes.insert(m, v);
        Ok(v)
    }
}

/// MCP: pixel-shuffle `f` to full resolution, project every `B×B` block of
/// every channel onto its measurements with step `α_c`, shuffle back.
/// `alpha` has shape `[C']`.
pub fn mcp_forward(g: &mut Graph, f: Var, meas: &mut MeasurementVars, alpha: Var, level: usize) -> Result<Var> {
    let (c, h, w) = match *g.shape(f) {
        [c, h, w] => (c, h, w),
        ref s => return dim_err(format!("mcp: expected [C,H,W], got {s:?}")),
    };
    let r = 1usize << level;
    let (ih, iw) = meas.image_size();
    if h * r != ih || w * r != iw {
        return dim_err(format!("mcp: {h}x{w} features at level {level} do not match a {ih}x{iw} image"));
    }
    if c % (r * r) != 0 {
        return dim_err(format!("mcp: {c} channels not divisible by {}", r * r));
    }
    let cp = c / (r * r);
    if g.shape(alpha) != [cp] {
        return dim_err(format!("mcp: step vector {:?} for {cp} channels", g.shape(alpha)));
    }
    check_alpha(g.data(alpha))?;
    let b = meas.block;
    let b2 = b * b;
    let nb = meas.rows * meas.cols;

    let full = g.pixel_shuffle(f, r)?;
    let idx = blocks_index(cp, ih, iw, b)?;
    let inv = invert(&idx);
    let blocks = g.gather(full, idx, &[nb, cp, b2])?;
    let one_plus = g.add_scalar(alpha, 1.0);
    let step = g.recip(one_plus);

    let mut out = Vec::with_capacity(nb);
    for i in 0..nb {
        let xb = g.narrow_rows(blocks, i, 1)?;
        let xb = g.reshape(xb, &[cp, b2])?;
        let phi_m = meas.prefix(g, meas.counts[i])?;
        let px = g.matmul_t(xb, phi_m, false, true)?;
        let neg = g.scale(px, -1.0);
        let resid = g.add_broadcast(neg, meas.y[i])?;
        let upd = g.matmul(resid, phi_m)?;
        let upd = g.scale_rows(upd, step)?;
        out.push(g.add(xb, upd)?);
    }
    let stacked = g.concat(&out)?;
    let image = g.gather(stacked, inv, &[cp, ih, iw])?;
    g.pixel_unshuffle(image, r)
}

/// MCP on plain tensors with fixed `Φ` and steps.
pub fn mcp_apply(f: &Tensor, ms: &MeasurementSet, mm: &MeasurementMatrix, p: &McpParams) -> Result<Tensor> {
    p.validate()?;
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let av = g.constant(Tensor::new(&[p.alpha.len()], p.alpha.clone())?);
    let mut meas = MeasurementVars::constant(&mut g, ms, mm)?;
    let out = mcp_forward(&mut g, fv, &mut meas, av, p.level)?;
    Ok(g.value(out).clone())
}

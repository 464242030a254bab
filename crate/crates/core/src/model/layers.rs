//! Building blocks of the network, all expressed on a [`Graph`].

use super::attention::{window_attention, AttentionVars, WindowGeometry};
use super::{ModelConfig, ParamVars};
use crate::error::{dim_err, Result};
use crate::projection::{mcp_forward, MeasurementVars};
use crate::tensor::{Graph, Var};

/// Convolution with `{prefix}.w` and `{prefix}.b`.
pub fn conv(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    g.conv2d(x, w, b)
}

/// `x + conv2(gelu(conv1(x)))`.
pub fn res_block(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{prefix}.conv1"), x)?;
    let h = g.gelu(h);
    let h = conv(g, p, &format!("{prefix}.conv2"), h)?;
    g.add(x, h)
}

/// Shallow features: two convolutions with GELU, then a residual block.
pub fn head_forward(g: &mut Graph, p: &ParamVars, x0: Var) -> Result<Var> {
    let h = conv(g, p, "head.conv1", x0)?;
    let h = g.gelu(h);
    let h = conv(g, p, "head.conv2", h)?;
    let h = g.gelu(h);
    res_block(g, p, "head.res", h)
}

/// Residual block, two convolutions down to one channel, plus `x0`.
pub fn tail_forward(g: &mut Graph, p: &ParamVars, xu: Var, x0: Var) -> Result<Var> {
    let h = res_block(g, p, "tail.res", xu)?;
    let h = conv(g, p, "tail.conv1", h)?;
    let h = g.gelu(h);
    let h = conv(g, p, "tail.conv2", h)?;
    g.add(h, x0)
}

/// `[C, H, W] -> [2C, H/2, W/2]`: halve channels, then unshuffle by 2.
pub fn downsample(g: &mut Graph, p: &ParamVars, level: usize, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || !s[0].is_multiple_of(2) {
        return dim_err(format!("downsample needs even channels and resolution, got {s:?}"));
    }
    let h = conv(g, p, &format!("down{level}"), x)?;
    g.pixel_unshuffle(h, 2)
}

/// `[C, H, W] -> [C/2, 2H, 2W]`: double channels, then shuffle by 2.
pub fn upsample(g: &mut Graph, p: &ParamVars, level: usize, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[0].is_multiple_of(2) {
        return dim_err(format!("upsample needs an even channel count, got {s:?}"));
    }
    let h = conv(g, p, &format!("up{level}"), x)?;
    g.pixel_shuffle(h, 2)
}

/// Concatenate decoder and skip features, project back with a 1×1
/// convolution and refine with a residual block.
pub fn feature_fusion(g: &mut Graph, p: &ParamVars, level: usize, dec: Var, enc: Var) -> Result<Var> {
    if g.shape(dec) != g.shape(enc) {
        return dim_err(format!("fusion: decoder {:?} vs skip {:?}", g.shape(dec), g.shape(enc)));
    }
    let cat = g.concat(&[dec, enc])?;
    let h = conv(g, p, &format!("fuse{level}.proj"), cat)?;
    res_block(g, p, &format!("fuse{level}.res"), h)
}

/// `z + Attn(LN z)`, then `+ FFN(LN ·)` on tokens `[T, d]`.
pub fn transformer_block(g: &mut Graph, p: &ParamVars, prefix: &str, z: Var, geo: &WindowGeometry) -> Result<Var> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}"));
    let a = g.layer_norm(z, get("ln1.g")?, get("ln1.b")?)?;
    let attn = AttentionVars {
        wq: get("attn.wq")?,
        wk: get("attn.wk")?,
        wv: get("attn.wv")?,
        bias_table: get("attn.bias")?,
    };
    let a = window_attention(g, a, &attn, geo)?;
    let z = g.add(z, a)?;
    let f = g.layer_norm(z, get("ln2.g")?, get("ln2.b")?)?;
    let f = g.matmul(f, get("ffn.w1")?)?;
    let f = g.add_broadcast(f, get("ffn.b1")?)?;
    let f = g.gelu(f);
    let f = g.matmul(f, get("ffn.w2")?)?;
    let f = g.add_broadcast(f, get("ffn.b2")?)?;
    g.add(z, f)
}

/// Alternating plain/shifted transformer blocks, a final layer norm and the
/// multi-channel projection of this level.
pub fn projection_transformer_block(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    stage: &str,
    level: usize,
    f: Var,
    meas: &mut MeasurementVars,
) -> Result<Var> {
    let (c, h, w) = match *g.shape(f) {
        [c, h, w] => (c, h, w),
        ref s => return dim_err(format!("transformer stage expects [C,H,W], got {s:?}")),
    };
    let mut z = g.chw_to_tokens(f)?;
    for k in 0..cfg.depths[level] {
        let geo = WindowGeometry::new(h, w, c, cfg.heads[level], cfg.windows[level], k % 2 == 1)?;
        z = transformer_block(g, p, &format!("{stage}{level}.blk{k}"), z, &geo)?;
    }
    let z = g.layer_norm(z, p.get(&format!("{stage}{level}.norm.g"))?, p.get(&format!("{stage}{level}.norm.b"))?)?;
    let x = g.tokens_to_chw(z, h, w)?;
    let alpha = p.get(&format!("{stage}{level}.mcp.alpha"))?;
    mcp_forward(g, x, meas, alpha, level)
}

//! Central-difference gradient checks over every differentiable operation,
//! each network component, and sampled coordinates of the whole model.

use std::sync::Arc;

use crate::error::Result;
use crate::image::Image;
use crate::model::attention::{bias_table_len, window_attention, AttentionVars, WindowGeometry};
use crate::model::{
    downsample, feature_fusion, head_forward, initialize_image_graph, tail_forward, transformer_block, upsample,
    ModelConfig, ParamStore, ParamVars,
};
use crate::projection::{mcp_forward, MeasurementVars};
use crate::rng;
use crate::sampling::{adaptive_sample, init_measurement_matrix, initial_sample, MatrixInit, SamplingConfig};
use crate::tensor::gradcheck::{grad_check_many, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::model_grad_check;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    /// Side of the square image used for the toy-config check.
    pub image_size: usize,
    /// Sampled coordinates for the toy-config check.
    pub coords: usize,
    pub sr: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { image_size: 64, coords: 100, sr: 0.25, seed: 0 }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normal_vec(&mut rng::rng(seed), n, 1.0)).expect("shape matches data")
}

/// Weighted sum with fixed weights so every output entry reaches the check.
fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(&shape, (0..n).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect())?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn case<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let error = grad_check_many(
        |g, v| {
            let out = f(g, v)?;
            probe(g, out)
        },
        inputs,
        DEFAULT_EPS,
    )?;
    Ok(GradCase { name: name.to_string(), error, tolerance: OP_TOLERANCE })
}

/// One case per primitive graph operation.
pub fn op_cases() -> Result<Vec<GradCase>> {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2);
    let pos = Tensor::new(&[6], vec![0.5, 1.2, 2.0, 0.8, 3.1, 1.7])?;
    let mut out = vec![
        case("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?,
        case("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?,
        case("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))?,
        case("scale", std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -1.7)))?,
        case("add_scalar", std::slice::from_ref(&a), |g, v| Ok(g.add_scalar(v[0], 0.4)))?,
        case("recip", std::slice::from_ref(&pos), |g, v| Ok(g.recip(v[0])))?,
        case("gelu", std::slice::from_ref(&a), |g, v| Ok(g.gelu(v[0])))?,
        case("elementwise", std::slice::from_ref(&a), |g, v| Ok(g.elementwise(v[0], f64::tanh, |x| 1.0 - x.tanh().powi(2))))?,
        case("sum", std::slice::from_ref(&a), |g, v| Ok(g.sum(v[0])))?,
        case("sum_squares", std::slice::from_ref(&a), |g, v| g.sum_squares(v[0]))?,
        case("add_broadcast", &[rand(&[2, 3, 4], 3), b.clone()], |g, v| g.add_broadcast(v[0], v[1]))?,
        case("scale_rows", &[rand(&[3, 2, 2], 4), rand(&[3], 5)], |g, v| g.scale_rows(v[0], v[1]))?,
        case("matmul", &[rand(&[4, 5], 6), rand(&[5, 3], 7)], |g, v| g.matmul(v[0], v[1]))?,
        case("matmul_batched", &[rand(&[2, 3, 4], 8), rand(&[2, 4, 5], 9)], |g, v| g.matmul(v[0], v[1]))?,
    ];
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let x = if ta { rand(&[5, 4], 10) } else { rand(&[4, 5], 10) };
        let y = if tb { rand(&[3, 5], 11) } else { rand(&[5, 3], 11) };
        out.push(case(&format!("matmul_t({ta},{tb})"), &[x, y], move |g, v| g.matmul_t(v[0], v[1], ta, tb))?);
    }
    let img = rand(&[2, 6, 6], 12);
    out.push(case("conv2d_3x3", &[img.clone(), rand(&[3, 2, 3, 3], 13), rand(&[3], 14)], |g, v| {
        g.conv2d(v[0], v[1], v[2])
    })?);
    out.push(case("conv2d_1x1", &[img.clone(), rand(&[3, 2, 1, 1], 15), rand(&[3], 16)], |g, v| {
        g.conv2d(v[0], v[1], v[2])
    })?);
    out.push(case("layer_norm", &[rand(&[4, 6], 17), rand(&[6], 18), rand(&[6], 19)], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    })?);
    out.push(case("softmax", &[rand(&[3, 5], 20)], |g, v| g.softmax(v[0]))?);
    let index: Arc<[usize]> = vec![3, 0, 0, 7, 11, 5].into();
    out.push(case("gather", std::slice::from_ref(&a), move |g, v| g.gather(v[0], index.clone(), &[2, 3]))?);
    out.push(case("reshape", std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[2, 6]))?);
    out.push(case("concat", &[a.clone(), rand(&[2, 4], 21)], |g, v| g.concat(&[v[0], v[1], v[0]]))?);
    out.push(case("narrow_rows", &[rand(&[5, 3], 22)], |g, v| g.narrow_rows(v[0], 1, 3))?);
    out.push(case("narrow_cols", &[rand(&[5, 3], 23)], |g, v| g.narrow_cols(v[0], 2))?);
    out.push(case("pixel_shuffle", &[rand(&[8, 2, 2], 24)], |g, v| g.pixel_shuffle(v[0], 2))?);
    out.push(case("pixel_unshuffle", &[rand(&[2, 4, 4], 25)], |g, v| g.pixel_unshuffle(v[0], 2))?);
    out.push(case("chw_to_tokens", &[rand(&[3, 2, 4], 26)], |g, v| g.chw_to_tokens(v[0]))?);
    out.push(case("tokens_to_chw", &[rand(&[8, 3], 27)], |g, v| g.tokens_to_chw(v[0], 2, 4))?);
    Ok(out)
}

/// Eight-channel network on 4×4 blocks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig { c0: 8, depths: vec![2, 2, 2, 2], heads: vec![1, 2, 1, 1], windows: vec![2, 2, 1, 1], ffn_ratio: 2, block: 4 }
}

fn layer_case<F>(name: &str, store: &ParamStore, names: &[&str], extra: &[Tensor], f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph, &ParamVars, &[Var]) -> Result<Var>,
{
    let mut inputs = Vec::with_capacity(names.len() + extra.len());
    for n in names {
        inputs.push(store.get(n)?.clone());
    }
    inputs.extend(extra.iter().cloned());
    case(name, &inputs, |g, v| {
        let mut p = store.bind(g, false);
        for (i, n) in names.iter().enumerate() {
            p.replace(n, v[i]);
        }
        f(g, &p, &v[names.len()..])
    })
}

/// Attention, projection, initialization and every network stage on the
/// tiny configuration.
pub fn component_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for shifted in [false, true] {
        let (d, heads, window) = (4, 2, 2);
        let geo = WindowGeometry::new(4, 4, d, heads, window, shifted)?;
        let inputs = [
            rand(&[16, d], seed + 1),
            rand(&[d, d], seed + 2),
            rand(&[d, d], seed + 3),
            rand(&[d, d], seed + 4),
            rand(&[bias_table_len(window, heads)], seed + 5),
        ];
        let name = if shifted { "window_attention_shifted" } else { "window_attention" };
        out.push(case(name, &inputs, |g, v| {
            let p = AttentionVars { wq: v[1], wk: v[2], wv: v[3], bias_table: v[4] };
            window_attention(g, v[0], &p, &geo)
        })?);
    }

    let cfg = tiny_config();
    let scfg = SamplingConfig::new(4, 0.5, seed)?;
    let mm = init_measurement_matrix(&scfg, MatrixInit::OrthonormalRows)?;
    let img = Image::new(8, 8, rng::uniform_vec(&mut rng::rng(seed + 6), 64, 0.0, 1.0))?;
    let init = initial_sample(&img, &mm, &scfg)?;
    let ms = adaptive_sample(&img, &mm, &scfg, &[8, 11, 14, 16], &init)?;

    out.push(case("mcp_forward", &[rand(&[8, 4, 4], seed + 7), Tensor::new(&[2], vec![0.3, 0.8])?, mm.phi.clone()], |g, v| {
        let mut meas = MeasurementVars::with_phi(g, &ms, v[2])?;
        mcp_forward(g, v[0], &mut meas, v[1], 1)
    })?);
    let n0 = scfg.n0();
    out.push(case("initialize_image", &[mm.phi.clone(), mm.psi.clone()], |g, v| {
        let meas = MeasurementVars::with_phi(g, &ms, v[0])?;
        initialize_image_graph(g, v[1], &meas, |_| n0)
    })?);

    let store = ParamStore::init(&cfg, seed + 8)?;
    let x0 = rand(&[1, 8, 8], seed + 9);
    let feat = rand(&[8, 8, 8], seed + 10);
    let head = ["head.conv1.w", "head.conv1.b", "head.conv2.w", "head.conv2.b", "head.res.conv1.w", "head.res.conv2.w"];
    out.push(layer_case("head", &store, &head, std::slice::from_ref(&x0), |g, p, v| head_forward(g, p, v[0]))?);
    let tail = ["tail.res.conv1.w", "tail.conv1.w", "tail.conv1.b", "tail.conv2.w", "tail.conv2.b"];
    out.push(layer_case("tail", &store, &tail, &[feat.clone(), x0], |g, p, v| tail_forward(g, p, v[0], v[1]))?);
    out.push(layer_case("downsample", &store, &["down0.w", "down0.b"], std::slice::from_ref(&feat), |g, p, v| {
        downsample(g, p, 0, v[0])
    })?);
    out.push(layer_case("upsample", &store, &["up0.w", "up0.b"], &[rand(&[16, 4, 4], seed + 11)], |g, p, v| {
        upsample(g, p, 0, v[0])
    })?);
    let fuse = ["fuse0.proj.w", "fuse0.proj.b", "fuse0.res.conv1.w", "fuse0.res.conv2.w"];
    out.push(layer_case("feature_fusion", &store, &fuse, &[feat.clone(), rand(&[8, 8, 8], seed + 12)], |g, p, v| {
        feature_fusion(g, p, 0, v[0], v[1])
    })?);
    let blk = [
        "enc1.blk1.ln1.g",
        "enc1.blk1.ln1.b",
        "enc1.blk1.attn.wq",
        "enc1.blk1.attn.wk",
        "enc1.blk1.attn.wv",
        "enc1.blk1.attn.bias",
        "enc1.blk1.ln2.g",
        "enc1.blk1.ffn.w1",
        "enc1.blk1.ffn.b1",
        "enc1.blk1.ffn.w2",
        "enc1.blk1.ffn.b2",
    ];
    let geo = WindowGeometry::new(4, 4, 16, 2, 2, true)?;
    out.push(layer_case("transformer_block", &store, &blk, &[rand(&[16, 16], seed + 13)], |g, p, v| {
        transformer_block(g, p, "enc1.blk1", v[0], &geo)
    })?);

    let error = model_grad_check(&cfg, &store, &img, 0.5, 60, seed + 14, DEFAULT_EPS)?;
    out.push(GradCase { name: "uformer_tiny".into(), error, tolerance: OP_TOLERANCE });
    Ok(out)
}

/// Sampled coordinates of the toy-configuration loss gradient.
pub fn toy_model_case(opts: &SuiteOptions) -> Result<GradCase> {
    let cfg = ModelConfig::toy();
    let store = ParamStore::init(&cfg, opts.seed)?;
    let img = crate::synthetic::scene(opts.image_size, opts.image_size, opts.seed.wrapping_add(1));
    let error = model_grad_check(&cfg, &store, &img, opts.sr, opts.coords, opts.seed.wrapping_add(2), DEFAULT_EPS)?;
    Ok(GradCase { name: "uformer_toy".into(), error, tolerance: END_TO_END_TOLERANCE })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradCase>> {
    let mut out = op_cases()?;
    out.extend(component_cases(opts.seed)?);
    out.push(toy_model_case(opts)?);
    Ok(out)
}

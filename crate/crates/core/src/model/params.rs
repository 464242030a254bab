//! Named parameter tensors: layout, initialization, persistence and binding
//! into a graph.

use std::collections::BTreeMap;
use std::path::Path;

use super::attention::bias_table_len;
use super::{ModelConfig, LEVELS};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng;
use crate::sampling::{init_measurement_matrix, transpose, MatrixInit, MeasurementMatrix, SamplingConfig};
use crate::tensor::{archive, Graph, Tensor, Var};

pub const LINEAR_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `1/√fan_in`.
    FanIn(usize),
    /// Orthonormal rows.
    Sampler,
    /// Transpose of the sampler.
    Mapper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec::new(format!("{prefix}.w"), &[cout, cin, k, k], Init::FanIn(cin * k * k)));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros));
}

fn res_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    conv_specs(out, &format!("{prefix}.conv1"), c, c, 3);
    conv_specs(out, &format!("{prefix}.conv2"), c, c, 3);
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.g"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[d], Init::Zeros));
}

fn ptb_specs(out: &mut Vec<ParamSpec>, cfg: &ModelConfig, stage: &str, level: usize) {
    let d = cfg.channels(level);
    let hidden = d * cfg.ffn_ratio;
    let lin = Init::Normal(LINEAR_STD);
    for k in 0..cfg.depths[level] {
        let p = format!("{stage}{level}.blk{k}");
        ln_specs(out, &format!("{p}.ln1"), d);
        for m in ["wq", "wk", "wv"] {
            out.push(ParamSpec::new(format!("{p}.attn.{m}"), &[d, d], lin));
        }
        out.push(ParamSpec::new(
            format!("{p}.attn.bias"),
            &[bias_table_len(cfg.windows[level], cfg.heads[level])],
            lin,
        ));
        ln_specs(out, &format!("{p}.ln2"), d);
        out.push(ParamSpec::new(format!("{p}.ffn.w1"), &[d, hidden], lin));
        out.push(ParamSpec::new(format!("{p}.ffn.b1"), &[hidden], Init::Zeros));
        out.push(ParamSpec::new(format!("{p}.ffn.w2"), &[hidden, d], lin));
        out.push(ParamSpec::new(format!("{p}.ffn.b2"), &[d], Init::Zeros));
    }
    ln_specs(out, &format!("{stage}{level}.norm"), d);
    out.push(ParamSpec::new(format!("{stage}{level}.mcp.alpha"), &[cfg.mcp_channels(level)], Init::Zeros));
}

/// Every parameter of the network in initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let m = cfg.measurement_rows();
    let n = cfg.block * cfg.block;
    out.push(ParamSpec::new("phi", &[m, n], Init::Sampler));
    out.push(ParamSpec::new("psi", &[n, m], Init::Mapper));

    let c0 = cfg.c0;
    conv_specs(&mut out, "head.conv1", 1, c0 / 2, 3);
    conv_specs(&mut out, "head.conv2", c0 / 2, c0, 3);
    res_specs(&mut out, "head.res", c0);
    for i in 0..LEVELS {
        ptb_specs(&mut out, cfg, "enc", i);
        if i + 1 < LEVELS {
            let c = cfg.channels(i);
            conv_specs(&mut out, &format!("down{i}"), c, c / 2, 3);
        }
    }
    ptb_specs(&mut out, cfg, "dec", LEVELS - 1);
    for i in (0..LEVELS - 1).rev() {
        let (c, cn) = (cfg.channels(i), cfg.channels(i + 1));
        conv_specs(&mut out, &format!("up{i}"), cn, 2 * cn, 3);
        conv_specs(&mut out, &format!("fuse{i}.proj"), 2 * c, c, 1);
        res_specs(&mut out, &format!("fuse{i}.res"), c);
        ptb_specs(&mut out, cfg, "dec", i);
    }
    res_specs(&mut out, "tail.res", c0);
    conv_specs(&mut out, "tail.conv1", c0, c0 / 2, 3);
    conv_specs(&mut out, "tail.conv2", c0 / 2, 1, 3);
    out
}

/// The network's tensors keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::rng(seed);
        let sampler_cfg = SamplingConfig {
            block: cfg.block,
            sr_target: 1.0,
            max_measurements: cfg.measurement_rows(),
            seed: seed.wrapping_add(1),
        };
        let mm = init_measurement_matrix(&sampler_cfg, MatrixInit::OrthonormalRows)?;
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => rng::normal_vec(&mut r, n, std),
                Init::FanIn(fan) => rng::normal_vec(&mut r, n, 1.0 / (fan as f64).sqrt()),
                Init::Sampler => mm.phi.data().to_vec(),
                Init::Mapper => mm.psi.data().to_vec(),
            };
            tensors.insert(spec.name, Tensor::new(&spec.shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Adopt a tensor map after checking names and shapes against `cfg`.
    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return contract_err(format!(
                "weights hold {} tensors, the configuration needs {}",
                tensors.len(),
                specs.len()
            ));
        }
        for s in &specs {
            match tensors.get(&s.name) {
                None => return contract_err(format!("weights lack tensor '{}'", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return dim_err(format!("tensor '{}' has shape {:?}, expected {:?}", s.name, t.shape(), s.shape))
                }
                Some(_) => {}
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn measurement_matrix(&self) -> Result<MeasurementMatrix> {
        MeasurementMatrix::from_parts(self.get("phi")?.clone(), self.get("psi")?.clone())
    }

    /// Replace `Φ` and set `Ψ = Φᵀ`.
    pub fn set_sampler(&mut self, phi: Tensor) -> Result<()> {
        if phi.shape() != self.get("phi")?.shape() {
            return dim_err(format!("sampler {:?} does not match {:?}", phi.shape(), self.get("phi")?.shape()));
        }
        let psi = transpose(&phi);
        self.tensors.insert("psi".into(), psi);
        self.tensors.insert("phi".into(), phi);
        Ok(())
    }

    /// Load every tensor into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        archive::save(path, &self.tensors)
    }

    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_map(cfg, archive::load(path)?)
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))
    }

    /// Point `name` at another node, e.g. a perturbed copy.
    pub fn replace(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

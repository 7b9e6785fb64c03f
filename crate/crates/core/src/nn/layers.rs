//! Parameterized layers over a named [`ParamStore`].
//!
//! Layers only hold names and shapes; the tensors live in the store so a
//! network can be serialized, updated by the optimizer and shared read-only
//! across forwards. Each forward pass runs inside a [`Ctx`] that owns the
//! tape and maps parameter names to leaves.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::Conv3dSpec;
use super::norm::{BatchStats, NormSpec};
use crate::autodiff::{GradMap, Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::ScanMode;
use crate::tensor::{numel, Tensor};

/// Initialization rule for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// N(0, 2/fan_in)
    HeNormal { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
    Values(Vec<f64>),
    /// Per-entry `softplus⁻¹(exp(U(ln lo, ln hi)))`.
    InverseSoftplusLogUniform { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn materialize(&self, rng: &mut impl Rng) -> Result<Tensor> {
        Ok(match &self.init {
            Init::HeNormal { fan_in } => Tensor::randn(&self.shape, (2.0 / *fan_in as f64).sqrt(), rng),
            Init::Normal { std } => Tensor::randn(&self.shape, *std, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Values(v) => Tensor::new(&self.shape, v.clone())?,
            Init::InverseSoftplusLogUniform { lo, hi } => {
                let (a, b) = (lo.ln(), hi.ln());
                Tensor::from_fn(&self.shape, |_| {
                    let dt: f64 = rng.gen_range(a..b).exp();
                    // softplus⁻¹(dt) = ln(exp(dt) − 1)
                    dt.exp_m1().ln()
                })
            }
        })
    }
}

/// Named parameter tensors plus non-learnable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes every declaration in order from one RNG stream.
    pub fn from_decls(decls: &[ParamDecl], rng: &mut impl Rng) -> Result<Self> {
        let mut store = Self::new();
        for d in decls {
            store.insert(&d.name, d.materialize(rng)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.insert(name.to_string(), value).is_some() {
            return Err(Error::contract(format!("parameter `{name}` declared twice")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Replaces an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}`: {:?} cannot replace {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub layer: String,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// State of one forward pass.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    pub mode: Mode,
    trainable: bool,
    leaves: HashMap<String, Var>,
    bn_updates: Vec<BnUpdate>,
    /// Residual sub-network evaluations; lets tests observe reuse.
    pub res_evals: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::with_scan_mode(store, mode, ScanMode::default())
    }

    pub fn with_scan_mode(store: &'a ParamStore, mode: Mode, scan_mode: ScanMode) -> Self {
        Self {
            tape: Tape::with_scan_mode(scan_mode),
            store,
            mode,
            trainable: true,
            leaves: HashMap::new(),
            bn_updates: Vec::new(),
            res_evals: 0,
        }
    }

    /// Parameters enter the tape as constants; no gradients are produced.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.tape.var(name, value)?
        } else {
            self.tape.constant(value)
        };
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn finish(self, loss: Var) -> Result<(GradMap, Vec<BnUpdate>)> {
        let grads = self.tape.backward(loss)?;
        Ok((grads, self.bn_updates))
    }

    pub fn into_parts(self) -> (Tape, Vec<BnUpdate>) {
        (self.tape, self.bn_updates)
    }
}

/// Applies `running = (1 − m)·running + m·batch` for every update.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let mean_key = format!("{}.running_mean", u.layer);
        let var_key = format!("{}.running_var", u.layer);
        let blend = |old: Option<&Tensor>, new: &[f64]| -> Tensor {
            match old {
                Some(o) => Tensor::from_fn(o.shape(), |i| (1.0 - u.momentum) * o.data()[i] + u.momentum * new[i]),
                None => Tensor::from_fn(&[new.len()], |i| new[i]),
            }
        };
        let m = blend(store.buffer(&mean_key), &u.stats.mean);
        let v = blend(store.buffer(&var_key), &u.stats.var);
        store.set_buffer(&mean_key, m);
        store.set_buffer(&var_key, v);
    }
}

pub trait Module {
    fn params(&self) -> Vec<ParamDecl>;

    fn param_count(&self) -> usize {
        self.params().iter().map(ParamDecl::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub name: String,
    pub spec: Conv3dSpec,
    pub bias: bool,
}

impl Conv3d {
    pub fn new(name: impl Into<String>, spec: Conv3dSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias { Some(ctx.param(&self.bias_name())?) } else { None };
        ctx.tape.conv3d(x, w, b, &self.spec)
    }
}

impl Module for Conv3d {
    fn params(&self) -> Vec<ParamDecl> {
        let ws = self.spec.weight_shape();
        let fan_in = ws[1..].iter().product();
        let mut v = vec![ParamDecl::new(self.weight_name(), &ws, Init::HeNormal { fan_in })];
        if self.bias {
            v.push(ParamDecl::new(self.bias_name(), &[self.spec.out_channels], Init::Zeros));
        }
        v
    }
}

/// Learnable transposed convolution; `spec` is the forward conv it inverts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose3d {
    pub name: String,
    pub spec: Conv3dSpec,
}

impl ConvTranspose3d {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        ctx.tape.conv_transpose3d(x, w, Some(b), &self.spec)
    }
}

impl Module for ConvTranspose3d {
    fn params(&self) -> Vec<ParamDecl> {
        let ws = self.spec.weight_shape();
        // fan-in of the transposed map: input channels times taps hitting one output
        let fan_in = self.spec.out_channels * ws[2..].iter().product::<usize>()
            / self.spec.stride.iter().product::<usize>().max(1);
        vec![
            ParamDecl::new(format!("{}.weight", self.name), &ws, Init::HeNormal { fan_in: fan_in.max(1) }),
            ParamDecl::new(format!("{}.bias", self.name), &[self.spec.in_channels], Init::Zeros),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        ctx.tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<ParamDecl> {
        let mut v = vec![ParamDecl::new(
            format!("{}.weight", self.name),
            &[self.in_features, self.out_features],
            Init::HeNormal {
                fan_in: self.in_features,
            },
        )];
        if self.bias {
            v.push(ParamDecl::new(format!("{}.bias", self.name), &[self.out_features], Init::Zeros));
        }
        v
    }
}

/// Layer norm over `axis` (1 for volumes, 2 for `[N, L, C]` tokens).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub spec: NormSpec,
    pub axis: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, features: usize, axis: usize) -> Self {
        Self {
            name: name.into(),
            spec: NormSpec::layer(features),
            axis,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        ctx.tape.layer_norm(x, g, b, self.axis, self.spec.eps)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new(format!("{}.weight", self.name), &[self.spec.features], Init::Ones),
            ParamDecl::new(format!("{}.bias", self.name), &[self.spec.features], Init::Zeros),
        ]
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub spec: NormSpec,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, features: usize) -> Self {
        Self {
            name: name.into(),
            spec: NormSpec::batch(features),
            momentum: BN_MOMENTUM,
        }
    }

    /// Train mode normalizes with batch statistics and queues a running
    /// update; eval mode uses the stored running statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, self.spec.eps)?;
                ctx.bn_updates.push(BnUpdate {
                    layer: self.name.clone(),
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean_key = format!("{}.running_mean", self.name);
                let var_key = format!("{}.running_var", self.name);
                let (Some(m), Some(v)) = (ctx.store.buffer(&mean_key), ctx.store.buffer(&var_key)) else {
                    return Err(Error::State(format!(
                        "batch norm `{}` evaluated before any running statistics exist",
                        self.name
                    )));
                };
                let (m, v) = (m.to_vec(), v.to_vec());
                ctx.tape.batch_norm_eval(x, g, b, &m, &v, self.spec.eps)
            }
        }
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new(format!("{}.weight", self.name), &[self.spec.features], Init::Ones),
            ParamDecl::new(format!("{}.bias", self.name), &[self.spec.features], Init::Zeros),
        ]
    }
}

/// Per-channel 1D conv over `[N, L, C]` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DwConv1d {
    pub name: String,
    pub channels: usize,
    pub width: usize,
    pub causal: bool,
}

impl DwConv1d {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        ctx.tape.dwconv1d_seq(x, w, Some(b), self.causal)
    }
}

impl Module for DwConv1d {
    fn params(&self) -> Vec<ParamDecl> {
        if self.width == 0 {
            return vec![];
        }
        vec![
            ParamDecl::new(
                format!("{}.weight", self.name),
                &[self.channels, self.width],
                Init::HeNormal { fan_in: self.width },
            ),
            ParamDecl::new(format!("{}.bias", self.name), &[self.channels], Init::Zeros),
        ]
    }
}

impl DwConv1d {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("sequence conv kernel width must be ≥ 1"));
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, Conv3d, Conv3dSpec, Ctx, DwConv1d, LayerNorm, Linear, Module, ParamDecl};
use crate::ssm::{SelectiveSsm, DEFAULT_STATE_SIZE};

/// Shape hyperparameters of a residual Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MambaConfig {
    pub expand: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub causal: bool,
    pub mlp_ratio: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            expand: 2,
            state_size: DEFAULT_STATE_SIZE,
            conv_width: 4,
            causal: true,
            mlp_ratio: 4,
        }
    }
}

/// Residual Mamba block over `C` channels:
///
/// ```text
/// m̃   = σ(BN(Conv(m))) + m
/// t   = LN(vol_to_seq(m̃))
/// m̄₁  = SSM(SiLU(dwconv(Linear(t))))
/// m̄₂  = SiLU(Linear(t))
/// out = seq_to_vol(MLP(LN(m̄₁ ∘ m̄₂))) + m̃
/// ```
///
/// Both branches read the same normalized tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlock {
    pub name: String,
    pub channels: usize,
    pub config: MambaConfig,
    pub act: Activation,
    pre_conv: Conv3d,
    pre_bn: BatchNorm,
    norm: LayerNorm,
    in_x: Linear,
    dw: DwConv1d,
    ssm: SelectiveSsm,
    in_z: Linear,
    out_norm: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

impl MambaBlock {
    pub fn new(name: impl Into<String>, channels: usize, config: MambaConfig, act: Activation) -> Result<Self> {
        let name = name.into();
        if channels == 0 || config.expand == 0 || config.state_size == 0 || config.mlp_ratio == 0 {
            return Err(Error::config(format!("{name}: invalid mamba block {channels} ch, {config:?}")));
        }
        let inner = config.expand * channels;
        let dw = DwConv1d {
            name: format!("{name}.dw"),
            channels: inner,
            width: config.conv_width,
            causal: config.causal,
        };
        dw.validate()?;
        Ok(Self {
            pre_conv: Conv3d::new(format!("{name}.pre_conv"), Conv3dSpec::pointwise(channels, channels)),
            pre_bn: BatchNorm::new(format!("{name}.pre_bn"), channels),
            norm: LayerNorm::new(format!("{name}.norm"), channels, 2),
            in_x: Linear::new(format!("{name}.in_x"), channels, inner),
            dw,
            ssm: SelectiveSsm::new(format!("{name}.ssm"), inner, config.state_size),
            in_z: Linear::new(format!("{name}.in_z"), channels, inner),
            out_norm: LayerNorm::new(format!("{name}.out_norm"), inner, 2),
            mlp1: Linear::new(format!("{name}.mlp1"), inner, config.mlp_ratio * channels),
            mlp2: Linear::new(format!("{name}.mlp2"), config.mlp_ratio * channels, channels),
            name,
            channels,
            config,
            act,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, m: Var) -> Result<Var> {
        let shape = ctx.tape.shape(m).to_vec();
        if shape.len() != 5 || shape[1] != self.channels {
            return Err(Error::shape(format!("{}: input {shape:?}, expected {} channels", self.name, self.channels)));
        }
        let spatial = [shape[2], shape[3], shape[4]];
        let p = self.pre_conv.forward(ctx, m)?;
        let p = self.pre_bn.forward(ctx, p)?;
        let p = ctx.tape.activation(self.act, p)?;
        let m_tilde = ctx.tape.add(p, m)?;

        let tokens = ctx.tape.vol_to_seq(m_tilde)?;
        let t = self.norm.forward(ctx, tokens)?;

        let x = self.in_x.forward(ctx, t)?;
        let x = self.dw.forward(ctx, x)?;
        let x = ctx.tape.silu(x);
        let x = self.ssm.forward(ctx, x)?;

        let z = self.in_z.forward(ctx, t)?;
        let z = ctx.tape.silu(z);

        let merged = ctx.tape.mul(x, z)?;
        let o = self.out_norm.forward(ctx, merged)?;
        let o = self.mlp1.forward(ctx, o)?;
        let o = ctx.tape.gelu(o);
        let o = self.mlp2.forward(ctx, o)?;
        let o = ctx.tape.seq_to_vol(o, spatial)?;
        ctx.tape.add(o, m_tilde)
    }
}

impl Module for MambaBlock {
    fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.pre_conv.params();
        v.extend(self.pre_bn.params());
        v.extend(self.norm.params());
        v.extend(self.in_x.params());
        v.extend(self.dw.params());
        v.extend(self.ssm.params());
        v.extend(self.in_z.params());
        v.extend(self.out_norm.params());
        v.extend(self.mlp1.params());
        v.extend(self.mlp2.params());
        v
    }
}

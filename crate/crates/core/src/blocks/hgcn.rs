use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv3d, Conv3dSpec, Ctx, LayerNorm, Module, ParamDecl};

use super::hgconv::{working_channels, Gating, HgConv};
use super::residual::ResidualBlock;

/// HGCN block over `C⁰` channels:
///
/// ```text
/// r   = Res(h)
/// h′  = Stem(r)
/// h″  = hgconv(LN(h′)) + h′
/// out = σ(Conv(LN(h″)) + r)
/// ```
///
/// `Res` runs once and its value feeds both the stem and the final sum.
#[derive(Clone, Debug, PartialEq)]
pub struct HgcnBlock {
    pub name: String,
    pub channels: usize,
    pub working: usize,
    pub act: Activation,
    res: ResidualBlock,
    stem: Conv3d,
    stem_norm: LayerNorm,
    norm_in: LayerNorm,
    hg: HgConv,
    norm_out: LayerNorm,
    out: Conv3d,
}

impl HgcnBlock {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        order: usize,
        gamma: Option<f64>,
        gating: Gating,
        act: Activation,
    ) -> Result<Self> {
        let name = name.into();
        if channels == 0 {
            return Err(Error::config(format!("{name}: zero channels")));
        }
        let working = working_channels(channels, order);
        Ok(Self {
            res: ResidualBlock::new(format!("{name}.res"), channels, channels, act),
            stem: Conv3d::new(format!("{name}.stem"), Conv3dSpec::pointwise(channels, working)),
            stem_norm: LayerNorm::new(format!("{name}.stem_norm"), working, 1),
            norm_in: LayerNorm::new(format!("{name}.norm_in"), working, 1),
            hg: HgConv::new(format!("{name}.hg"), working, order, gamma, gating)?,
            norm_out: LayerNorm::new(format!("{name}.norm_out"), working, 1),
            out: Conv3d::new(format!("{name}.out"), Conv3dSpec::pointwise(working, channels)),
            name,
            channels,
            working,
            act,
        })
    }

    pub fn hgconv(&self) -> &HgConv {
        &self.hg
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let r = self.res.forward(ctx, h)?;
        ctx.res_evals += 1;
        let s = self.stem.forward(ctx, r)?;
        let h1 = self.stem_norm.forward(ctx, s)?;
        let n = self.norm_in.forward(ctx, h1)?;
        let g = self.hg.forward(ctx, n)?;
        let h2 = ctx.tape.add(g, h1)?;
        let n = self.norm_out.forward(ctx, h2)?;
        let o = self.out.forward(ctx, n)?;
        let o = ctx.tape.add(o, r)?;
        ctx.tape.activation(self.act, o)
    }
}

impl Module for HgcnBlock {
    fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.res.params();
        v.extend(self.stem.params());
        v.extend(self.stem_norm.params());
        v.extend(self.norm_in.params());
        v.extend(self.hg.params());
        v.extend(self.norm_out.params());
        v.extend(self.out.params());
        v
    }
}

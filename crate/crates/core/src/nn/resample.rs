//! Learnable resampling between encoder scales: strided conv down, transposed
//! conv up, with kernel = stride on every axis.

use super::conv::Conv3dSpec;
use super::layers::{Conv3d, ConvTranspose3d, Ctx, Module, ParamDecl};
use crate::autodiff::Var;
use crate::error::{Error, Result};

fn check_stride(stride: [usize; 3]) -> Result<()> {
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::config(format!("stride {stride:?} must be ≥ 1 per axis")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    conv: Conv3d,
}

impl Downsample {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, stride: [usize; 3]) -> Result<Self> {
        check_stride(stride)?;
        let spec = Conv3dSpec::new(in_channels, out_channels, stride).with_stride(stride);
        Ok(Self {
            conv: Conv3d::new(name, spec),
        })
    }

    pub fn stride(&self) -> [usize; 3] {
        self.conv.spec.stride
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        for a in 0..3 {
            if input[a] < self.stride()[a] {
                return Err(Error::config(format!(
                    "axis {a}: extent {} smaller than stride {}",
                    input[a],
                    self.stride()[a]
                )));
            }
        }
        self.conv.spec.output_extents(input)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        if s.len() == 5 {
            self.output_extents([s[2], s[3], s[4]])?;
        }
        self.conv.forward(ctx, x)
    }
}

impl Module for Downsample {
    fn params(&self) -> Vec<ParamDecl> {
        self.conv.params()
    }
}

/// Inverts [`Downsample`]'s extent arithmetic: `in·stride` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsample {
    conv: ConvTranspose3d,
}

impl Upsample {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, stride: [usize; 3]) -> Result<Self> {
        check_stride(stride)?;
        // the forward conv being transposed maps out_channels → in_channels
        let spec = Conv3dSpec::new(out_channels, in_channels, stride).with_stride(stride);
        Ok(Self {
            conv: ConvTranspose3d { name: name.into(), spec },
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.conv.forward(ctx, x)
    }
}

impl Module for Upsample {
    fn params(&self) -> Vec<ParamDecl> {
        self.conv.params()
    }
}

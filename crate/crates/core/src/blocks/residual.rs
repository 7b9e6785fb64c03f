use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Activation, Conv3d, Conv3dSpec, Ctx, LayerNorm, Module, ParamDecl};

/// Two 3³ convolutions with channel layer norm:
///
/// ```text
/// out = shortcut(x) + LN(conv₂(σ(LN(conv₁ x))))
/// ```
///
/// The shortcut is the identity, or a 1×1×1 projection when the channel
/// count changes. There is no activation after the sum, so a zero second
/// convolution makes the block return the shortcut exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub act: Activation,
    conv1: Conv3d,
    norm1: LayerNorm,
    conv2: Conv3d,
    norm2: LayerNorm,
    proj: Option<Conv3d>,
}

impl ResidualBlock {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, act: Activation) -> Self {
        let name = name.into();
        let proj = (in_channels != out_channels)
            .then(|| Conv3d::new(format!("{name}.proj"), Conv3dSpec::pointwise(in_channels, out_channels)));
        Self {
            conv1: Conv3d::new(format!("{name}.conv1"), Conv3dSpec::same(in_channels, out_channels, 3)),
            norm1: LayerNorm::new(format!("{name}.norm1"), out_channels, 1),
            conv2: Conv3d::new(format!("{name}.conv2"), Conv3dSpec::same(out_channels, out_channels, 3)),
            norm2: LayerNorm::new(format!("{name}.norm2"), out_channels, 1),
            proj,
            name,
            act,
        }
    }

    pub fn second_conv(&self) -> &Conv3d {
        &self.conv2
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.norm1.forward(ctx, y)?;
        let y = ctx.tape.activation(self.act, y)?;
        let y = self.conv2.forward(ctx, y)?;
        let y = self.norm2.forward(ctx, y)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(shortcut, y)
    }
}

impl Module for ResidualBlock {
    fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.conv1.params();
        v.extend(self.norm1.params());
        v.extend(self.conv2.params());
        v.extend(self.norm2.params());
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_second_conv_returns_shortcut() {
        for (cin, cout) in [(3, 3), (2, 4)] {
            let block = ResidualBlock::new("res", cin, cout, Activation::default());
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::from_decls(&block.params(), &mut rng).unwrap();
            let w = block.second_conv().weight_name();
            let shape = store.get(&w).unwrap().shape().to_vec();
            store.set(&w, Tensor::zeros(&shape)).unwrap();
            let x = Tensor::randn(&[1, cin, 3, 3, 3], 1.0, &mut rng);

            let mut ctx = Ctx::new(&store, Mode::Train);
            let xv = ctx.tape.constant(x.clone());
            let y = block.forward(&mut ctx, xv).unwrap();
            let y = ctx.tape.value(y).clone();
            assert_eq!(y.shape(), &[1, cout, 3, 3, 3]);
            if cin == cout {
                assert_eq!(y, x);
            } else {
                let mut ctx = Ctx::new(&store, Mode::Train);
                let xv = ctx.tape.constant(x);
                let p = Conv3d::new("res.proj", Conv3dSpec::pointwise(cin, cout)).forward(&mut ctx, xv).unwrap();
                assert_eq!(&y, ctx.tape.value(p));
            }
        }
    }
}

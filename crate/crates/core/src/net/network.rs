//! U-shaped network: encoder stages (downsample then block), a mirrored
//! decoder with skip concatenation, and one 1×1×1 head per decoder scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{BlockKind, NetworkPlan};
use crate::autodiff::Var;
use crate::blocks::{HgcnBlock, MambaBlock, ResidualBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Conv3dSpec, Ctx, Downsample, Module, ParamDecl, ParamStore, Upsample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    H(HgcnBlock),
    M(MambaBlock),
    R(ResidualBlock),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::H(_) => BlockKind::H,
            Block::M(_) => BlockKind::M,
            Block::R(_) => BlockKind::R,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Block::H(b) => b.forward(ctx, x),
            Block::M(b) => b.forward(ctx, x),
            Block::R(b) => b.forward(ctx, x),
        }
    }
}

impl Module for Block {
    fn params(&self) -> Vec<ParamDecl> {
        match self {
            Block::H(b) => b.params(),
            Block::M(b) => b.params(),
            Block::R(b) => b.params(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub down: Downsample,
    pub block: Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub up: Upsample,
    pub block: ResidualBlock,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the skip from this encoder stage with zeros.
    pub zero_skip: Option<usize>,
}

/// Logits per supervised scale (full resolution first) and the traced
/// spatial extents.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<Var>,
    pub encoder_extents: Vec<[usize; 3]>,
    /// Decoder scale `l` output extents, full resolution first.
    pub decoder_extents: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub plan: NetworkPlan,
    pub in_channels: usize,
    pub classes: usize,
    pub encoder: Vec<EncoderStage>,
    /// Index `i` merges encoder stage `i`; run from the deepest.
    pub decoder: Vec<DecoderStage>,
    /// Index `i` reads decoder stage `i`.
    pub heads: Vec<Conv3d>,
}

fn build_err(stage: impl Into<String>, e: Error) -> Error {
    Error::Build {
        stage: stage.into(),
        reason: e.to_string(),
    }
}

impl Network {
    pub fn new(plan: &NetworkPlan, in_channels: usize, classes: usize) -> Result<Self> {
        plan.validate().map_err(|e| build_err("plan", e))?;
        if in_channels == 0 || classes < 2 {
            return Err(build_err(
                "input",
                Error::config(format!("{in_channels} input channels, {classes} classes")),
            ));
        }
        let c = &plan.channels;
        let mut encoder = Vec::with_capacity(plan.stages);
        for i in 0..plan.stages {
            let stage = format!("enc{i}");
            let (cin, stride) = if i == 0 { (in_channels, [1, 1, 1]) } else { (c[i - 1], plan.strides[i - 1]) };
            let down = Downsample::new(format!("{stage}.ds"), cin, c[i], stride).map_err(|e| build_err(&stage, e))?;
            let name = format!("{stage}.block");
            let block = match plan.blocks[i] {
                BlockKind::H => {
                    let order = plan.order_of(i).expect("validated plan has an order per H stage");
                    Block::H(
                        HgcnBlock::new(name, c[i], order, plan.gamma, plan.gating, plan.activation)
                            .map_err(|e| build_err(&stage, e))?,
                    )
                }
                BlockKind::M => {
                    Block::M(MambaBlock::new(name, c[i], plan.mamba, plan.activation).map_err(|e| build_err(&stage, e))?)
                }
                BlockKind::R => Block::R(ResidualBlock::new(name, c[i], c[i], plan.activation)),
            };
            encoder.push(EncoderStage { down, block });
        }
        let mut decoder = Vec::new();
        for i in 0..plan.stages - 1 {
            let stage = format!("dec{i}");
            let up = Upsample::new(format!("{stage}.up"), c[i + 1], c[i], plan.strides[i]).map_err(|e| build_err(&stage, e))?;
            let block = ResidualBlock::new(format!("{stage}.block"), 2 * c[i], c[i], plan.activation);
            decoder.push(DecoderStage { up, block });
        }
        let supervised = if plan.deep_supervision { decoder.len().max(1) } else { 1 };
        let heads = (0..supervised)
            .map(|i| Conv3d::new(format!("head{i}"), Conv3dSpec::pointwise(c[i], classes)))
            .collect();
        Ok(Self {
            plan: plan.clone(),
            in_channels,
            classes,
            encoder,
            decoder,
            heads,
        })
    }

    /// Deterministic parameters from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamStore::from_decls(&self.params(), &mut rng)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Vec<Var>> {
        Ok(self.forward_with(ctx, x, &ForwardOptions::default())?.logits)
    }

    pub fn forward_with(&self, ctx: &mut Ctx, x: Var, opts: &ForwardOptions) -> Result<Forward> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.in_channels || s[2..] != self.plan.patch_size {
            return Err(Error::shape(format!(
                "network input {s:?}, expected [N, {}, {:?}]",
                self.in_channels, self.plan.patch_size
            )));
        }
        let extents = |ctx: &Ctx, v: Var| {
            let s = ctx.tape.shape(v);
            [s[2], s[3], s[4]]
        };
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut encoder_extents = Vec::new();
        let mut h = x;
        for stage in &self.encoder {
            h = stage.down.forward(ctx, h)?;
            h = stage.block.forward(ctx, h)?;
            encoder_extents.push(extents(ctx, h));
            skips.push(h);
        }
        if let Some(i) = opts.zero_skip {
            if i < skips.len() {
                let zeros = Tensor::zeros(ctx.tape.shape(skips[i]));
                skips[i] = ctx.tape.constant(zeros);
                if i + 1 == skips.len() {
                    h = skips[i];
                }
            }
        }
        let mut outs = vec![None; self.decoder.len()];
        for (i, stage) in self.decoder.iter().enumerate().rev() {
            let up = stage.up.forward(ctx, h)?;
            let cat = ctx.tape.concat(&[up, skips[i]], 1)?;
            h = stage.block.forward(ctx, cat)?;
            outs[i] = Some(h);
        }
        let scales: Vec<Var> = if outs.is_empty() {
            vec![h]
        } else {
            outs.into_iter().map(|v| v.expect("every decoder stage ran")).collect()
        };
        let decoder_extents = scales.iter().map(|&v| extents(ctx, v)).collect();
        let logits = self
            .heads
            .iter()
            .zip(&scales)
            .map(|(head, &v)| head.forward(ctx, v))
            .collect::<Result<_>>()?;
        Ok(Forward {
            logits,
            encoder_extents,
            decoder_extents,
        })
    }
}

impl Module for Network {
    fn params(&self) -> Vec<ParamDecl> {
        let mut v = Vec::new();
        for s in &self.encoder {
            v.extend(s.down.params());
            v.extend(s.block.params());
        }
        for s in &self.decoder {
            v.extend(s.up.params());
            v.extend(s.block.params());
        }
        for h in &self.heads {
            v.extend(h.params());
        }
        v
    }
}

/// Builds the network and its seeded parameters.
pub fn build(plan: &NetworkPlan, in_channels: usize, classes: usize, seed: u64) -> Result<(Network, ParamStore)> {
    let net = Network::new(plan, in_channels, classes)?;
    let store = net.init(seed)?;
    Ok((net, store))
}

//! High-order gated convolution.
//!
//! A pointwise projection to 2C′ channels and a depthwise 3³ convolution
//! produce sub-vectors `U₀, V₀, …, V_{n−1}` of geometrically growing width.
//! They are folded together in `n` steps:
//!
//! ```text
//! U₁ = V₀ + U₀
//! U_{j+1} = V_j + γ·Φ_j(U_j)     (additive)
//! U_{j+1} = V_j ∘ γ·Φ_j(U_j)     (multiplicative)
//! ```
//!
//! where `Φ_j` is a 1×1×1 convolution from `C′_{j−1}` to `C′_j` channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Conv3dSpec, Ctx, Module, ParamDecl};

pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gating {
    #[default]
    Additive,
    Multiplicative,
}

/// Widths `[C′₀ (U₀), C′₀, C′₁, …, C′_{n−1}]` with `C′_j = C′ / 2^{n−j−1}`.
pub fn channel_partition(channels: usize, order: usize) -> Result<Vec<usize>> {
    if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
        return Err(Error::config(format!("order {order} outside [{MIN_ORDER}, {MAX_ORDER}]")));
    }
    let unit = 1usize << (order - 1);
    if channels == 0 || channels % unit != 0 {
        return Err(Error::config(format!(
            "{channels} working channels not divisible by 2^{} for order {order}",
            order - 1
        )));
    }
    let widths: Vec<usize> = (0..order).map(|j| channels >> (order - j - 1)).collect();
    let mut parts = vec![widths[0]];
    parts.extend(widths);
    Ok(parts)
}

/// Smallest multiple of `2^{n−1}` that is ≥ `channels`.
pub fn working_channels(channels: usize, order: usize) -> usize {
    let unit = 1usize << order.saturating_sub(1);
    channels.div_ceil(unit) * unit
}

#[derive(Clone, Debug, PartialEq)]
pub struct HgConv {
    pub name: String,
    pub channels: usize,
    pub order: usize,
    pub gamma: f64,
    pub gating: Gating,
    partition: Vec<usize>,
    proj: Conv3d,
    dw: Conv3d,
    phis: Vec<Conv3d>,
}

impl HgConv {
    /// `gamma` defaults to `1/n`.
    pub fn new(name: impl Into<String>, channels: usize, order: usize, gamma: Option<f64>, gating: Gating) -> Result<Self> {
        let name = name.into();
        let partition = channel_partition(channels, order)?;
        let phis = (1..order)
            .map(|j| {
                Conv3d::new(
                    format!("{name}.phi{j}"),
                    Conv3dSpec::pointwise(partition[j], partition[j + 1]),
                )
            })
            .collect();
        Ok(Self {
            proj: Conv3d::new(format!("{name}.proj"), Conv3dSpec::pointwise(channels, 2 * channels)),
            dw: Conv3d::new(format!("{name}.dw"), Conv3dSpec::depthwise(2 * channels, 3)),
            phis,
            partition,
            gamma: gamma.unwrap_or(1.0 / order as f64),
            name,
            channels,
            order,
            gating,
        })
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape(format!(
                "{}: expected {} channels, input {:?}",
                self.name,
                self.channels,
                ctx.tape.shape(x)
            )));
        }
        let p = self.proj.forward(ctx, x)?;
        let q = self.dw.forward(ctx, p)?;
        let parts = ctx.tape.split(q, 1, &self.partition)?;
        let mut u = ctx.tape.add(parts[1], parts[0])?;
        for (j, phi) in self.phis.iter().enumerate() {
            let g = phi.forward(ctx, u)?;
            let g = ctx.tape.scale(g, self.gamma);
            let v = parts[j + 2];
            u = match self.gating {
                Gating::Additive => ctx.tape.add(v, g)?,
                Gating::Multiplicative => ctx.tape.mul(v, g)?,
            };
        }
        Ok(u)
    }

    /// Multiply-accumulates per output voxel.
    pub fn macs_per_voxel(&self) -> usize {
        let c = self.channels;
        let phis: usize = self.partition.windows(2).skip(1).map(|w| w[0] * w[1]).sum();
        c * 2 * c + 2 * c * 27 + phis
    }
}

impl Module for HgConv {
    fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.proj.params();
        v.extend(self.dw.params());
        for p in &self.phis {
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
    fn partition_examples() {
        assert_eq!(channel_partition(16, 3).unwrap(), vec![4, 4, 8, 16]);
        assert_eq!(channel_partition(8, 2).unwrap(), vec![4, 4, 8]);
        assert_eq!(channel_partition(8, 4).unwrap(), vec![1, 1, 2, 4, 8]);
        assert!(matches!(channel_partition(6, 3), Err(Error::Config(_))));
        assert!(channel_partition(8, 1).is_err());
        assert!(channel_partition(64, 7).is_err());
    }

    #[test]
    fn working_channels_round_up() {
        assert_eq!(working_channels(8, 2), 8);
        assert_eq!(working_channels(5, 3), 8);
        assert_eq!(working_channels(32, 4), 32);
        assert_eq!(working_channels(3, 2), 4);
    }

    fn build(c: usize, n: usize, gating: Gating, gamma: Option<f64>, seed: u64) -> (HgConv, ParamStore) {
        let hg = HgConv::new("hg", c, n, gamma, gating).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::from_decls(&hg.params(), &mut rng).unwrap();
        (hg, store)
    }

    fn run(hg: &HgConv, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(store, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let y = hg.forward(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    }

    // plain-loop reference for [1, C, D, H, W] inputs
    fn pointwise(x: &[f64], c_in: usize, w: &Tensor, b: &Tensor, vox: usize) -> Vec<f64> {
        let c_out = w.shape()[0];
        let mut y = vec![0.0; c_out * vox];
        for o in 0..c_out {
            for v in 0..vox {
                y[o * vox + v] = b.data()[o] + (0..c_in).map(|i| w.data()[o * c_in + i] * x[i * vox + v]).sum::<f64>();
            }
        }
        y
    }

    fn depthwise3(x: &[f64], c: usize, w: &Tensor, b: &Tensor, e: usize) -> Vec<f64> {
        let vox = e * e * e;
        let mut y = vec![0.0; c * vox];
        for ch in 0..c {
            for d in 0..e {
                for h in 0..e {
                    for ww in 0..e {
                        let mut acc = b.data()[ch];
                        for kd in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let (sd, sh, sw) = (d + kd, h + kh, ww + kw);
                                    if sd < 1 || sh < 1 || sw < 1 || sd > e || sh > e || sw > e {
                                        continue;
                                    }
                                    let src = ((sd - 1) * e + sh - 1) * e + sw - 1;
                                    acc += w.data()[ch * 27 + (kd * 3 + kh) * 3 + kw] * x[ch * vox + src];
                                }
                            }
                        }
                        y[ch * vox + (d * e + h) * e + ww] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn order_two_matches_hand_reference() {
        let (c, e) = (4, 3);
        let vox = e * e * e;
        for gating in [Gating::Additive, Gating::Multiplicative] {
            let (hg, mut store) = build(c, 2, gating, Some(0.7), 5);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for name in ["hg.proj.bias", "hg.dw.bias", "hg.phi1.bias"] {
                let shape = store.get(name).unwrap().shape().to_vec();
                store.set(name, Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
            }
            let x = Tensor::randn(&[1, c, e, e, e], 1.0, &mut rng);
            let got = run(&hg, &store, &x);

            let g = |n: &str| store.get(n).unwrap();
            let p = pointwise(x.data(), c, g("hg.proj.weight"), g("hg.proj.bias"), vox);
            let q = depthwise3(&p, 2 * c, g("hg.dw.weight"), g("hg.dw.bias"), e);
            // split 2C′ = 8 into U₀:2, V₀:2, V₁:4
            let u0 = &q[..2 * vox];
            let v0 = &q[2 * vox..4 * vox];
            let v1 = &q[4 * vox..];
            let u1: Vec<f64> = u0.iter().zip(v0).map(|(a, b)| a + b).collect();
            let phi = pointwise(&u1, 2, g("hg.phi1.weight"), g("hg.phi1.bias"), vox);
            let expected: Vec<f64> = v1
                .iter()
                .zip(&phi)
                .map(|(v, f)| match gating {
                    Gating::Additive => v + 0.7 * f,
                    Gating::Multiplicative => v * (0.7 * f),
                })
                .collect();
            assert_eq!(got.shape(), &[1, c, e, e, e]);
            let err = got.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "{gating:?}: {err}");
        }
    }

    #[test]
    fn zero_input_zero_output() {
        for gating in [Gating::Additive, Gating::Multiplicative] {
            let (hg, store) = build(8, 3, gating, None, 1);
            let y = run(&hg, &store, &Tensor::zeros(&[1, 8, 2, 2, 2]));
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_for_every_order() {
        for n in MIN_ORDER..=MAX_ORDER {
            let c = (1 << (n - 1)) * 2;
            let (hg, store) = build(c, n, Gating::Additive, None, n as u64);
            assert!((hg.gamma - 1.0 / n as f64).abs() < 1e-15);
            let x = Tensor::randn(&[1, c, 2, 3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(run(&hg, &store, &x).shape(), x.shape());
        }
    }

    #[test]
    fn cost_grows_with_order() {
        let costs: Vec<usize> = (MIN_ORDER..=MAX_ORDER)
            .map(|n| HgConv::new("hg", 32, n, None, Gating::Additive).unwrap().macs_per_voxel())
            .collect();
        assert!(costs.windows(2).all(|w| w[0] < w[1]), "{costs:?}");
    }
}

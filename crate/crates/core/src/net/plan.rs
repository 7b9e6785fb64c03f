//! Stage-wise network plans: presets, a small planning heuristic and the
//! structured-text (TOML) representation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::hgconv::{MAX_ORDER, MIN_ORDER};
use crate::blocks::{Gating, MambaConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;

pub const MIN_STAGES: usize = 4;
pub const MAX_STAGES: usize = 6;
pub const MAX_CHANNELS: usize = 320;
pub const BASE_CHANNELS: usize = 32;
/// An axis is halved only while the result stays at least this long.
const MIN_EXTENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// High-order gated convolution block.
    H,
    /// Residual Mamba block.
    M,
    /// Plain residual block, for baseline variants.
    R,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::H => "H",
            BlockKind::M => "M",
            BlockKind::R => "R",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub stages: usize,
    pub blocks: Vec<BlockKind>,
    /// One order per H stage, in stage order.
    pub orders: Vec<usize>,
    pub channels: Vec<usize>,
    /// Stride entering stages 1..s; stage 0 keeps full resolution.
    pub strides: Vec<[usize; 3]>,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub deep_supervision: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub gating: Gating,
    /// Gate scale; `1/n` per block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub mamba: MambaConfig,
}

/// Dataset summary the planning heuristic works from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub median_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub classes: usize,
    /// Largest patch in voxels; `None` keeps the median shape.
    pub memory_budget: Option<usize>,
}

/// Channel count of each stage: doubling from `base`, capped.
pub fn stage_channels(stages: usize, base: usize) -> Vec<usize> {
    (0..stages).map(|i| (base << i).min(MAX_CHANNELS)).collect()
}

/// Per-step halving decisions for `extent` at `spacing`.
///
/// At each step every axis whose extent is even, stays ≥ 4 after halving and
/// whose current spacing is within 2× of the finest eligible spacing is
/// halved. Coarse axes (large spacing) therefore wait until the others catch
/// up, which yields axis-asymmetric strides for anisotropic data.
pub fn halving_schedule(extent: [usize; 3], spacing: [f64; 3], max_steps: usize) -> Vec<[usize; 3]> {
    let mut e = extent;
    let mut sp = spacing;
    let mut out = Vec::new();
    while out.len() < max_steps {
        let eligible: Vec<bool> = e.iter().map(|&v| v % 2 == 0 && v / 2 >= MIN_EXTENT).collect();
        let finest = (0..3)
            .filter(|&a| eligible[a])
            .map(|a| sp[a])
            .fold(f64::INFINITY, f64::min);
        if !finest.is_finite() {
            break;
        }
        let mut stride = [1; 3];
        for a in 0..3 {
            if eligible[a] && sp[a] <= 2.0 * finest {
                stride[a] = 2;
                e[a] /= 2;
                sp[a] *= 2.0;
            }
        }
        out.push(stride);
    }
    out
}

/// Per-axis halving counts of a stride schedule.
pub fn pooling_per_axis(strides: &[[usize; 3]]) -> [usize; 3] {
    let mut counts = [0; 3];
    for s in strides {
        for a in 0..3 {
            counts[a] += s[a].trailing_zeros() as usize;
        }
    }
    counts
}

/// Encoder blocks `⌈s/2⌉ × H` then M, orders `2, 3, …`.
fn stagewise(stages: usize) -> (Vec<BlockKind>, Vec<usize>) {
    let h = stages.div_ceil(2);
    let blocks = (0..stages).map(|i| if i < h { BlockKind::H } else { BlockKind::M }).collect();
    (blocks, (MIN_ORDER..MIN_ORDER + h).collect())
}

pub fn derive_plan(fp: &Fingerprint) -> Result<NetworkPlan> {
    if fp.median_shape.iter().any(|&e| e == 0) || fp.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Plan(format!("non-positive extent or spacing in {fp:?}")));
    }
    if fp.median_shape.iter().all(|&e| e < 8) {
        return Err(Error::Plan(format!("median shape {:?} too small to plan", fp.median_shape)));
    }
    let mut patch = fp.median_shape;
    if let Some(budget) = fp.memory_budget {
        let mut shrunk = false;
        while patch.iter().product::<usize>() > budget {
            let a = (0..3).max_by_key(|&a| patch[a]).unwrap();
            if patch[a] <= 8 {
                return Err(Error::Plan(format!("memory budget {budget} voxels cannot hold an 8³ patch")));
            }
            patch[a] -= (patch[a] / 10).max(1);
            shrunk = true;
        }
        if shrunk {
            // keep room for several halvings per axis
            for e in &mut patch {
                *e = (*e / 16 * 16).max(8);
            }
        }
    }
    let mut strides = halving_schedule(patch, fp.spacing, MAX_STAGES - 1);
    let stages = (strides.len() + 1).clamp(MIN_STAGES, MAX_STAGES);
    strides.resize(stages - 1, [1, 1, 1]);
    let (blocks, orders) = stagewise(stages);
    let plan = NetworkPlan {
        stages,
        blocks,
        orders,
        channels: stage_channels(stages, BASE_CHANNELS),
        strides,
        patch_size: patch,
        batch_size: 2,
        deep_supervision: true,
        activation: Activation::default(),
        gating: Gating::default(),
        gamma: None,
        mamba: MambaConfig::default(),
    };
    plan.validate()?;
    Ok(plan)
}

pub const PRESETS: [&str; 7] = ["pcd", "lungt", "livert", "abd", "brats", "toy", "micro"];

pub fn preset_plan(name: &str) -> Result<NetworkPlan> {
    let (shape, spacing) = match name {
        "pcd" => ([80, 192, 160], [1.25, 0.77, 0.77]),
        "lungt" => ([96, 160, 160], [1.25, 0.77, 0.77]),
        "livert" => ([64, 192, 192], [1.22, 0.76, 0.76]),
        "abd" => ([40, 224, 192], [2.5, 0.80, 0.80]),
        "brats" => ([128, 128, 128], [1.0, 1.0, 1.0]),
        "toy" => return Ok(toy_plan()),
        "micro" => return Ok(micro_plan()),
        _ => {
            return Err(Error::config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    derive_plan(&Fingerprint {
        median_shape: shape,
        spacing,
        classes: 2,
        memory_budget: None,
    })
}

fn toy_plan() -> NetworkPlan {
    let (blocks, orders) = stagewise(4);
    NetworkPlan {
        stages: 4,
        blocks,
        orders,
        channels: stage_channels(4, 8),
        strides: vec![[2, 2, 2]; 3],
        patch_size: [24, 24, 24],
        batch_size: 1,
        deep_supervision: true,
        activation: Activation::default(),
        gating: Gating::default(),
        gamma: None,
        mamba: MambaConfig::default(),
    }
}

/// Smallest plan that still has an encoder/decoder pair; used by the
/// end-to-end gradient check.
pub fn micro_plan() -> NetworkPlan {
    NetworkPlan {
        stages: 2,
        blocks: vec![BlockKind::H, BlockKind::M],
        orders: vec![2],
        channels: vec![4, 8],
        strides: vec![[2, 2, 2]],
        patch_size: [8, 8, 8],
        batch_size: 1,
        deep_supervision: true,
        activation: Activation::default(),
        gating: Gating::default(),
        gamma: None,
        mamba: MambaConfig {
            state_size: 2,
            ..MambaConfig::default()
        },
    }
}

/// Encoder-schedule variants for order/placement ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Residual blocks only.
    Plain,
    /// HGCN in every stage with the given first order.
    AllH,
    /// Mamba in every stage.
    AllM,
    /// HGCN then Mamba with one fixed order for all H stages.
    FixedOrder(usize),
    /// The default stage-wise schedule.
    Stagewise,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "all-h" => Ok(Variant::AllH),
            "all-m" => Ok(Variant::AllM),
            "stagewise" => Ok(Variant::Stagewise),
            _ => match s.strip_prefix("order-").and_then(|n| n.parse().ok()) {
                Some(n) => Ok(Variant::FixedOrder(n)),
                None => Err(Error::config(format!("unknown variant `{s}`"))),
            },
        }
    }
}

impl NetworkPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: NetworkPlan = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn h_stages(&self) -> usize {
        self.blocks.iter().filter(|&&b| b == BlockKind::H).count()
    }

    /// Order of stage `i` if it is an H stage.
    pub fn order_of(&self, stage: usize) -> Option<usize> {
        if self.blocks.get(stage) != Some(&BlockKind::H) {
            return None;
        }
        let k = self.blocks[..stage].iter().filter(|&&b| b == BlockKind::H).count();
        self.orders.get(k).copied()
    }

    /// Cumulative stride product entering each stage.
    pub fn cumulative_strides(&self) -> Vec<[usize; 3]> {
        let mut acc = [1; 3];
        let mut out = vec![acc];
        for s in &self.strides {
            for a in 0..3 {
                acc[a] *= s[a];
            }
            out.push(acc);
        }
        out
    }

    /// Spatial extents of each encoder stage for the plan's patch.
    pub fn stage_extents(&self) -> Vec<[usize; 3]> {
        self.cumulative_strides()
            .iter()
            .map(|c| [0, 1, 2].map(|a| self.patch_size[a] / c[a]))
            .collect()
    }

    pub fn pooling_per_axis(&self) -> [usize; 3] {
        pooling_per_axis(&self.strides)
    }

    pub fn with_variant(mut self, variant: Variant) -> Result<Self> {
        let s = self.stages;
        let h = s.div_ceil(2);
        match variant {
            Variant::Plain => {
                self.blocks = vec![BlockKind::R; s];
                self.orders.clear();
            }
            Variant::AllH => {
                self.blocks = vec![BlockKind::H; s];
                self.orders = (0..s).map(|i| (MIN_ORDER + i).min(MAX_ORDER)).collect();
            }
            Variant::AllM => {
                self.blocks = vec![BlockKind::M; s];
                self.orders.clear();
            }
            Variant::FixedOrder(n) => {
                (self.blocks, _) = stagewise(s);
                self.orders = vec![n; h];
            }
            Variant::Stagewise => (self.blocks, self.orders) = stagewise(s),
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Plan(m));
        if self.stages < 1 {
            return err("a plan needs at least one stage".into());
        }
        if self.blocks.len() != self.stages || self.channels.len() != self.stages {
            return err(format!(
                "{} stages but {} block kinds and {} channel counts",
                self.stages,
                self.blocks.len(),
                self.channels.len()
            ));
        }
        if self.strides.len() + 1 != self.stages {
            return err(format!("{} stages need {} strides, got {}", self.stages, self.stages - 1, self.strides.len()));
        }
        if self.orders.len() != self.h_stages() {
            return err(format!("{} H stages but {} orders", self.h_stages(), self.orders.len()));
        }
        if let Some(o) = self.orders.iter().find(|o| !(MIN_ORDER..=MAX_ORDER).contains(o)) {
            return err(format!("order {o} outside [{MIN_ORDER}, {MAX_ORDER}]"));
        }
        if self.channels.contains(&0) || self.batch_size == 0 {
            return err("channel counts and batch size must be positive".into());
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return err("strides must be ≥ 1".into());
        }
        let total = self.cumulative_strides().last().copied().unwrap_or([1; 3]);
        for a in 0..3 {
            if self.patch_size[a] == 0 || self.patch_size[a] % total[a] != 0 {
                return err(format!(
                    "patch {:?} not divisible by cumulative stride {total:?}",
                    self.patch_size
                ));
            }
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() {
                return err(format!("gate scale {g} is not finite"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets() {
        let abd = preset_plan("abd").unwrap();
        assert_eq!(abd.stages, 6);
        assert_eq!(abd.patch_size, [40, 224, 192]);
        assert_eq!(abd.pooling_per_axis(), [3, 5, 5]);
        assert_eq!(abd.strides[0], [1, 2, 2]);
        assert_eq!(abd.strides[4], [1, 2, 2]);
        for name in ["pcd", "livert"] {
            assert_eq!(preset_plan(name).unwrap().pooling_per_axis(), [4, 5, 5], "{name}");
        }
        let brats = preset_plan("brats").unwrap();
        assert_eq!((brats.patch_size, brats.batch_size), ([128, 128, 128], 2));
        assert!(brats.strides.iter().all(|s| *s == [2, 2, 2]));
        assert!(matches!(preset_plan("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn toy_is_valid() {
        let toy = preset_plan("toy").unwrap();
        toy.validate().unwrap();
        assert_eq!(toy.blocks, vec![BlockKind::H, BlockKind::H, BlockKind::M, BlockKind::M]);
        assert_eq!(toy.orders, vec![2, 3]);
        assert_eq!(toy.channels, vec![8, 16, 32, 64]);
        micro_plan().validate().unwrap();
    }

    #[test]
    fn channel_cap() {
        assert_eq!(stage_channels(6, 32), vec![32, 64, 128, 256, 320, 320]);
    }

    #[test]
    fn degenerate_fingerprints() {
        let fp = |shape, spacing| Fingerprint {
            median_shape: shape,
            spacing,
            classes: 2,
            memory_budget: None,
        };
        assert!(matches!(derive_plan(&fp([4, 6, 7], [1.0; 3])), Err(Error::Plan(_))));
        assert!(matches!(derive_plan(&fp([64, 64, 64], [1.0, 0.0, 1.0])), Err(Error::Plan(_))));
        // few halvings still give the minimum stage count
        let p = derive_plan(&fp([16, 16, 16], [1.0; 3])).unwrap();
        assert_eq!(p.stages, 4);
        assert_eq!(p.strides, vec![[2, 2, 2], [2, 2, 2], [1, 1, 1]]);
    }

    #[test]
    fn budget_shrinks_patch() {
        let p = derive_plan(&Fingerprint {
            median_shape: [128, 128, 128],
            spacing: [1.0; 3],
            classes: 2,
            memory_budget: Some(64 * 64 * 64),
        })
        .unwrap();
        assert!(p.patch_size.iter().product::<usize>() <= 64 * 64 * 64);
        p.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let p = preset_plan("abd").unwrap();
        let text = p.to_toml().unwrap();
        assert_eq!(NetworkPlan::from_toml(&text).unwrap(), p);
        let mut bad = p.clone();
        bad.orders = vec![1, 2, 3];
        assert!(matches!(bad.validate(), Err(Error::Plan(_))));
    }

    #[test]
    fn variants() {
        let toy = preset_plan("toy").unwrap();
        assert_eq!(toy.clone().with_variant(Variant::Plain).unwrap().h_stages(), 0);
        let all_h = toy.clone().with_variant(Variant::AllH).unwrap();
        assert_eq!(all_h.orders, vec![2, 3, 4, 5]);
        let fixed = toy.clone().with_variant(Variant::FixedOrder(4)).unwrap();
        assert_eq!(fixed.orders, vec![4, 4]);
        assert_eq!(fixed.order_of(1), Some(4));
        assert_eq!(fixed.order_of(2), None);
        assert!(toy.with_variant(Variant::FixedOrder(7)).is_err());
        assert_eq!("order-3".parse::<Variant>().unwrap(), Variant::FixedOrder(3));
    }
}

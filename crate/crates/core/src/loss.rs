//! Overlap losses (Dice, Tversky, their region-partitioned forms),
//! cross-entropy, compound losses and deep-supervision aggregation.
//!
//! All overlap losses take softmax probabilities `[N, C, D, H, W]` and
//! integer labels; class 0 is background and is excluded from the average
//! (one-vs-rest over foreground classes, then mean over batch).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Fallback penalties, also the fixed setting used for recall weighting.
pub const FIXED_ALPHA: f64 = 0.3;
pub const FIXED_BETA: f64 = 0.7;
const PROB_SLACK: f64 = 1e-9;

/// Disjoint axis-aligned boxes covering a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    extents: [usize; 3],
    box_extents: [usize; 3],
    region_of: Arc<[usize]>,
    regions: usize,
}

impl RegionPartition {
    /// Grid of boxes of `box_extents`, clipped at the far boundary.
    pub fn with_box(extents: [usize; 3], box_extents: [usize; 3]) -> Result<Self> {
        if extents.contains(&0) || box_extents.contains(&0) {
            return Err(Error::config(format!(
                "partition of {extents:?} into boxes {box_extents:?}"
            )));
        }
        let per_axis: [usize; 3] = std::array::from_fn(|a| extents[a].div_ceil(box_extents[a]));
        let [d, h, w] = extents;
        let mut region_of = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let b = [z / box_extents[0], y / box_extents[1], x / box_extents[2]];
                    region_of.push((b[0] * per_axis[1] + b[1]) * per_axis[2] + b[2]);
                }
            }
        }
        Ok(Self {
            extents,
            box_extents,
            region_of: region_of.into(),
            regions: per_axis.iter().product(),
        })
    }

    /// Split each axis into (at most) `counts` boxes of near-equal size.
    pub fn split(extents: [usize; 3], counts: [usize; 3]) -> Result<Self> {
        if counts.contains(&0) {
            return Err(Error::config(format!("split counts {counts:?}")));
        }
        let box_extents = std::array::from_fn(|a| extents[a].div_ceil(counts[a].min(extents[a]).max(1)));
        Self::with_box(extents, box_extents)
    }

    /// The trivial partition with one region.
    pub fn whole(extents: [usize; 3]) -> Result<Self> {
        Self::with_box(extents, extents)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn box_extents(&self) -> [usize; 3] {
        self.box_extents
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Region index of every voxel in row-major order.
    pub fn region_of(&self) -> &Arc<[usize]> {
        &self.region_of
    }
}

/// How a volume is cut into regions for the region losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSpec {
    /// Boxes per axis.
    PerAxis([usize; 3]),
    /// Fixed box extents.
    BoxExtent([usize; 3]),
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::PerAxis([4, 4, 4])
    }
}

impl PartitionSpec {
    pub fn resolve(&self, extents: [usize; 3]) -> Result<RegionPartition> {
        match *self {
            PartitionSpec::PerAxis(c) => RegionPartition::split(extents, c),
            PartitionSpec::BoxExtent(b) => {
                RegionPartition::with_box(extents, std::array::from_fn(|a| b[a].min(extents[a])))
            }
        }
    }
}

/// Per-class, per-region FP and FN penalties, each `[C, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl Coefficients {
    pub fn uniform(classes: usize, regions: usize, alpha: f64, beta: f64) -> Self {
        Self {
            alpha: Tensor::full(&[classes, regions], alpha),
            beta: Tensor::full(&[classes, regions], beta),
        }
    }

    fn check(&self, classes: usize, regions: usize) -> Result<()> {
        for t in [&self.alpha, &self.beta] {
            if t.shape() != [classes, regions] {
                return Err(Error::shape(format!(
                    "penalties {:?} for {classes} classes and {regions} regions",
                    t.shape()
                )));
            }
            if t.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::config("penalties must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// `[N, C, spatial...]` one-hot encoding of `labels`.
pub fn one_hot(labels: &[usize], batch: usize, classes: usize, spatial: &[usize]) -> Result<Tensor> {
    let vol: usize = spatial.iter().product();
    if labels.len() != batch * vol {
        return Err(Error::shape(format!("{} labels for batch {batch} of {spatial:?}", labels.len())));
    }
    let mut data = vec![0.0; batch * classes * vol];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        let (b, v) = (i / vol, i % vol);
        data[(b * classes + l) * vol + v] = 1.0;
    }
    let mut shape = vec![batch, classes];
    shape.extend_from_slice(spatial);
    Tensor::new(&shape, data)
}

/// Soft TP, Σŷ and Σy per `[N, C, k]`, plus the tape node of TP and Σŷ.
struct Sums {
    tp: Var,
    pred: Var,
    target: Var,
    classes: usize,
}

fn region_sums(tape: &mut Tape, probs: Var, labels: &[usize], partition: &RegionPartition) -> Result<Sums> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 5 {
        return Err(Error::shape(format!("probabilities must be [N, C, D, H, W], got {shape:?}")));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if classes < 2 {
        return Err(Error::shape("overlap losses need a background and at least one foreground class"));
    }
    if shape[2..] != partition.extents {
        return Err(Error::config(format!(
            "partition over {:?} for volume {:?}",
            partition.extents,
            &shape[2..]
        )));
    }
    if let Some(p) = tape.value(probs).data().iter().find(|&&p| !(-PROB_SLACK..=1.0 + PROB_SLACK).contains(&p)) {
        return Err(Error::contract(format!("probability {p} outside [0, 1]")));
    }
    let y = one_hot(labels, batch, classes, &shape[2..])?;
    let k = partition.regions;
    let mut target = vec![0.0; batch * classes * k];
    let vol = partition.region_of.len();
    for (i, &l) in labels.iter().enumerate() {
        let (b, v) = (i / vol, i % vol);
        target[(b * classes + l) * k + partition.region_of[v]] += 1.0;
    }
    let y = tape.constant(y);
    let py = tape.mul(probs, y)?;
    let tp = tape.box_sums(py, partition.region_of.clone(), k)?;
    let pred = tape.box_sums(probs, partition.region_of.clone(), k)?;
    let target = tape.constant(Tensor::new(&[batch, classes, k], target)?);
    Ok(Sums { tp, pred, target, classes })
}

/// Per-region terms `[N, C, k]` → scalar: drop background, sum (or mean)
/// over regions, mean over batch and classes.
fn reduce_terms(tape: &mut Tape, terms: Var, classes: usize, normalize: bool) -> Result<Var> {
    let fg = tape.slice(terms, 1, 1, classes - 1)?;
    let per = tape.sum_axis(fg, 2)?;
    let k = tape.shape(terms)[2];
    let mean = tape.mean(per);
    Ok(if normalize { tape.scale(mean, 1.0 / k as f64) } else { mean })
}

fn dice_terms(tape: &mut Tape, s: &Sums, eps: f64) -> Result<Var> {
    let two_tp = tape.scale(s.tp, 2.0);
    let num = tape.add_scalar(two_tp, eps);
    let total = tape.add(s.pred, s.target)?;
    let den = tape.add_scalar(total, eps);
    let ratio = tape.div(num, den)?;
    Ok(tape.one_minus(ratio))
}

fn tversky_terms(tape: &mut Tape, s: &Sums, coeffs: &Coefficients, eps: f64) -> Result<Var> {
    let k = tape.shape(s.tp)[2];
    coeffs.check(s.classes, k)?;
    let fp = tape.sub(s.pred, s.tp)?;
    let fn_ = tape.sub(s.target, s.tp)?;
    let alpha = tape.constant(coeffs.alpha.clone());
    let beta = tape.constant(coeffs.beta.clone());
    let a_fp = tape.mul(fp, alpha)?;
    let b_fn = tape.mul(fn_, beta)?;
    let errs = tape.add(a_fp, b_fn)?;
    let num = tape.add_scalar(s.tp, eps);
    let den = tape.add(num, errs)?;
    let ratio = tape.div(num, den)?;
    Ok(tape.one_minus(ratio))
}

/// `1 − (2Σŷy + ε)/(Σŷ + Σy + ε)`.
pub fn dice_loss(tape: &mut Tape, probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let whole = RegionPartition::whole(spatial_of(tape, probs)?)?;
    region_dice_loss(tape, probs, labels, &whole, eps, false)
}

/// `1 − (TP + ε)/(TP + α·FP + β·FN + ε)`.
pub fn tversky_loss(tape: &mut Tape, probs: Var, labels: &[usize], alpha: f64, beta: f64, eps: f64) -> Result<Var> {
    let whole = RegionPartition::whole(spatial_of(tape, probs)?)?;
    let classes = tape.shape(probs).get(1).copied().unwrap_or(0);
    let coeffs = Coefficients::uniform(classes, 1, alpha, beta);
    region_tversky_loss(tape, probs, labels, &whole, &coeffs, eps, false)
}

pub fn region_dice_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    partition: &RegionPartition,
    eps: f64,
    normalize: bool,
) -> Result<Var> {
    let s = region_sums(tape, probs, labels, partition)?;
    let terms = dice_terms(tape, &s, eps)?;
    reduce_terms(tape, terms, s.classes, normalize)
}

/// Sum over regions of the per-region Tversky term.
pub fn region_tversky_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    partition: &RegionPartition,
    coeffs: &Coefficients,
    eps: f64,
    normalize: bool,
) -> Result<Var> {
    let s = region_sums(tape, probs, labels, partition)?;
    let terms = tversky_terms(tape, &s, coeffs, eps)?;
    reduce_terms(tape, terms, s.classes, normalize)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels.into())
}

fn spatial_of(tape: &Tape, x: Var) -> Result<[usize; 3]> {
    let s = tape.shape(x);
    if s.len() != 5 {
        return Err(Error::shape(format!("expected [N, C, D, H, W], got {s:?}")));
    }
    Ok([s[2], s[3], s[4]])
}

/// Soft confusion totals per class and region, accumulated over a window.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionCounts {
    classes: usize,
    regions: usize,
    pub tp: Vec<f64>,
    pub fp: Vec<f64>,
    pub fn_: Vec<f64>,
    observations: usize,
}

impl ConfusionCounts {
    pub fn new(classes: usize, regions: usize) -> Self {
        let z = vec![0.0; classes * regions];
        Self { classes, regions, tp: z.clone(), fp: z.clone(), fn_: z, observations: 0 }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    /// Adds the soft counts of `probs [N, C, D, H, W]` against `labels`.
    pub fn observe(&mut self, probs: &Tensor, labels: &[usize], partition: &RegionPartition) -> Result<()> {
        let s = probs.shape();
        if s.len() != 5 || s[1] != self.classes || s[2..] != partition.extents || partition.regions != self.regions {
            return Err(Error::shape(format!(
                "counts for {} classes / {} regions cannot observe {s:?}",
                self.classes, self.regions
            )));
        }
        let vol = partition.region_of.len();
        if labels.len() != s[0] * vol {
            return Err(Error::shape(format!("{} labels for {s:?}", labels.len())));
        }
        let p = probs.data();
        for b in 0..s[0] {
            for c in 0..self.classes {
                let plane = &p[(b * self.classes + c) * vol..][..vol];
                for (v, &pv) in plane.iter().enumerate() {
                    let idx = c * self.regions + partition.region_of[v];
                    if labels[b * vol + v] == c {
                        self.tp[idx] += pv;
                        self.fn_[idx] += 1.0 - pv;
                    } else {
                        self.fp[idx] += pv;
                    }
                }
            }
        }
        self.observations += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.classes, self.regions);
    }
}

/// Soft error mass below which a region keeps the fixed penalties.
pub const ADAPTIVE_FLOOR: f64 = 1.0;

/// `β = clamp(FN/(FP+FN+ε), 0.5, 0.9)`, `α = 1 − β`; the fixed pair when
/// the error mass is below `floor`.
pub fn adaptive_beta(fp: f64, fn_: f64, floor: f64) -> (f64, f64) {
    if fp + fn_ < floor {
        return (FIXED_ALPHA, FIXED_BETA);
    }
    let beta = (fn_ / (fp + fn_ + DEFAULT_EPSILON)).clamp(0.5, 0.9);
    (1.0 - beta, beta)
}

pub fn adaptive_alpha_beta(counts: &ConfusionCounts, floor: f64) -> Coefficients {
    let (c, k) = (counts.classes, counts.regions);
    let (alpha, beta): (Vec<f64>, Vec<f64>) =
        counts.fp.iter().zip(&counts.fn_).map(|(&fp, &fn_)| adaptive_beta(fp, fn_, floor)).unzip();
    Coefficients {
        alpha: Tensor::new(&[c, k], alpha).expect("sized above"),
        beta: Tensor::new(&[c, k], beta).expect("sized above"),
    }
}

/// The loss ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    Dice,
    Tversky,
    RegionDice,
    RegionTversky,
    CrossEntropy,
    /// Cross-entropy plus the `overlap` term.
    Compound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Overlap term added to cross-entropy by `compound`.
    pub overlap: LossVariant,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub partition: PartitionSpec,
    /// Divide region sums by the region count.
    pub normalize_regions: bool,
    pub adaptive: bool,
    /// Per-scale supervision weights, full resolution first; `2^-l`
    /// normalized when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Compound,
            overlap: LossVariant::RegionTversky,
            alpha: FIXED_ALPHA,
            beta: FIXED_BETA,
            epsilon: DEFAULT_EPSILON,
            partition: PartitionSpec::default(),
            normalize_regions: false,
            adaptive: false,
            scale_weights: None,
        }
    }
}

impl LossConfig {
    /// Compound CE + Dice, the usual baseline.
    pub fn baseline() -> Self {
        Self { overlap: LossVariant::Dice, ..Self::default() }
    }

    pub fn compound(overlap: LossVariant, alpha: f64, beta: f64) -> Self {
        Self { overlap, alpha, beta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if matches!(self.overlap, LossVariant::CrossEntropy | LossVariant::Compound) {
            return Err(Error::config("overlap must be an overlap loss"));
        }
        if self.uses_tversky() {
            if self.alpha < 0.0 || self.beta < 0.0 {
                return Err(Error::config("alpha and beta must be non-negative"));
            }
            if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!("alpha + beta must be 1, got {}", self.alpha + self.beta)));
            }
        }
        if let Some(w) = &self.scale_weights {
            if w.is_empty() || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("scale weights must be non-negative with a positive sum"));
            }
        }
        let (PartitionSpec::PerAxis(c) | PartitionSpec::BoxExtent(c)) = self.partition;
        if c.contains(&0) {
            return Err(Error::config("partition entries must be positive"));
        }
        Ok(())
    }

    fn overlap_kind(&self) -> Option<LossVariant> {
        match self.variant {
            LossVariant::CrossEntropy => None,
            LossVariant::Compound => Some(self.overlap),
            v => Some(v),
        }
    }

    fn uses_tversky(&self) -> bool {
        matches!(self.overlap_kind(), Some(LossVariant::Tversky | LossVariant::RegionTversky))
    }

    fn uses_regions(&self) -> bool {
        matches!(self.overlap_kind(), Some(LossVariant::RegionDice | LossVariant::RegionTversky))
    }

    /// Partition the overlap term uses at `extents`.
    pub fn partition_for(&self, extents: [usize; 3]) -> Result<RegionPartition> {
        if self.uses_regions() {
            self.partition.resolve(extents)
        } else {
            RegionPartition::whole(extents)
        }
    }

    /// Loss for one scale. `coeffs` overrides the configured α/β.
    pub fn loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        labels: &[usize],
        partition: &RegionPartition,
        coeffs: Option<&Coefficients>,
    ) -> Result<Var> {
        let ce = matches!(self.variant, LossVariant::CrossEntropy | LossVariant::Compound)
            .then(|| cross_entropy(tape, logits, labels))
            .transpose()?;
        let overlap = match self.overlap_kind() {
            None => None,
            Some(kind) => {
                let probs = tape.softmax(logits, 1)?;
                let classes = tape.shape(logits)[1];
                let eps = self.epsilon;
                let norm = self.normalize_regions;
                Some(match kind {
                    LossVariant::Dice | LossVariant::RegionDice => {
                        region_dice_loss(tape, probs, labels, partition, eps, norm)?
                    }
                    _ => {
                        let fixed;
                        let c = match coeffs {
                            Some(c) => c,
                            None => {
                                fixed = Coefficients::uniform(classes, partition.regions, self.alpha, self.beta);
                                &fixed
                            }
                        };
                        region_tversky_loss(tape, probs, labels, partition, c, eps, norm)?
                    }
                })
            }
        };
        match (ce, overlap) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => unreachable!("every variant has a term"),
        }
    }

    pub fn weights(&self, scales: usize) -> Result<Vec<f64>> {
        match &self.scale_weights {
            Some(w) if w.len() != scales => {
                Err(Error::shape(format!("{} scale weights for {scales} heads", w.len())))
            }
            Some(w) => {
                let s: f64 = w.iter().sum();
                Ok(w.iter().map(|v| v / s).collect())
            }
            None => Ok(supervision_weights(scales)),
        }
    }
}

/// `w_l ∝ 2^-l`, summing to 1.
pub fn supervision_weights(scales: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..scales).map(|l| 0.5f64.powi(l as i32)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Nearest-neighbour label resampling of `[N, from...]` to `[N, to...]`.
pub fn downsample_labels(labels: &[usize], batch: usize, from: [usize; 3], to: [usize; 3]) -> Result<Vec<usize>> {
    let vol: usize = from.iter().product();
    if labels.len() != batch * vol {
        return Err(Error::shape(format!("{} labels for batch {batch} of {from:?}", labels.len())));
    }
    if to.contains(&0) || (0..3).any(|a| to[a] > from[a]) {
        return Err(Error::shape(format!("cannot downsample {from:?} to {to:?}")));
    }
    if from == to {
        return Ok(labels.to_vec());
    }
    let idx = |a: usize, i: usize| i * from[a] / to[a];
    let mut out = Vec::with_capacity(batch * to.iter().product::<usize>());
    for b in 0..batch {
        for z in 0..to[0] {
            for y in 0..to[1] {
                for x in 0..to[2] {
                    out.push(labels[b * vol + (idx(0, z) * from[1] + idx(1, y)) * from[2] + idx(2, x)]);
                }
            }
        }
    }
    Ok(out)
}

/// Deep-supervision objective with cached per-scale labels and partitions.
#[derive(Clone, Debug)]
pub struct Supervision {
    config: LossConfig,
    weights: Vec<f64>,
    scales: Vec<Scale>,
}

#[derive(Clone, Debug)]
struct Scale {
    extents: [usize; 3],
    partition: RegionPartition,
    coeffs: Option<Coefficients>,
    counts: ConfusionCounts,
}

impl Supervision {
    /// `extents` per head, full resolution first.
    pub fn new(config: LossConfig, classes: usize, extents: &[[usize; 3]]) -> Result<Self> {
        config.validate()?;
        let weights = config.weights(extents.len())?;
        let scales = extents
            .iter()
            .map(|&e| {
                let partition = config.partition_for(e)?;
                let k = partition.regions;
                Ok(Scale {
                    extents: e,
                    partition,
                    coeffs: None,
                    counts: ConfusionCounts::new(classes, k),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, weights, scales })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn partition(&self, scale: usize) -> Option<&RegionPartition> {
        self.scales.get(scale).map(|s| &s.partition)
    }

    /// Current adaptive penalties of a scale, if any were derived.
    pub fn coefficients(&self, scale: usize) -> Option<&Coefficients> {
        self.scales.get(scale).and_then(|s| s.coeffs.as_ref())
    }

    /// `Σ_l w_l · loss(logits_l, labels_l)`; `labels` are full resolution.
    pub fn loss(&mut self, tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var> {
        if logits.len() != self.scales.len() {
            return Err(Error::shape(format!(
                "{} heads for {} supervision scales",
                logits.len(),
                self.scales.len()
            )));
        }
        let batch = tape.shape(logits[0])[0];
        let full = self.scales[0].extents;
        let mut total: Option<Var> = None;
        for (l, (&head, scale)) in logits.iter().zip(&mut self.scales).enumerate() {
            let shape = tape.shape(head);
            if shape.len() != 5 || shape[2..] != scale.extents {
                return Err(Error::shape(format!("head {l} has shape {shape:?}, expected extents {:?}", scale.extents)));
            }
            let lab = downsample_labels(labels, batch, full, scale.extents)?;
            if self.config.adaptive {
                let probs = crate::autodiff::softmax_values(tape.value(head), 1);
                scale.counts.observe(&probs, &lab, &scale.partition)?;
            }
            let term = self.config.loss(tape, head, &lab, &scale.partition, scale.coeffs.as_ref())?;
            let term = tape.scale(term, self.weights[l]);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::shape("no supervision scales"))
    }

    /// Re-derives adaptive penalties from the counts gathered since the
    /// last call and clears them. No-op unless adaptive.
    pub fn end_epoch(&mut self) {
        if !self.config.adaptive {
            return;
        }
        for s in &mut self.scales {
            if s.counts.observations() > 0 {
                s.coeffs = Some(adaptive_alpha_beta(&s.counts, ADAPTIVE_FLOOR));
            }
            s.counts.reset();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_of(tape: &mut Tape, p: &[f64]) -> Var {
        // binary [1, 2, 1, 1, len]: channel 1 is p
        let n = p.len();
        let mut data: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        data.extend_from_slice(p);
        tape.var("p", Tensor::new(&[1, 2, 1, 1, n], data).unwrap()).unwrap()
    }

    #[test]
    fn dice_hand_count() {
        let mut tape = Tape::new();
        let p = probs_of(&mut tape, &[1.0, 1.0, 0.0]);
        let l = dice_loss(&mut tape, p, &[1, 0, 0], 0.0).unwrap();
        assert!((tape.value(l).item().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let labels = [1, 0, 1, 1, 0, 0];
        let hard: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let inv: Vec<f64> = hard.iter().map(|v| 1.0 - v).collect();
        let mut tape = Tape::new();
        let p = probs_of(&mut tape, &hard);
        let d = dice_loss(&mut tape, p, &labels, DEFAULT_EPSILON).unwrap();
        let t = tversky_loss(&mut tape, p, &labels, 0.3, 0.7, DEFAULT_EPSILON).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 0.0);
        assert_eq!(tape.value(t).item().unwrap(), 0.0);
        let mut tape = Tape::new();
        let q = probs_of(&mut tape, &inv);
        let d = dice_loss(&mut tape, q, &labels, 1e-12).unwrap();
        assert!((tape.value(d).item().unwrap() - 1.0).abs() < 1e-11);
    }

    #[test]
    fn empty_region_is_lossless() {
        // second half has no target and no prediction
        let mut tape = Tape::new();
        let p = probs_of(&mut tape, &[0.8, 0.2, 0.0, 0.0]);
        let part = RegionPartition::with_box([1, 1, 4], [1, 1, 2]).unwrap();
        let c = Coefficients::uniform(2, 2, 0.3, 0.7);
        let s = region_sums(&mut tape, p, &[1, 0, 0, 0], &part).unwrap();
        let terms = tversky_terms(&mut tape, &s, &c, DEFAULT_EPSILON).unwrap();
        let t = tape.value(terms);
        assert_eq!(t.get(&[0, 1, 1]).unwrap(), 0.0);
        assert!(t.get(&[0, 1, 0]).unwrap() > 0.0);
    }

    #[test]
    fn partition_covers_grid() {
        let p = RegionPartition::with_box([5, 4, 3], [2, 4, 2]).unwrap();
        assert_eq!(p.regions(), 3 * 1 * 2);
        let mut counts = vec![0; p.regions()];
        for &r in p.region_of().iter() {
            counts[r] += 1;
        }
        // interior boxes 2·4·2, clipped ones smaller
        assert_eq!(counts, vec![16, 8, 16, 8, 8, 4]);
        assert_eq!(RegionPartition::split([24, 24, 24], [4, 4, 4]).unwrap().regions(), 64);
        assert_eq!(RegionPartition::split([3, 3, 3], [4, 4, 4]).unwrap().regions(), 27);
        assert!(RegionPartition::with_box([2, 2, 2], [0, 1, 1]).is_err());
    }

    #[test]
    fn partition_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let p = probs_of(&mut tape, &[0.5, 0.5]);
        let part = RegionPartition::whole([1, 1, 3]).unwrap();
        let c = Coefficients::uniform(2, 1, 0.3, 0.7);
        let e = region_tversky_loss(&mut tape, p, &[0, 1], &part, &c, 1e-5, false).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn out_of_range_probability_rejected() {
        let mut tape = Tape::new();
        let p = tape.var("p", Tensor::new(&[1, 2, 1, 1, 1], vec![-0.1, 1.1]).unwrap()).unwrap();
        assert!(matches!(dice_loss(&mut tape, p, &[1], 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn adaptive_rule() {
        assert_eq!(adaptive_beta(5.0, 5.0, 1.0).1, 0.5);
        assert_eq!(adaptive_beta(1.0, 1000.0, 1.0), (1.0 - 0.9, 0.9));
        let (a, b) = adaptive_beta(30.0, 70.0, 1.0);
        assert!((b - 0.7).abs() < 1e-6 && (a + b - 1.0).abs() < 1e-15);
        assert_eq!(adaptive_beta(0.1, 0.2, 1.0), (FIXED_ALPHA, FIXED_BETA));
    }

    #[test]
    fn uniform_cross_entropy() {
        let mut tape = Tape::new();
        let x = tape.var("x", Tensor::zeros(&[1, 2, 2, 2, 2])).unwrap();
        let ce = cross_entropy(&mut tape, x, &[0, 1, 0, 1, 1, 1, 0, 0]).unwrap();
        assert!((tape.value(ce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_downsampling_nearest() {
        let labels: Vec<usize> = (0..16).collect();
        let out = downsample_labels(&labels, 1, [1, 4, 4], [1, 2, 2]).unwrap();
        assert_eq!(out, vec![0, 2, 8, 10]);
        assert!(downsample_labels(&labels, 1, [1, 4, 4], [1, 8, 2]).is_err());
    }

    #[test]
    fn weights_halve_per_scale() {
        let w = supervision_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-15 && (w[1] / w[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation_and_toml() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::compound(LossVariant::RegionTversky, 0.3, 0.6).validate().is_err());
        // the α + β rule only binds Tversky variants
        assert!(LossConfig { alpha: 0.1, ..LossConfig::baseline() }.validate().is_ok());
        let cfg = LossConfig { adaptive: true, scale_weights: Some(vec![2.0, 1.0]), ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("variant = \"compound\""), "{text}");
        assert_eq!(toml::from_str::<LossConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn supervision_single_scale_equals_compound() {
        let cfg = LossConfig::default();
        let x = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        let labels = [0, 1, 1, 0, 1, 0, 0, 1];
        let mut sup = Supervision::new(cfg.clone(), 2, &[[2, 2, 2]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.var("x", x.clone()).unwrap();
        let a = sup.loss(&mut tape, &[v], &labels).unwrap();
        let part = cfg.partition_for([2, 2, 2]).unwrap();
        let b = cfg.loss(&mut tape, v, &labels, &part, None).unwrap();
        assert_eq!(tape.value(a).item().unwrap(), tape.value(b).item().unwrap());
    }
}

//! Layer norm (over the channel axis at every voxel or token) and batch norm
//! (over batch and spatial axes for every channel).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Layer,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Length of the normalized (layer) or per-channel (batch) axis.
    pub features: usize,
    pub eps: f64,
}

impl NormSpec {
    pub fn layer(features: usize) -> Self {
        Self {
            kind: NormKind::Layer,
            features,
            eps: DEFAULT_EPS,
        }
    }

    pub fn batch(features: usize) -> Self {
        Self {
            kind: NormKind::Batch,
            features,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 || self.features == 0 {
            return Err(Error::config(format!("invalid norm spec {self:?}")));
        }
        Ok(())
    }
}

/// Batch statistics observed by a train-mode batch norm; the variance is the
/// unbiased estimate, for the running average.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(tape: &Tape, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<usize> {
    let xs = tape.shape(x);
    if axis >= xs.len() {
        return Err(Error::shape(format!("norm axis {axis} for shape {xs:?}")));
    }
    let f = xs[axis];
    if tape.shape(gamma) != [f] || tape.shape(beta) != [f] {
        return Err(Error::shape(format!(
            "norm affine {:?}/{:?} for axis extent {f}",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    Ok(f)
}

/// Visits the members of each normalization group: with `across_batch` the
/// groups are the entries of `axis` (stats over everything else); otherwise the
/// groups are every position off `axis` (stats along `axis`).
fn groups(shape: &[usize], axis: usize, across_batch: bool) -> Vec<Vec<usize>> {
    let (outer, extent, inner) = split_axis(shape, axis);
    if across_batch {
        (0..extent)
            .map(|a| {
                (0..outer)
                    .flat_map(|o| ((o * extent + a) * inner)..((o * extent + a) * inner + inner))
                    .collect()
            })
            .collect()
    } else {
        (0..outer)
            .flat_map(|o| (0..inner).map(move |i| (0..extent).map(|a| (o * extent + a) * inner + i).collect()))
            .collect()
    }
}

/// Index into `gamma`/`beta` of flat element `i`.
fn feature_of(shape: &[usize], axis: usize, i: usize) -> usize {
    let (_, extent, inner) = split_axis(shape, axis);
    (i / inner) % extent
}

struct Normalized {
    y: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn normalize_groups(x: &Tensor, gamma: &[f64], beta: &[f64], axis: usize, across_batch: bool, eps: f64) -> Normalized {
    let d = x.data();
    let mut xhat = vec![0.0; d.len()];
    let groups = groups(x.shape(), axis, across_batch);
    let mut rstd = Vec::with_capacity(groups.len());
    let mut means = Vec::with_capacity(groups.len());
    let mut vars = Vec::with_capacity(groups.len());
    for grp in &groups {
        let m = grp.len() as f64;
        let mean = grp.iter().map(|&i| d[i]).sum::<f64>() / m;
        let var = grp.iter().map(|&i| (d[i] - mean).powi(2)).sum::<f64>() / m;
        let r = 1.0 / (var + eps).sqrt();
        for &i in grp {
            xhat[i] = (d[i] - mean) * r;
        }
        rstd.push(r);
        means.push(mean);
        vars.push(var);
    }
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, &xh)| {
            let f = feature_of(x.shape(), axis, i);
            gamma[f] * xh + beta[f]
        })
        .collect();
    Normalized {
        y,
        xhat,
        rstd,
        mean: means,
        var: vars,
    }
}

impl Tape {
    /// Layer norm over `axis` at every other position. Axis 1 of a volume is
    /// the per-voxel channel norm; the last axis of `[N, L, C]` tokens is the
    /// per-token norm.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        check_affine(self, x, gamma, beta, axis)?;
        let xv = self.value(x);
        let n = normalize_groups(xv, self.value(gamma).data(), self.value(beta).data(), axis, false, eps);
        let value = Tensor::from_raw(xv.shape().to_vec(), n.y);
        Ok(self.record(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                axis,
                across_batch: false,
                xhat: n.xhat,
                rstd: n.rstd,
            },
        ))
    }

    /// Train-mode batch norm over channel axis 1 of `[N, C, ...]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        check_affine(self, x, gamma, beta, 1)?;
        let xv = self.value(x);
        let count = xv.len() / xv.shape()[1];
        let n = normalize_groups(xv, self.value(gamma).data(), self.value(beta).data(), 1, true, eps);
        let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let stats = BatchStats {
            mean: n.mean,
            var: n.var.iter().map(|v| v * unbiased).collect(),
        };
        let value = Tensor::from_raw(xv.shape().to_vec(), n.y);
        let v = self.record(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                axis: 1,
                across_batch: true,
                xhat: n.xhat,
                rstd: n.rstd,
            },
        );
        Ok((v, stats))
    }

    /// Eval-mode batch norm with stored running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let f = check_affine(self, x, gamma, beta, 1)?;
        if mean.len() != f || var.len() != f {
            return Err(Error::shape("running statistics do not match channel count"));
        }
        let xv = self.value(x);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for (i, &v) in xv.data().iter().enumerate() {
            let c = feature_of(xv.shape(), 1, i);
            let xh = (v - mean[c]) * rstd[c];
            xhat.push(xh);
            y.push(g[c] * xh + b[c]);
        }
        let value = Tensor::from_raw(xv.shape().to_vec(), y);
        Ok(self.record(
            value,
            Op::NormFrozen {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }
}

pub(crate) fn backward(
    shape: &[usize],
    axis: usize,
    across_batch: bool,
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f = shape[axis];
    let mut gx = vec![0.0; g.len()];
    let mut gg = vec![0.0; f];
    let mut gb = vec![0.0; f];
    for i in 0..g.len() {
        let c = feature_of(shape, axis, i);
        gg[c] += g[i] * xhat[i];
        gb[c] += g[i];
    }
    for (grp, &r) in groups(shape, axis, across_batch).iter().zip(rstd) {
        let m = grp.len() as f64;
        let gxh = |i: usize| g[i] * gamma[feature_of(shape, axis, i)];
        let mean_g = grp.iter().map(|&i| gxh(i)).sum::<f64>() / m;
        let mean_gx = grp.iter().map(|&i| gxh(i) * xhat[i]).sum::<f64>() / m;
        for &i in grp {
            gx[i] = r * (gxh(i) - mean_g - xhat[i] * mean_gx);
        }
    }
    (gx, gg, gb)
}

pub(crate) fn frozen_backward(shape: &[usize], xhat: &[f64], rstd: &[f64], gamma: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f = shape[1];
    let mut gx = vec![0.0; g.len()];
    let mut gg = vec![0.0; f];
    let mut gb = vec![0.0; f];
    for i in 0..g.len() {
        let c = feature_of(shape, 1, i);
        gx[i] = g[i] * gamma[c] * rstd[c];
        gg[c] += g[i] * xhat[i];
        gb[c] += g[i];
    }
    (gx, gg, gb)
}

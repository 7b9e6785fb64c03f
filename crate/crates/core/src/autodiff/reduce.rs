use std::sync::Arc;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

impl Tape {
    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, extent, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &d[(o * extent + a) * inner..][..inner];
                for (dst, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Ok(self.record(Tensor::from_raw(shape, out), Op::SumAxis { x, axis }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {:?}", xv.shape())));
        }
        let out = softmax_values(xv, axis);
        Ok(self.record(out, Op::Softmax { x, axis }))
    }

    /// Mean softmax cross-entropy of `logits [N, C, ...]` against integer
    /// labels (one per `N·spatial` position, row-major).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() < 2 {
            return Err(Error::shape("cross-entropy logits need [N, C, ...]"));
        }
        let (n, c, inner) = split_axis(lv.shape(), 1);
        if labels.len() != n * inner {
            return Err(Error::shape(format!(
                "{} labels for logits {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_values(lv, 1);
        let p = probs.data();
        let d = lv.data();
        let mut total = 0.0;
        for b in 0..n {
            for i in 0..inner {
                let idx = |k: usize| (b * c + k) * inner + i;
                let m = (0..c).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (d[idx(k)] - m).exp()).sum::<f64>().ln();
                total += lse - d[idx(labels[b * inner + i])];
            }
        }
        let loss = total / (n * inner) as f64;
        Ok(self.record(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels,
                probs: p.to_vec(),
            },
        ))
    }

    /// Per-region sums of `x [N, C, spatial...]`: `region_of[v]` names the
    /// region of flat spatial voxel `v`. Output `[N, C, regions]`.
    pub fn box_sums(&mut self, x: Var, region_of: Arc<[usize]>, regions: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("box_sums needs [N, C, ...]"));
        }
        let (n, c, inner) = split_axis(xv.shape(), 1);
        if region_of.len() != inner || region_of.iter().any(|&r| r >= regions) {
            return Err(Error::config(format!(
                "region map of {} voxels does not cover {:?}",
                region_of.len(),
                xv.shape()
            )));
        }
        let d = xv.data();
        let mut out = vec![0.0; n * c * regions];
        for nc in 0..n * c {
            let src = &d[nc * inner..][..inner];
            let dst = &mut out[nc * regions..][..regions];
            for (v, &r) in src.iter().zip(region_of.iter()) {
                dst[r] += v;
            }
        }
        Ok(self.record(
            Tensor::from_raw(vec![n, c, regions], out),
            Op::BoxSums { x, region_of, regions },
        ))
    }
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * extent + a) * inner + i;
            let m = (0..extent).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..extent {
                let e = (d[idx(a)] - m).exp();
                out[idx(a)] = e;
                z += e;
            }
            for a in 0..extent {
                out[idx(a)] /= z;
            }
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

pub(super) fn sum_axis_backward(shape: &[usize], axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut gx = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for a in 0..extent {
            gx[(o * extent + a) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
        }
    }
    gx
}

pub(super) fn softmax_backward(y: &Tensor, axis: usize, g: &[f64]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * extent + a) * inner + i;
            let dot: f64 = (0..extent).map(|a| g[idx(a)] * yd[idx(a)]).sum();
            for a in 0..extent {
                gx[idx(a)] = yd[idx(a)] * (g[idx(a)] - dot);
            }
        }
    }
    gx
}

pub(super) fn xent_backward(shape: &[usize], labels: &[usize], probs: &[f64], g: f64) -> Vec<f64> {
    let (n, c, inner) = split_axis(shape, 1);
    let scale = g / (n * inner) as f64;
    let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for b in 0..n {
        for i in 0..inner {
            gx[(b * c + labels[b * inner + i]) * inner + i] -= scale;
        }
    }
    gx
}

pub(super) fn box_sums_backward(shape: &[usize], region_of: &[usize], regions: usize, g: &[f64]) -> Vec<f64> {
    let (n, c, inner) = split_axis(shape, 1);
    let mut gx = vec![0.0; n * c * inner];
    for nc in 0..n * c {
        let gr = &g[nc * regions..][..regions];
        for (dst, &r) in gx[nc * inner..][..inner].iter_mut().zip(region_of) {
            *dst = gr[r];
        }
    }
    gx
}

//! Eval-mode inference over non-overlapping tiles, and metrics.

use crate::error::{Error, Result};
use crate::harness::synth::VolumeSample;
use crate::metrics::{argmax_labels, metrics, Metrics};
use crate::net::Network;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

/// Runs `predict` on every `patch`-sized tile of `image [C, D, H, W]`
/// (zero-padded up to a multiple of the patch) and stitches the
/// `[1, K, patch]` outputs into `[K, D, H, W]`.
pub fn predict_tiled(
    image: &Tensor,
    patch: [usize; 3],
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 || patch.contains(&0) {
        return Err(Error::shape(format!("tiling {s:?} by {patch:?}")));
    }
    let (c, ext) = (s[0], [s[1], s[2], s[3]]);
    let tiles: [usize; 3] = std::array::from_fn(|a| ext[a].div_ceil(patch[a]));
    let pvol: usize = patch.iter().product();
    let vol: usize = ext.iter().product();
    let src = image.data();
    let mut out: Option<(usize, Vec<f64>)> = None;
    for tz in 0..tiles[0] {
        for ty in 0..tiles[1] {
            for tx in 0..tiles[2] {
                let origin = [tz * patch[0], ty * patch[1], tx * patch[2]];
                // copy the tile, zeros outside the volume
                let mut tile = vec![0.0; c * pvol];
                for_each_voxel(patch, origin, ext, |p, v| {
                    for ch in 0..c {
                        tile[ch * pvol + p] = src[ch * vol + v];
                    }
                });
                let y = predict(&Tensor::new(&[1, c, patch[0], patch[1], patch[2]], tile)?)?;
                let ys = y.shape();
                if ys.len() != 5 || ys[0] != 1 || ys[2..] != patch {
                    return Err(Error::shape(format!("tile prediction {ys:?} for patch {patch:?}")));
                }
                let k = ys[1];
                let (_, buf) = out.get_or_insert_with(|| (k, vec![0.0; k * vol]));
                let yd = y.data();
                for_each_voxel(patch, origin, ext, |p, v| {
                    for ch in 0..k {
                        buf[ch * vol + v] = yd[ch * pvol + p];
                    }
                });
            }
        }
    }
    let (k, buf) = out.expect("at least one tile");
    Tensor::new(&[k, ext[0], ext[1], ext[2]], buf)
}

/// Calls `f(tile_index, volume_index)` for tile voxels inside the volume.
fn for_each_voxel(patch: [usize; 3], origin: [usize; 3], ext: [usize; 3], mut f: impl FnMut(usize, usize)) {
    for z in 0..patch[0] {
        let gz = origin[0] + z;
        if gz >= ext[0] {
            break;
        }
        for y in 0..patch[1] {
            let gy = origin[1] + y;
            if gy >= ext[1] {
                break;
            }
            for x in 0..patch[2] {
                let gx = origin[2] + x;
                if gx >= ext[2] {
                    break;
                }
                f((z * patch[1] + y) * patch[2] + x, (gz * ext[1] + gy) * ext[2] + gx);
            }
        }
    }
}

/// Full-resolution logits `[K, D, H, W]` of one sample in eval mode.
pub fn infer(net: &Network, params: &ParamStore, image: &Tensor, scan: ScanMode) -> Result<Tensor> {
    if image.rank() != 4 || image.shape()[0] != net.in_channels {
        return Err(Error::Data(format!(
            "image {:?} for a network with {} input channels",
            image.shape(),
            net.in_channels
        )));
    }
    predict_tiled(image, net.plan.patch_size, |tile| {
        let mut ctx = Ctx::with_scan_mode(params, Mode::Eval, scan).frozen();
        let x = ctx.tape.constant(tile.clone());
        let logits = net.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(logits[0]).clone())
    })
}

pub struct EvalReport {
    pub per_sample: Vec<(String, Metrics)>,
    /// Counts pooled over every voxel of every sample.
    pub pooled: Metrics,
}

pub fn evaluate(net: &Network, params: &ParamStore, data: &[VolumeSample], scan: ScanMode) -> Result<EvalReport> {
    evaluate_with(data, net.classes, |s| infer(net, params, &s.image, scan))
}

/// Evaluation against any predictor returning `[K, D, H, W]` scores.
pub fn evaluate_with(
    data: &[VolumeSample],
    classes: usize,
    mut scores: impl FnMut(&VolumeSample) -> Result<Tensor>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("no evaluation samples".into()));
    }
    let mut all_pred = Vec::new();
    let mut all_target = Vec::new();
    let mut per_sample = Vec::with_capacity(data.len());
    for s in data {
        let y = scores(s)?;
        let ys = y.shape();
        let batched = y.reshape(&[&[1], ys].concat())?;
        let pred = argmax_labels(&batched)?;
        per_sample.push((s.id.clone(), metrics(&pred, &s.labels, classes)?));
        all_pred.extend(pred);
        all_target.extend_from_slice(&s.labels);
    }
    Ok(EvalReport { per_sample, pooled: metrics(&all_pred, &all_target, classes)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::SynthSpec;
    use crate::loss::one_hot;

    fn sample() -> VolumeSample {
        let spec = SynthSpec { extents: [7, 9, 5], radius: [1.5, 2.5], tw_band: [0.01, 0.5], classes: 3, seed: 1, ..Default::default() };
        spec.sample(0).unwrap()
    }

    #[test]
    fn tiling_reassembles_identity() {
        let s = sample();
        let out = predict_tiled(&s.image, [4, 4, 4], |t| Ok(t.clone())).unwrap();
        assert_eq!(out, s.image);
    }

    #[test]
    fn oracle_scores_one() {
        let s = sample();
        let r = evaluate_with(std::slice::from_ref(&s), 3, |s| {
            let oh = one_hot(&s.labels, 1, 3, &s.extents()).unwrap();
            let e = s.extents();
            oh.reshape(&[3, e[0], e[1], e[2]])
        })
        .unwrap();
        assert_eq!(r.pooled.mean_dsc(), 1.0);
        assert_eq!(r.pooled.miou(), 1.0);
    }

    #[test]
    fn empty_prediction_zero_recall() {
        let s = sample();
        let r = evaluate_with(std::slice::from_ref(&s), 3, |s| {
            let e = s.extents();
            Ok(Tensor::from_fn(&[3, e[0], e[1], e[2]], |i| if i < e.iter().product() { 1.0 } else { 0.0 }))
        })
        .unwrap();
        assert_eq!(r.pooled.mean_recall(), 0.0);
    }

    #[test]
    fn channel_mismatch_is_data_error() {
        let (net, params) = crate::net::build(&crate::net::micro_plan(), 2, 2, 0).unwrap();
        let s = sample();
        assert!(matches!(infer(&net, &params, &s.image, ScanMode::Sequential), Err(Error::Data(_))));
    }
}

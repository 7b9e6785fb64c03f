//! Throughput of the two scan paths and of hgConv per order.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Gating, HgConv};
use crate::blocks::hgconv::{MAX_ORDER, MIN_ORDER};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, Module, ParamStore};
use crate::ssm::{discretize, scan_with, ScanMode, DEFAULT_CHUNK};
use crate::tensor::Tensor;

/// Discretized scan inputs `(x, Ā, B̄, C, D)` for an `[L, C]` sequence with
/// state size `N`.
pub fn scan_instance(l: usize, c: usize, n: usize, seed: u64) -> Result<[Tensor; 5]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = Tensor::uniform(&[l, c], 1e-3, 0.5, &mut rng);
    let a = Tensor::uniform(&[c, n], -2.0, -0.05, &mut rng);
    let b = Tensor::randn(&[l, n], 1.0, &mut rng);
    let (abar, bbar) = discretize(&delta, &a, &b)?;
    let x = Tensor::randn(&[l, c], 1.0, &mut rng);
    let cm = Tensor::randn(&[l, n], 1.0, &mut rng);
    let d = Tensor::randn(&[c], 1.0, &mut rng);
    Ok([x, abar, bbar, cm, d])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanRow {
    pub length: usize,
    pub channels: usize,
    pub state: usize,
    pub sequential_s: f64,
    pub parallel_s: f64,
    /// State updates (`L·C·N`) per second.
    pub sequential_eps: f64,
    pub parallel_eps: f64,
    pub max_abs_diff: f64,
}

pub const SCAN_CSV_HEADER: [&str; 8] =
    ["length", "channels", "state", "sequential_s", "parallel_s", "sequential_eps", "parallel_eps", "max_abs_diff"];

fn best_of(reps: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<(f64, Tensor)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let y = f()?;
        best = best.min(t.elapsed().as_secs_f64());
        out = Some(y);
    }
    Ok((best, out.expect("ran at least once")))
}

/// Times both scan paths; fails if they disagree beyond 1e-10.
pub fn bench_scan(sizes: &[[usize; 3]], reps: usize, seed: u64) -> Result<Vec<ScanRow>> {
    sizes
        .iter()
        .map(|&[l, c, n]| {
            let [x, abar, bbar, cm, d] = scan_instance(l, c, n, seed)?;
            let run = |mode| scan_with(&x, &abar, &bbar, &cm, &d, mode, DEFAULT_CHUNK);
            let (ts, ys) = best_of(reps, || run(ScanMode::Sequential))?;
            let (tp, yp) = best_of(reps, || run(ScanMode::Parallel))?;
            let diff = ys.max_abs_diff(&yp);
            if !(diff <= 1e-10) {
                return Err(Error::contract(format!("scan paths differ by {diff} at L={l}, C={c}, N={n}")));
            }
            let elems = (l * c * n) as f64;
            Ok(ScanRow {
                length: l,
                channels: c,
                state: n,
                sequential_s: ts,
                parallel_s: tp,
                sequential_eps: elems / ts,
                parallel_eps: elems / tp,
                max_abs_diff: diff,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HgconvRow {
    pub order: usize,
    pub channels: usize,
    pub voxels: usize,
    pub seconds: f64,
    pub voxels_per_s: f64,
    /// Two FLOPs per multiply-accumulate.
    pub flops_per_voxel: usize,
}

pub const HGCONV_CSV_HEADER: [&str; 6] = ["order", "channels", "voxels", "seconds", "voxels_per_s", "flops_per_voxel"];

/// Forward timing of hgConv for every order at fixed width `channels`,
/// which must be divisible by `2^(max order − 1)`.
pub fn bench_hgconv(channels: usize, extents: [usize; 3], reps: usize, seed: u64) -> Result<Vec<HgconvRow>> {
    (MIN_ORDER..=MAX_ORDER)
        .map(|order| {
            let hg = HgConv::new("hg", channels, order, None, Gating::Additive)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ParamStore::from_decls(&hg.params(), &mut rng)?;
            let x = Tensor::randn(&[1, channels, extents[0], extents[1], extents[2]], 1.0, &mut rng);
            let (seconds, _) = best_of(reps, || {
                let mut ctx = Ctx::new(&params, Mode::Eval).frozen();
                let xv = ctx.tape.constant(x.clone());
                let y = hg.forward(&mut ctx, xv)?;
                Ok(ctx.tape.value(y).clone())
            })?;
            let voxels = extents.iter().product();
            Ok(HgconvRow {
                order,
                channels,
                voxels,
                seconds,
                voxels_per_s: voxels as f64 / seconds,
                flops_per_voxel: 2 * hg.macs_per_voxel(),
            })
        })
        .collect()
}

pub fn write_scan_csv<W: Write>(rows: &[ScanRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCAN_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.length.to_string(),
            r.channels.to_string(),
            r.state.to_string(),
            r.sequential_s.to_string(),
            r.parallel_s.to_string(),
            r.sequential_eps.to_string(),
            r.parallel_eps.to_string(),
            r.max_abs_diff.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_hgconv_csv<W: Write>(rows: &[HgconvRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HGCONV_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.order.to_string(),
            r.channels.to_string(),
            r.voxels.to_string(),
            r.seconds.to_string(),
            r.voxels_per_s.to_string(),
            r.flops_per_voxel.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_bench_checks_agreement() {
        let rows = bench_scan(&[[130, 2, 3]], 1, 1).unwrap();
        assert!(rows[0].max_abs_diff <= 1e-10);
        let mut buf = Vec::new();
        write_scan_csv(&rows, &mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), SCAN_CSV_HEADER);
        assert_eq!(rdr.records().count(), 1);
    }

    #[test]
    fn hgconv_flops_grow_with_order() {
        let rows = bench_hgconv(32, [2, 2, 2], 1, 0).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|w| w[1].flops_per_voxel > w[0].flops_per_voxel));
        let mut buf = Vec::new();
        write_hgconv_csv(&rows, &mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), HGCONV_CSV_HEADER);
    }
}

//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::layers::{Ctx, Mode, ParamStore};
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::config(format!("step must be positive, got {h}")));
    }
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let up = f(&x.with_value(i, v + h))?;
        let down = f(&x.with_value(i, v - h))?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { coordinate: i });
        }
        g.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), g))
}

/// Largest `|a − e| / max(|a|, |e|, floor)` over all entries.
pub fn max_rel_error(analytic: &Tensor, estimate: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, e)| (a - e).abs() / a.abs().max(e.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so entries near zero are
    /// judged on absolute error instead. Scaled by `max(1, Σ|terms|)` of the
    /// checked scalar, since differencing noise grows with it.
    pub floor: f64,
    /// Probe at most this many coordinates per tensor (sampled by seed).
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub scan_mode: ScanMode,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            mode: Mode::Train,
            scan_mode: ScanMode::Sequential,
        }
    }
}

/// Outcome for one named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares reverse-mode gradients against central differences for every
/// tensor in `store`. `build` reads its inputs through `ctx.param`; a
/// non-scalar output is contracted with fixed random weights first.
pub fn check_store(
    store: &ParamStore,
    build: impl Fn(&mut Ctx) -> Result<Var>,
    opts: &CheckOptions,
) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights: Option<Tensor> = None;
    // returns the scalar and the terms it sums
    let mut run = |ctx: &mut Ctx| -> Result<(Var, Var)> {
        let out = build(ctx)?;
        if ctx.tape.shape(out).is_empty() {
            return Ok((out, out));
        }
        let shape = ctx.tape.shape(out).to_vec();
        let w = weights.get_or_insert_with(|| Tensor::uniform(&shape, 0.5, 1.5, &mut rng)).clone();
        let w = ctx.tape.constant(w);
        let prod = ctx.tape.mul(out, w)?;
        Ok((ctx.tape.sum(prod), prod))
    };
    let mut ctx = Ctx::with_scan_mode(store, opts.mode, opts.scan_mode);
    let (loss, terms) = run(&mut ctx)?;
    let magnitude: f64 = ctx.tape.value(terms).data().iter().map(|v| v.abs()).sum();
    let floor = opts.floor * magnitude.max(1.0);
    let (grads, _) = ctx.finish(loss)?;

    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut reports = Vec::new();
    for (name, value) in store.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < value.len() => sample(&mut pick, value.len(), m).into_vec(),
            _ => (0..value.len()).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let mut probe = |v: f64| -> Result<f64> {
                let mut s = store.clone();
                s.set(name, value.with_value(i, v))?;
                let mut c = Ctx::with_scan_mode(&s, opts.mode, opts.scan_mode).frozen();
                let (l, _) = run(&mut c)?;
                Ok(c.tape.value(l).data()[0])
            };
            let x = value.data()[i];
            let (up, down) = (probe(x + opts.step)?, probe(x - opts.step)?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Oracle { coordinate: i });
            }
            let est = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[i];
            worst = worst.max((a - est).abs() / a.abs().max(est.abs()).max(floor));
        }
        reports.push(GroupReport {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_product() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, DEFAULT_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let x = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[1]), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8 && (g.data()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let x = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let err = finite_difference_grad(|t| Ok(1.0 / (t.data()[1] - DEFAULT_STEP)), &x, DEFAULT_STEP).unwrap_err();
        assert!(matches!(err, Error::Oracle { coordinate: 1 }));
    }
}

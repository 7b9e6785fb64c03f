//! Selective state-space layer: input-dependent projections, zero-order-hold
//! discretization and the diagonal linear recurrence
//!
//! ```text
//! h_t = Ā_t ∘ h_{t−1} + B̄_t x_t        y_t = ⟨C_t, h_t⟩ + D ∘ x_t
//! ```
//!
//! evaluated either left to right or by a chunked associative scan.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Ctx, Init, Module, ParamDecl};
use crate::tensor::Tensor;

pub const DEFAULT_STATE_SIZE: usize = 16;
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ScanMode::Sequential),
            "parallel" => Ok(ScanMode::Parallel),
            _ => Err(Error::config(format!("unknown scan mode `{s}`"))),
        }
    }
}

/// One step of the recurrence as an affine map `h ↦ a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub const IDENTITY: ScanElement = ScanElement { a: 1.0, b: 0.0 };

    /// `self` applied first, then `next`.
    pub fn combine(self, next: ScanElement) -> ScanElement {
        ScanElement {
            a: self.a * next.a,
            b: next.a * self.b + next.b,
        }
    }
}

/// `expm1(z)/z`, so that `B̄ = Δ·φ(ΔA)·B`.
fn phi(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + z / 2.0
    } else {
        z.exp_m1() / z
    }
}

fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z.powi(3) / 30.0 + z.powi(4) / 144.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Runs `lanes` independent recurrences of length `len` laid out `[len, lanes]`
/// and returns every state, same layout.
fn scan_lanes(abar: &[f64], bx: &[f64], lanes: usize, len: usize, mode: ScanMode, chunk: usize) -> Vec<f64> {
    let mut states = vec![0.0; len * lanes];
    match mode {
        ScanMode::Sequential => rescan(abar, bx, &vec![0.0; lanes], &mut states, lanes),
        ScanMode::Parallel => {
            let step = chunk.max(1) * lanes;
            // reduce each chunk to one element per lane
            let aggregates: Vec<Vec<ScanElement>> = abar
                .par_chunks(step)
                .zip(bx.par_chunks(step))
                .map(|(a, b)| {
                    let mut acc = vec![ScanElement::IDENTITY; lanes];
                    for (ar, br) in a.chunks(lanes).zip(b.chunks(lanes)) {
                        for ((e, &a), &b) in acc.iter_mut().zip(ar).zip(br) {
                            *e = e.combine(ScanElement { a, b });
                        }
                    }
                    acc
                })
                .collect();
            let mut carries = Vec::with_capacity(aggregates.len());
            let mut carry = vec![0.0; lanes];
            for agg in &aggregates {
                carries.push(carry.clone());
                for (h, e) in carry.iter_mut().zip(agg) {
                    *h = e.a * *h + e.b;
                }
            }
            states
                .par_chunks_mut(step)
                .zip(abar.par_chunks(step).zip(bx.par_chunks(step)))
                .zip(carries.par_iter())
                .for_each(|((out, (a, b)), seed)| rescan(a, b, seed, out, lanes));
        }
    }
    states
}

fn rescan(abar: &[f64], bx: &[f64], seed: &[f64], out: &mut [f64], lanes: usize) {
    let mut h = seed.to_vec();
    for ((ar, br), or) in abar.chunks(lanes).zip(bx.chunks(lanes)).zip(out.chunks_mut(lanes)) {
        for i in 0..lanes {
            h[i] = ar[i] * h[i] + br[i];
        }
        or.copy_from_slice(&h);
    }
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(format!("{what}: expected {shape:?}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Zero-order hold: `Ā = exp(ΔA)` and `B̄ = (exp(ΔA) − 1)/A · B`, both `[L, C, N]`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let [l, c] = *delta.shape() else {
        return Err(Error::shape(format!("delta must be [L, C], got {:?}", delta.shape())));
    };
    let [ac, n] = *a.shape() else {
        return Err(Error::shape(format!("A must be [C, N], got {:?}", a.shape())));
    };
    if ac != c {
        return Err(Error::shape(format!("A {:?} vs delta {:?}", a.shape(), delta.shape())));
    }
    expect_shape(b, &[l, n], "B")?;
    if let Some(i) = delta.data().iter().position(|&d| d <= 0.0) {
        return Err(Error::contract(format!("delta must be positive (flat index {i})")));
    }
    let (dd, ad, bd) = (delta.data(), a.data(), b.data());
    let mut abar = Vec::with_capacity(l * c * n);
    let mut bbar = Vec::with_capacity(l * c * n);
    for t in 0..l {
        for ch in 0..c {
            let dt = dd[t * c + ch];
            for s in 0..n {
                let z = dt * ad[ch * n + s];
                abar.push(z.exp());
                bbar.push(dt * phi(z) * bd[t * n + s]);
            }
        }
    }
    Ok((Tensor::from_raw(vec![l, c, n], abar), Tensor::from_raw(vec![l, c, n], bbar)))
}

/// Left-to-right recurrence with `h₀ = 0`.
pub fn scan_sequential(x: &Tensor, abar: &Tensor, bbar: &Tensor, c_out: &Tensor, d: &Tensor) -> Result<Tensor> {
    scan_with(x, abar, bbar, c_out, d, ScanMode::Sequential, DEFAULT_CHUNK)
}

pub fn scan_parallel(x: &Tensor, abar: &Tensor, bbar: &Tensor, c_out: &Tensor, d: &Tensor) -> Result<Tensor> {
    scan_with(x, abar, bbar, c_out, d, ScanMode::Parallel, DEFAULT_CHUNK)
}

/// Scan over `x [L, C]` with `Ā, B̄ [L, C, N]`, `C_out [L, N]`, `D [C]`.
pub fn scan_with(
    x: &Tensor,
    abar: &Tensor,
    bbar: &Tensor,
    c_out: &Tensor,
    d: &Tensor,
    mode: ScanMode,
    chunk: usize,
) -> Result<Tensor> {
    let [l, c] = *x.shape() else {
        return Err(Error::shape(format!("x must be [L, C], got {:?}", x.shape())));
    };
    let [_, _, n] = *abar.shape() else {
        return Err(Error::shape(format!("Ā must be [L, C, N], got {:?}", abar.shape())));
    };
    expect_shape(abar, &[l, c, n], "Ā")?;
    expect_shape(bbar, &[l, c, n], "B̄")?;
    expect_shape(c_out, &[l, n], "C")?;
    expect_shape(d, &[c], "D")?;
    let xd = x.data();
    let bx: Vec<f64> = bbar.data().iter().enumerate().map(|(i, b)| b * xd[i / n]).collect();
    let states = scan_lanes(abar.data(), &bx, c * n, l, mode, chunk);
    Ok(Tensor::from_raw(vec![l, c], readout(&states, xd, c_out.data(), d.data(), l, c, n)))
}

fn readout(states: &[f64], x: &[f64], c_out: &[f64], d: &[f64], l: usize, c: usize, n: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(l * c);
    for t in 0..l {
        let ct = &c_out[t * n..][..n];
        for ch in 0..c {
            let h = &states[(t * c + ch) * n..][..n];
            let dot: f64 = h.iter().zip(ct).map(|(a, b)| a * b).sum();
            y.push(dot + d[ch] * x[t * c + ch]);
        }
    }
    y
}

impl Tape {
    /// Batched selective scan: `x, delta [N, L, E]`, `a [E, S]`,
    /// `b, c [N, L, S]`, `d [E]` → `[N, L, E]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let [bn, l, e] = *self.shape(x) else {
            return Err(Error::shape(format!("scan input must be [N, L, E], got {:?}", self.shape(x))));
        };
        let [_, s] = *self.shape(a) else {
            return Err(Error::shape(format!("A must be [E, S], got {:?}", self.shape(a))));
        };
        expect_shape(self.value(delta), &[bn, l, e], "delta")?;
        expect_shape(self.value(a), &[e, s], "A")?;
        expect_shape(self.value(b), &[bn, l, s], "B")?;
        expect_shape(self.value(c), &[bn, l, s], "C")?;
        expect_shape(self.value(d), &[e], "D")?;
        if let Some(i) = self.value(delta).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::contract(format!("delta must be positive (flat index {i})")));
        }
        if let Some(i) = self.value(a).data().iter().position(|&v| v >= 0.0) {
            return Err(Error::contract(format!("A must be negative (flat index {i})")));
        }
        let (xd, dd, ad) = (self.value(x).data(), self.value(delta).data(), self.value(a).data());
        let (bd, cd, skip) = (self.value(b).data(), self.value(c).data(), self.value(d).data());
        let lanes = e * s;
        let mut states = Vec::with_capacity(bn * l * lanes);
        let mut y = Vec::with_capacity(bn * l * e);
        for n in 0..bn {
            let mut abar = Vec::with_capacity(l * lanes);
            let mut bx = Vec::with_capacity(l * lanes);
            for t in 0..l {
                let row = (n * l + t) * e;
                let brow = &bd[(n * l + t) * s..][..s];
                for ch in 0..e {
                    let (dt, xv) = (dd[row + ch], xd[row + ch]);
                    for (st, &bv) in brow.iter().enumerate() {
                        let z = dt * ad[ch * s + st];
                        abar.push(z.exp());
                        bx.push(dt * phi(z) * bv * xv);
                    }
                }
            }
            let h = scan_lanes(&abar, &bx, lanes, l, self.scan_mode, DEFAULT_CHUNK);
            let base = n * l;
            y.extend(readout(
                &h,
                &xd[base * e..][..l * e],
                &cd[base * s..][..l * s],
                skip,
                l,
                e,
                s,
            ));
            states.extend(h);
        }
        Ok(self.record(
            Tensor::from_raw(vec![bn, l, e], y),
            Op::SelectiveScan {
                inputs: [x, delta, a, b, c, d],
                states,
            },
        ))
    }
}

/// Reverse adjoint recurrence; returns gradients for `[x, delta, a, b, c, d]`.
pub(crate) fn selective_scan_backward(inputs: &[&Tensor; 6], states: &[f64], g: &[f64]) -> [Vec<f64>; 6] {
    let [x, delta, a, b, c, d] = *inputs;
    let (bn, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = a.shape()[1];
    let lanes = e * s;
    let (xd, dd, ad, bd, cd, skip) = (x.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gdelta = vec![0.0; dd.len()];
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gd = vec![0.0; e];
    for n in 0..bn {
        let mut gh = vec![0.0; lanes];
        for t in (0..l).rev() {
            let row = (n * l + t) * e;
            let srow = (n * l + t) * s;
            let h_t = &states[(n * l + t) * lanes..][..lanes];
            let h_prev = (t > 0).then(|| &states[(n * l + t - 1) * lanes..][..lanes]);
            for ch in 0..e {
                let gy = g[row + ch];
                let (dt, xv) = (dd[row + ch], xd[row + ch]);
                gd[ch] += gy * xv;
                gx[row + ch] += gy * skip[ch];
                let mut gdt = 0.0;
                let mut gxv = 0.0;
                for st in 0..s {
                    let lane = ch * s + st;
                    let (cv, bv, av) = (cd[srow + st], bd[srow + st], ad[lane]);
                    gc[srow + st] += gy * h_t[lane];
                    let ghv = gh[lane] + gy * cv;
                    let z = dt * av;
                    let abar = z.exp();
                    let ph = phi(z);
                    let hp = h_prev.map_or(0.0, |h| h[lane]);
                    // h_t = abar·h_{t−1} + dt·φ(z)·b·x
                    gxv += ghv * dt * ph * bv;
                    let gbbar = ghv * xv;
                    let gz = ghv * hp * abar + gbbar * dt * phi_prime(z) * bv;
                    gdt += gbbar * ph * bv + gz * av;
                    ga[lane] += gz * dt;
                    gb[srow + st] += gbbar * dt * ph;
                    gh[lane] = ghv * abar;
                }
                gdelta[row + ch] += gdt;
                gx[row + ch] += gxv;
            }
        }
    }
    [gx, gdelta, ga, gb, gc, gd]
}

/// Learned parameters of one selective SSM layer over `E` channels with an
/// `S`-dimensional state per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSsm {
    pub name: String,
    pub channels: usize,
    pub state: usize,
}

pub type SelectiveSSMParams = SelectiveSsm;

impl SelectiveSsm {
    pub fn new(name: impl Into<String>, channels: usize, state: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            state,
        }
    }

    fn key(&self, p: &str) -> String {
        format!("{}.{p}", self.name)
    }

    /// `tokens [N, L, E] → [N, L, E]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w_b = ctx.param(&self.key("w_b"))?;
        let w_c = ctx.param(&self.key("w_c"))?;
        let w_dt = ctx.param(&self.key("w_dt"))?;
        let dt_bias = ctx.param(&self.key("dt_bias"))?;
        let a_log = ctx.param(&self.key("a_log"))?;
        let d = ctx.param(&self.key("d"))?;
        let t = &mut ctx.tape;
        let b = t.linear(x, w_b, None)?;
        let c = t.linear(x, w_c, None)?;
        let pre = t.linear(x, w_dt, Some(dt_bias))?;
        let delta = t.softplus(pre);
        let a_exp = t.exp(a_log);
        let a = t.neg(a_exp);
        t.selective_scan(x, delta, a, b, c, d)
    }
}

impl Module for SelectiveSsm {
    fn params(&self) -> Vec<ParamDecl> {
        let (e, s) = (self.channels, self.state);
        let a_log = (0..e * s).map(|i| ((i % s) as f64 + 1.0).ln()).collect();
        vec![
            ParamDecl::new(self.key("w_b"), &[e, s], Init::HeNormal { fan_in: e }),
            ParamDecl::new(self.key("w_c"), &[e, s], Init::HeNormal { fan_in: e }),
            ParamDecl::new(self.key("w_dt"), &[e, e], Init::Normal { std: 0.1 / (e as f64).sqrt() }),
            ParamDecl::new(self.key("dt_bias"), &[e], Init::InverseSoftplusLogUniform { lo: 1e-3, hi: 1e-1 }),
            ParamDecl::new(self.key("a_log"), &[e, s], Init::Values(a_log)),
            ParamDecl::new(self.key("d"), &[e], Init::Ones),
        ]
    }
}

//! Direct 3D convolution kernels (cross-correlation, zero padding, groups).
//!
//! Layouts: input `[N, C_in, D, H, W]`, weight `[C_out, C_in/groups, kd, kh, kw]`.
//! Every kernel writes disjoint output slices from a fixed loop order, so the
//! results do not depend on how rayon splits the work.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Conv3dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }

    /// `k`×`k`×`k` kernel with "same" padding at stride 1.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, [k; 3]).with_padding([k / 2; 3])
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, [1; 3])
    }

    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self::same(channels, channels, k).with_groups(channels)
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels == 0
            || self.out_channels == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::config(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::config(format!(
                "kernel {:?} / stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [
            self.out_channels,
            self.in_channels / self.groups,
            kd,
            kh,
            kw,
        ]
    }

    /// floor((in + 2·pad − k)/stride) + 1 per axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::config(format!(
                    "axis {a}: extent {} (padded {padded}) smaller than kernel {}",
                    input[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Extents of the transposed convolution: (in − 1)·stride − 2·pad + k.
    pub fn transposed_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::config(format!(
                    "axis {a}: transposed extent collapses"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    /// Multiply-accumulate count of one forward pass, per batch element.
    pub fn macs(&self, output: [usize; 3]) -> usize {
        let per_out = self.in_channels / self.groups * self.kernel.iter().product::<usize>();
        self.out_channels * output.iter().product::<usize>() * per_out
    }
}

/// Fully resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub spec: Conv3dSpec,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn cin_g(&self) -> usize {
        self.spec.in_channels / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.spec.out_channels / self.spec.groups
    }

    fn k_vol(&self) -> usize {
        self.spec.kernel.iter().product()
    }
}

/// Output indices `o` in `[lo, hi)` whose input tap `o·stride + k − pad` lies
/// inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Accumulates `wv · x_row[tap(o)]` into `y_row[o]` for `o` in `[lo, hi)`.
#[inline]
fn row_gather(y_row: &mut [f64], x_row: &[f64], wv: f64, lo: usize, hi: usize, k: usize, stride: usize, pad: usize) {
    if stride == 1 {
        let start = lo + k - pad;
        for (y, x) in y_row[lo..hi].iter_mut().zip(&x_row[start..start + (hi - lo)]) {
            *y += wv * x;
        }
    } else {
        for o in lo..hi {
            y_row[o] += wv * x_row[o * stride + k - pad];
        }
    }
}

/// Transpose of [`row_gather`]: scatters `wv · y_row[o]` into `x_row[tap(o)]`.
#[inline]
fn row_scatter(x_row: &mut [f64], y_row: &[f64], wv: f64, lo: usize, hi: usize, k: usize, stride: usize, pad: usize) {
    if stride == 1 {
        let start = lo + k - pad;
        for (x, y) in x_row[start..start + (hi - lo)].iter_mut().zip(&y_row[lo..hi]) {
            *x += wv * y;
        }
    } else {
        for o in lo..hi {
            x_row[o * stride + k - pad] += wv * y_row[o];
        }
    }
}

#[inline]
fn row_dot(x_row: &[f64], y_row: &[f64], lo: usize, hi: usize, k: usize, stride: usize, pad: usize) -> f64 {
    if stride == 1 {
        let start = lo + k - pad;
        x_row[start..start + (hi - lo)]
            .iter()
            .zip(&y_row[lo..hi])
            .map(|(x, y)| x * y)
            .sum()
    } else {
        (lo..hi).map(|o| x_row[o * stride + k - pad] * y_row[o]).sum()
    }
}

/// Visits every (output row, input row, kernel tap) triple that contributes
/// to channel pair (ci, co): calls `f(out_row_offset, in_row_offset, kd, kh, kw)`.
#[inline]
fn for_each_row_pair(g: &ConvGeom, mut f: impl FnMut(usize, usize, [usize; 3])) {
    let [di, hi_, wi] = g.input;
    let [dout, hout, wout] = g.output;
    let [kd_n, kh_n, kw_n] = g.spec.kernel;
    let [sd, sh, _] = g.spec.stride;
    let [pd, ph, _] = g.spec.padding;
    let _ = wout;
    for kd in 0..kd_n {
        let (d_lo, d_hi) = valid_range(dout, di, kd, sd, pd);
        for od in d_lo..d_hi {
            let id = od * sd + kd - pd;
            for kh in 0..kh_n {
                let (h_lo, h_hi) = valid_range(hout, hi_, kh, sh, ph);
                for oh in h_lo..h_hi {
                    let ih = oh * sh + kh - ph;
                    let out_off = (od * hout + oh) * g.output[2];
                    let in_off = (id * hi_ + ih) * wi;
                    for kw in 0..kw_n {
                        f(out_off, in_off, [kd, kh, kw]);
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a [m, k]` (or `[k, m]` when
/// `a_t`), `b [k, n]` (or `[n, k]` when `b_t`) and `c [m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided `c = a·b + beta·c` with `a [m, k]`, `b [k, n]`, `c [m, n]` given
/// as (row stride, column stride) pairs.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
    sc: (usize, usize),
) {
    let last = |rows: usize, cols: usize, (r, c): (usize, usize)| (rows - 1) * r + (cols - 1) * c;
    assert!(a.len() > last(m, k, sa) && b.len() > last(k, n, sb) && c.len() > last(m, n, sc));
    // SAFETY: the assert bounds the largest offset each operand's strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Stride-1 dense convolution on the zero-padded grid: every kernel tap is a
/// constant offset into the flattened padded input, so each tap is one GEMM
/// over all padded positions. Positions that fall in the halo are computed
/// and discarded.
struct Shifted {
    padded: [usize; 3],
    /// Number of padded-grid positions that cover every output voxel.
    span: usize,
    offsets: Vec<usize>,
}

impl Shifted {
    fn new(g: &ConvGeom) -> Self {
        let p = [0, 1, 2].map(|a| g.input[a] + 2 * g.spec.padding[a]);
        let [kd, kh, kw] = g.spec.kernel;
        let mut offsets = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    offsets.push((a * p[1] + b) * p[2] + c);
                }
            }
        }
        let [od, oh, ow] = g.output;
        Self {
            padded: p,
            span: ((od - 1) * p[1] + oh - 1) * p[2] + ow,
            offsets,
        }
    }

    fn vol(&self) -> usize {
        self.padded.iter().product()
    }

    /// Copies each channel of `x` into the interior of a zero grid.
    fn pad(&self, x: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
        let (p, vp) = (self.padded, self.vol());
        let [d, h, w] = g.input;
        let [pd, ph, pw] = g.spec.padding;
        let mut out = vec![0.0; channels * vp];
        for (c, dst) in out.chunks_mut(vp).enumerate() {
            let src = &x[c * d * h * w..][..d * h * w];
            for (i, row) in src.chunks(w).enumerate() {
                let (zd, zh) = (i / h, i % h);
                dst[((zd + pd) * p[1] + zh + ph) * p[2] + pw..][..w].copy_from_slice(row);
            }
        }
        out
    }

    /// Output voxel `(d, h, w)` lives at padded position `(d·P_h + h)·P_w + w`.
    fn out_rows(&self, g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [_, oh, ow] = g.output;
        let p = self.padded;
        (0..g.output[0] * oh).map(move |i| ((i / oh * p[1] + i % oh) * p[2], i * ow))
    }
}

fn shifted_forward(x_n: &[f64], w: &[f64], g: &ConvGeom, y_n: &mut [f64]) {
    let sh = Shifted::new(g);
    let (cin, cout, k_vol, out_vol) = (g.spec.in_channels, g.spec.out_channels, g.k_vol(), g.out_vol());
    let (vp, span, ow) = (sh.vol(), sh.span, g.output[2]);
    let xp = sh.pad(x_n, cin, g);
    let mut yp = vec![0.0; cout * span];
    for (k, &off) in sh.offsets.iter().enumerate() {
        gemm_strided(cout, cin, span, &w[k..], (cin * k_vol, k_vol), &xp[off..], (vp, 1), 1.0, &mut yp, (span, 1));
    }
    for co in 0..cout {
        let (src, dst) = (&yp[co * span..][..span], &mut y_n[co * out_vol..][..out_vol]);
        for (ps, os) in sh.out_rows(g) {
            for (d, s) in dst[os..os + ow].iter_mut().zip(&src[ps..ps + ow]) {
                *d += s;
            }
        }
    }
}

/// Spreads `gy` over the padded-position span, zero in the halo.
fn shifted_grad_out(sh: &Shifted, gy_n: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cout, out_vol, span, ow) = (g.spec.out_channels, g.out_vol(), sh.span, g.output[2]);
    let mut gp = vec![0.0; cout * span];
    for co in 0..cout {
        let (src, dst) = (&gy_n[co * out_vol..][..out_vol], &mut gp[co * span..][..span]);
        for (ps, os) in sh.out_rows(g) {
            dst[ps..ps + ow].copy_from_slice(&src[os..os + ow]);
        }
    }
    gp
}

/// Positions per block in the backward passes; bounds the patch buffer.
const SPAN_BLOCK: usize = 2048;

fn shifted_backward_input(gy_n: &[f64], w: &[f64], g: &ConvGeom, gx_n: &mut [f64]) {
    let sh = Shifted::new(g);
    let (cin, cout, k_vol) = (g.spec.in_channels, g.spec.out_channels, g.k_vol());
    let (vp, span) = (sh.vol(), sh.span);
    let gp = shifted_grad_out(&sh, gy_n, g);
    let mut gxp = vec![0.0; cin * vp];
    let mut rows = vec![0.0; cin * k_vol * SPAN_BLOCK.min(span)];
    for start in (0..span).step_by(SPAN_BLOCK) {
        let len = SPAN_BLOCK.min(span - start);
        // rows[(ci, k), p] = Σ_co w[co, ci, k] · gy[co, start + p]
        gemm_strided(cin * k_vol, cout, len, w, (1, cin * k_vol), &gp[start..], (span, 1), 0.0, &mut rows, (len, 1));
        for (r, row) in rows.chunks(len).take(cin * k_vol).enumerate() {
            let (ci, k) = (r / k_vol, r % k_vol);
            let dst = &mut gxp[ci * vp + sh.offsets[k] + start..][..len];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let [d, h, wd] = g.input;
    let [pd, ph, pw] = g.spec.padding;
    let p = sh.padded;
    for ci in 0..cin {
        let src = &gxp[ci * vp..][..vp];
        for (i, row) in gx_n[ci * d * h * wd..][..d * h * wd].chunks_mut(wd).enumerate() {
            let start = ((i / h + pd) * p[1] + i % h + ph) * p[2] + pw;
            row.copy_from_slice(&src[start..start + wd]);
        }
    }
}

fn shifted_backward_weight(x_n: &[f64], gy_n: &[f64], g: &ConvGeom, gw: &mut [f64]) {
    let sh = Shifted::new(g);
    let (cin, cout, k_vol) = (g.spec.in_channels, g.spec.out_channels, g.k_vol());
    let (vp, span) = (sh.vol(), sh.span);
    let xp = sh.pad(x_n, cin, g);
    let gp = shifted_grad_out(&sh, gy_n, g);
    let mut rows = vec![0.0; cin * k_vol * SPAN_BLOCK.min(span)];
    for start in (0..span).step_by(SPAN_BLOCK) {
        let len = SPAN_BLOCK.min(span - start);
        // row (ci, k) holds x[ci, off_k + start ..][..len]
        for (r, row) in rows.chunks_mut(len).take(cin * k_vol).enumerate() {
            let (ci, k) = (r / k_vol, r % k_vol);
            row.copy_from_slice(&xp[ci * vp + sh.offsets[k] + start..][..len]);
        }
        gemm_strided(cout, len, cin * k_vol, &gp[start..], (span, 1), &rows, (1, len), 1.0, gw, (cin * k_vol, 1));
    }
}

/// Patch matrix `[C_in·k_vol, out_vol]` of one sample (groups = 1).
fn im2col(x_n: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_vol, out_vol, k_vol) = (g.in_vol(), g.out_vol(), g.k_vol());
    let [kh_n, kw_n] = [g.spec.kernel[1], g.spec.kernel[2]];
    let (wout, win, sw, pw) = (g.output[2], g.input[2], g.spec.stride[2], g.spec.padding[2]);
    let mut col = vec![0.0; g.spec.in_channels * k_vol * out_vol];
    col.par_chunks_mut(k_vol * out_vol).enumerate().for_each(|(ci, col_c)| {
        let x_ch = &x_n[ci * in_vol..][..in_vol];
        for_each_row_pair(g, |out_off, in_off, [kd, kh, kw]| {
            let (lo, hi) = valid_range(wout, win, kw, sw, pw);
            if lo < hi {
                let row = &mut col_c[((kd * kh_n + kh) * kw_n + kw) * out_vol + out_off..][..wout];
                row_gather(row, &x_ch[in_off..in_off + win], 1.0, lo, hi, kw, sw, pw);
            }
        });
    });
    col
}

/// Adjoint of [`im2col`], accumulated into `gx_n`.
fn col2im(col: &[f64], g: &ConvGeom, gx_n: &mut [f64]) {
    let (in_vol, out_vol, k_vol) = (g.in_vol(), g.out_vol(), g.k_vol());
    let [kh_n, kw_n] = [g.spec.kernel[1], g.spec.kernel[2]];
    let (wout, win, sw, pw) = (g.output[2], g.input[2], g.spec.stride[2], g.spec.padding[2]);
    gx_n.par_chunks_mut(in_vol).enumerate().for_each(|(ci, gx_ch)| {
        let col_c = &col[ci * k_vol * out_vol..][..k_vol * out_vol];
        for_each_row_pair(g, |out_off, in_off, [kd, kh, kw]| {
            let (lo, hi) = valid_range(wout, win, kw, sw, pw);
            if lo < hi {
                let row = &col_c[((kd * kh_n + kh) * kw_n + kw) * out_vol + out_off..][..wout];
                row_scatter(&mut gx_ch[in_off..in_off + win], row, 1.0, lo, hi, kw, sw, pw);
            }
        });
    });
}

impl ConvGeom {
    /// Dense convolutions run as GEMMs over the patch matrix.
    fn dense(&self) -> bool {
        self.spec.groups == 1
    }

    fn shiftable(&self) -> bool {
        self.dense() && self.spec.stride == [1; 3] && self.k_vol() > 1
    }

    /// A 1×1×1 stride-1 conv needs no patch matrix.
    fn is_identity_patch(&self) -> bool {
        self.k_vol() == 1 && self.spec.stride == [1; 3] && self.spec.padding == [0; 3]
    }

    fn patches<'a>(&self, x_n: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
        if self.is_identity_patch() {
            std::borrow::Cow::Borrowed(x_n)
        } else {
            std::borrow::Cow::Owned(im2col(x_n, self))
        }
    }
}

pub(crate) fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (in_vol, out_vol, cin_g, cout_g, k_vol) = (g.in_vol(), g.out_vol(), g.cin_g(), g.cout_g(), g.k_vol());
    let [kh_n, kw_n] = [g.spec.kernel[1], g.spec.kernel[2]];
    let (wout, win, sw, pw) = (g.output[2], g.input[2], g.spec.stride[2], g.spec.padding[2]);
    let cout = g.spec.out_channels;
    let cin = g.spec.in_channels;
    let mut y = vec![0.0; g.batch * cout * out_vol];
    if g.dense() {
        let kk = cin * k_vol;
        for (n, y_n) in y.chunks_mut(cout * out_vol).enumerate() {
            if let Some(b) = bias {
                for (y_ch, &bv) in y_n.chunks_mut(out_vol).zip(b) {
                    y_ch.fill(bv);
                }
            }
            let x_n = &x[n * cin * in_vol..][..cin * in_vol];
            if g.shiftable() {
                shifted_forward(x_n, w, g, y_n);
                continue;
            }
            let col = g.patches(x_n);
            gemm(cout, kk, out_vol, w, false, &col, false, 1.0, y_n);
        }
        return y;
    }
    y.par_chunks_mut(out_vol).enumerate().for_each(|(idx, y_ch)| {
        let (n, co) = (idx / cout, idx % cout);
        if let Some(b) = bias {
            y_ch.fill(b[co]);
        }
        let grp = co / cout_g;
        for cig in 0..cin_g {
            let ci = grp * cin_g + cig;
            let x_ch = &x[(n * cin + ci) * in_vol..][..in_vol];
            let w_k = &w[(co * cin_g + cig) * k_vol..][..k_vol];
            for_each_row_pair(g, |out_off, in_off, [kd, kh, kw]| {
                let (lo, hi) = valid_range(wout, win, kw, sw, pw);
                if lo < hi {
                    let wv = w_k[(kd * kh_n + kh) * kw_n + kw];
                    row_gather(&mut y_ch[out_off..out_off + wout], &x_ch[in_off..in_off + win], wv, lo, hi, kw, sw, pw);
                }
            });
        }
    });
    y
}

/// Gradient w.r.t. the input; also the forward pass of the transposed conv.
pub(crate) fn backward_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_vol, out_vol, cin_g, cout_g, k_vol) = (g.in_vol(), g.out_vol(), g.cin_g(), g.cout_g(), g.k_vol());
    let [kh_n, kw_n] = [g.spec.kernel[1], g.spec.kernel[2]];
    let (wout, win, sw, pw) = (g.output[2], g.input[2], g.spec.stride[2], g.spec.padding[2]);
    let (cin, cout) = (g.spec.in_channels, g.spec.out_channels);
    let mut gx = vec![0.0; g.batch * cin * in_vol];
    if g.dense() {
        let kk = cin * k_vol;
        for (n, gx_n) in gx.chunks_mut(cin * in_vol).enumerate() {
            let gy_n = &gy[n * cout * out_vol..][..cout * out_vol];
            if g.shiftable() {
                shifted_backward_input(gy_n, w, g, gx_n);
            } else if g.is_identity_patch() {
                gemm(kk, cout, out_vol, w, true, gy_n, false, 0.0, gx_n);
            } else {
                let mut col = vec![0.0; kk * out_vol];
                gemm(kk, cout, out_vol, w, true, gy_n, false, 0.0, &mut col);
                col2im(&col, g, gx_n);
            }
        }
        return gx;
    }
    gx.par_chunks_mut(in_vol).enumerate().for_each(|(idx, gx_ch)| {
        let (n, ci) = (idx / cin, idx % cin);
        let grp = ci / cin_g;
        let cig = ci % cin_g;
        for cog in 0..cout_g {
            let co = grp * cout_g + cog;
            let gy_ch = &gy[(n * cout + co) * out_vol..][..out_vol];
            let w_k = &w[(co * cin_g + cig) * k_vol..][..k_vol];
            for_each_row_pair(g, |out_off, in_off, [kd, kh, kw]| {
                let (lo, hi) = valid_range(wout, win, kw, sw, pw);
                if lo < hi {
                    let wv = w_k[(kd * kh_n + kh) * kw_n + kw];
                    row_scatter(&mut gx_ch[in_off..in_off + win], &gy_ch[out_off..out_off + wout], wv, lo, hi, kw, sw, pw);
                }
            });
        }
    });
    gx
}

pub(crate) fn backward_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_vol, out_vol, cin_g, cout_g, k_vol) = (g.in_vol(), g.out_vol(), g.cin_g(), g.cout_g(), g.k_vol());
    let [kh_n, kw_n] = [g.spec.kernel[1], g.spec.kernel[2]];
    let (wout, win, sw, pw) = (g.output[2], g.input[2], g.spec.stride[2], g.spec.padding[2]);
    let (cin, cout) = (g.spec.in_channels, g.spec.out_channels);
    let mut gw = vec![0.0; cout * cin_g * k_vol];
    if g.dense() {
        let kk = cin * k_vol;
        for n in 0..g.batch {
            let x_n = &x[n * cin * in_vol..][..cin * in_vol];
            if g.shiftable() {
                shifted_backward_weight(x_n, &gy[n * cout * out_vol..][..cout * out_vol], g, &mut gw);
                continue;
            }
            let col = g.patches(x_n);
            gemm(cout, out_vol, kk, &gy[n * cout * out_vol..], false, &col, true, 1.0, &mut gw);
        }
        return gw;
    }
    gw.par_chunks_mut(cin_g * k_vol).enumerate().for_each(|(co, gw_co)| {
        let grp = co / cout_g;
        for n in 0..g.batch {
            let gy_ch = &gy[(n * cout + co) * out_vol..][..out_vol];
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let x_ch = &x[(n * cin + ci) * in_vol..][..in_vol];
                let gw_k = &mut gw_co[cig * k_vol..][..k_vol];
                for_each_row_pair(g, |out_off, in_off, [kd, kh, kw]| {
                    let (lo, hi) = valid_range(wout, win, kw, sw, pw);
                    if lo < hi {
                        gw_k[(kd * kh_n + kh) * kw_n + kw] +=
                            row_dot(&x_ch[in_off..in_off + win], &gy_ch[out_off..out_off + wout], lo, hi, kw, sw, pw);
                    }
                });
            }
        }
    });
    gw
}

pub(crate) fn backward_bias(gy: &[f64], batch: usize, channels: usize, vol: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (c, b) in gb.iter_mut().enumerate() {
            *b += gy[(n * channels + c) * vol..][..vol].iter().sum::<f64>();
        }
    }
    gb
}

impl Tape {
    /// 3D cross-correlation of `x [N, C_in, D, H, W]` with `w` per `spec`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv3dSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != spec.in_channels {
            return Err(Error::shape(format!("conv3d input {xs:?} for {} input channels", spec.in_channels)));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape(format!(
                "conv3d weight {:?}, expected {:?}",
                self.shape(w),
                spec.weight_shape()
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape(format!("conv3d bias {:?}", self.shape(b))));
            }
        }
        let input = [xs[2], xs[3], xs[4]];
        let geom = ConvGeom {
            batch: xs[0],
            spec: *spec,
            input,
            output: spec.output_extents(input)?,
        };
        let y = forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let [d, h, wd] = geom.output;
        let value = Tensor::from_raw(vec![xs[0], spec.out_channels, d, h, wd], y);
        Ok(self.record(value, Op::Conv3d { x, w, b, geom }))
    }

    /// Transposed convolution (groups = 1). `spec` describes the *forward*
    /// conv being transposed: `spec.out_channels` is this op's input channel
    /// count and `w` has shape `[C_in, C_out, kd, kh, kw]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv3dSpec) -> Result<Var> {
        spec.validate()?;
        if spec.groups != 1 {
            return Err(Error::config("grouped transposed convolution is not supported"));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != spec.out_channels {
            return Err(Error::shape(format!(
                "conv_transpose3d input {xs:?} for {} channels",
                spec.out_channels
            )));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape(format!(
                "conv_transpose3d weight {:?}, expected {:?}",
                self.shape(w),
                spec.weight_shape()
            )));
        }
        let out_ext = spec.transposed_extents([xs[2], xs[3], xs[4]])?;
        let geom = ConvGeom {
            batch: xs[0],
            spec: *spec,
            input: out_ext,
            output: [xs[2], xs[3], xs[4]],
        };
        if spec.output_extents(out_ext)? != geom.output {
            return Err(Error::config("transposed extents do not invert the forward conv"));
        }
        let mut y = backward_input(self.value(x).data(), self.value(w).data(), &geom);
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != spec.in_channels {
                return Err(Error::shape(format!("conv_transpose3d bias {:?}", self.shape(b))));
            }
            let vol: usize = out_ext.iter().product();
            for (i, ch) in y.chunks_mut(vol).enumerate() {
                let bv = bd[i % spec.in_channels];
                ch.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::from_raw(vec![xs[0], spec.in_channels, out_ext[0], out_ext[1], out_ext[2]], y);
        Ok(self.record(value, Op::ConvTranspose3d { x, w, b, geom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight six-deep loop reference, no range tricks.
    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let s = g.spec;
        let [di, hi, wi] = g.input;
        let [dout, hout, wout] = g.output;
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let mut y = vec![0.0; g.batch * s.out_channels * dout * hout * wout];
        for n in 0..g.batch {
            for co in 0..s.out_channels {
                for od in 0..dout {
                    for oh in 0..hout {
                        for ow in 0..wout {
                            let mut acc = 0.0;
                            for cig in 0..cin_g {
                                let ci = (co / cout_g) * cin_g + cig;
                                for kd in 0..s.kernel[0] {
                                    for kh in 0..s.kernel[1] {
                                        for kw in 0..s.kernel[2] {
                                            let id = (od * s.stride[0] + kd) as isize - s.padding[0] as isize;
                                            let ih = (oh * s.stride[1] + kh) as isize - s.padding[1] as isize;
                                            let iw = (ow * s.stride[2] + kw) as isize - s.padding[2] as isize;
                                            if id < 0 || ih < 0 || iw < 0 || id >= di as isize || ih >= hi as isize || iw >= wi as isize {
                                                continue;
                                            }
                                            let xv = x[(((n * s.in_channels + ci) * di + id as usize) * hi + ih as usize) * wi + iw as usize];
                                            let wv = w[(((co * cin_g + cig) * s.kernel[0] + kd) * s.kernel[1] + kh) * s.kernel[2] + kw];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y[(((n * s.out_channels + co) * dout + od) * hout + oh) * wout + ow] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_loops() {
        let specs = [
            Conv3dSpec::same(2, 3, 3),
            Conv3dSpec::same(4, 4, 3).with_groups(2).with_stride([2, 1, 2]),
            Conv3dSpec::new(2, 2, [2, 2, 2]).with_stride([2, 2, 2]),
            Conv3dSpec::new(3, 2, [1, 2, 3]).with_padding([0, 1, 2]).with_stride([1, 3, 2]),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let input = [4, 5, 6];
            let g = ConvGeom {
                batch: 2,
                spec: *spec,
                input,
                output: spec.output_extents(input).unwrap(),
            };
            let x: Vec<f64> = (0..2 * spec.in_channels * 120).map(|v| ((v * 7 + i) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..spec.weight_shape().iter().product::<usize>())
                .map(|v| ((v * 3) % 5) as f64 - 2.0)
                .collect();
            assert_eq!(forward(&x, &w, None, &g), naive(&x, &w, &g), "spec {i}");
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn backward_passes_are_adjoint() {
        // <conv(x; w), gy> is bilinear, so both backward passes must satisfy
        // <gx, x> = <gy, y> = <gw, w> exactly up to rounding.
        let specs = [
            Conv3dSpec::same(3, 4, 3),
            Conv3dSpec::new(3, 5, [1, 1, 1]),
            Conv3dSpec::same(2, 3, 3).with_stride([2, 1, 2]),
            Conv3dSpec::new(2, 4, [2, 2, 2]).with_stride([2, 2, 2]),
            Conv3dSpec::same(4, 4, 3).with_groups(4),
            Conv3dSpec::new(3, 2, [1, 2, 3]).with_padding([0, 1, 2]),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let input = [4, 6, 5];
            let g = ConvGeom { batch: 2, spec: *spec, input, output: spec.output_extents(input).unwrap() };
            let wave = |n: usize, k: usize| (0..n).map(move |v| ((v * k + i) as f64 * 0.37).sin()).collect::<Vec<f64>>();
            let x = wave(2 * spec.in_channels * g.in_vol(), 3);
            let w = wave(spec.weight_shape().iter().product(), 5);
            let gy = wave(2 * spec.out_channels * g.out_vol(), 7);
            let y = forward(&x, &w, None, &g);
            let lhs = dot(&y, &gy);
            let gx = backward_input(&gy, &w, &g);
            let gw = backward_weight(&x, &gy, &g);
            assert!((dot(&gx, &x) - lhs).abs() < 1e-9 * (1.0 + lhs.abs()), "input, spec {i}");
            assert!((dot(&gw, &w) - lhs).abs() < 1e-9 * (1.0 + lhs.abs()), "weight, spec {i}");
        }
    }

    #[test]
    fn valid_range_bounds() {
        // out 4, in 4, k=0, pad 1, stride 1: taps o-1 valid for o in 1..4
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3));
        assert_eq!(valid_range(2, 4, 1, 2, 1), (0, 2));
    }

    #[test]
    fn shape_formula() {
        let spec = Conv3dSpec::same(4, 8, 3).with_stride([2, 2, 2]);
        assert_eq!(spec.output_extents([8, 8, 8]).unwrap(), [4, 4, 4]);
        assert!(Conv3dSpec::new(1, 1, [5, 1, 1]).output_extents([3, 3, 3]).is_err());
        assert!(Conv3dSpec::same(6, 4, 3).with_groups(4).validate().is_err());
    }
}

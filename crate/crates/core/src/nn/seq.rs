//! Token-sequence ops: per-channel 1D convolution along the sequence and the
//! volume ↔ sequence reshapes used around the selective-scan branch.

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index offset of tap 0 relative to the output position.
pub fn tap_offset(kernel_width: usize, causal: bool) -> usize {
    if causal {
        kernel_width - 1
    } else {
        (kernel_width - 1) / 2
    }
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, l, c] => Ok((n, l, c)),
        _ => Err(Error::shape(format!("token tensor must be [N, L, C], got {:?}", x.shape()))),
    }
}

impl Tape {
    /// Depthwise 1D convolution over `tokens [N, L, C]` with weight `[C, K]`.
    ///
    /// Causal mode pads K − 1 zeros on the left, so tap K − 1 is the current
    /// token and no output reads a later token. Centered mode pads
    /// (K − 1)/2 on the left.
    pub fn dwconv1d_seq(&mut self, x: Var, w: Var, b: Option<Var>, causal: bool) -> Result<Var> {
        let (n, l, c) = dims(self.value(x))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != c || ws[1] == 0 {
            return Err(Error::config(format!("dwconv1d weight {ws:?} for {c} channels")));
        }
        let k = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::shape(format!("dwconv1d bias {:?}", self.shape(b))));
            }
        }
        let offset = tap_offset(k, causal);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![0.0; n * l * c];
        for bi in 0..n {
            for t in 0..l {
                let row = &mut y[(bi * l + t) * c..][..c];
                if let Some(bd) = bd {
                    row.copy_from_slice(bd);
                }
                for tap in 0..k {
                    let Some(src) = (t + tap).checked_sub(offset).filter(|&s| s < l) else {
                        continue;
                    };
                    let xr = &xd[(bi * l + src) * c..][..c];
                    for ch in 0..c {
                        row[ch] += wd[ch * k + tap] * xr[ch];
                    }
                }
            }
        }
        Ok(self.record(Tensor::from_raw(vec![n, l, c], y), Op::DwConv1d { x, w, b, offset }))
    }

    /// `[N, C, D, H, W] → [N, D·H·W, C]`, raster order D→H→W.
    pub fn vol_to_seq(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("vol_to_seq needs [N, C, D, H, W], got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3] * s[4]])?;
        self.permute(flat, &[0, 2, 1])
    }

    /// Inverse of [`Tape::vol_to_seq`] for the given spatial extents.
    pub fn seq_to_vol(&mut self, x: Var, spatial: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let l: usize = spatial.iter().product();
        if s.len() != 3 || s[1] != l {
            return Err(Error::shape(format!("seq_to_vol: {s:?} does not hold {spatial:?} tokens")));
        }
        let t = self.permute(x, &[0, 2, 1])?;
        self.reshape(t, &[s[0], s[2], spatial[0], spatial[1], spatial[2]])
    }
}

pub(crate) fn dwconv1d_backward(x: &Tensor, w: &Tensor, offset: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; c];
    for bi in 0..n {
        for t in 0..l {
            let gr = &g[(bi * l + t) * c..][..c];
            for (acc, v) in gb.iter_mut().zip(gr) {
                *acc += v;
            }
            for tap in 0..k {
                let Some(src) = (t + tap).checked_sub(offset).filter(|&s| s < l) else {
                    continue;
                };
                let base = (bi * l + src) * c;
                for ch in 0..c {
                    gx[base + ch] += wd[ch * k + tap] * gr[ch];
                    gw[ch * k + tap] += xd[base + ch] * gr[ch];
                }
            }
        }
    }
    (gx, gw, gb)
}

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Affine map over the trailing axis: `x [..., C_in] · w [C_in, C_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (Some(&cin), [wi, cout]) = (xs.last(), ws.as_slice()) else {
            return Err(Error::shape(format!("linear of {xs:?} by {ws:?}")));
        };
        if cin != *wi {
            return Err(Error::shape(format!("linear: trailing extent {cin} vs weight {ws:?}")));
        }
        let cout = *cout;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / cin;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut y = vec![0.0; rows * cout];
        for (r, yr) in y.chunks_mut(cout).enumerate() {
            if let Some(b) = b {
                yr.copy_from_slice(self.value(b).data());
            }
            for (k, &xv) in xd[r * cin..][..cin].iter().enumerate() {
                for (yv, wv) in yr.iter_mut().zip(&wd[k * cout..][..cout]) {
                    *yv += xv * wv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        Ok(self.record(Tensor::from_raw(shape, y), Op::Linear { x, w, b }))
    }
}

pub(crate) fn backward(x: &Tensor, w: &Tensor, g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / cin;
    let (xd, wd) = (x.data(), w.data());
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for r in 0..rows {
        let gr = &g[r * cout..][..cout];
        for (acc, v) in gb.iter_mut().zip(gr) {
            *acc += v;
        }
        for (k, &xv) in xd[r * cin..][..cin].iter().enumerate() {
            for (acc, gv) in gw[k * cout..][..cout].iter_mut().zip(gr) {
                *acc += xv * gv;
            }
        }
    }
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; rows * cin];
        for r in 0..rows {
            let gr = &g[r * cout..][..cout];
            for (k, dst) in gx[r * cin..][..cin].iter_mut().enumerate() {
                *dst = wd[k * cout..][..cout].iter().zip(gr).map(|(a, b)| a * b).sum();
            }
        }
        gx
    });
    (gx, gw, gb)
}

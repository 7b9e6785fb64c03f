use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, strides_of, Tensor};

/// Gathers `data` (shaped `shape`) into the axis order `perm`.
pub(crate) fn permute_values(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.record(value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rank()];
        if perm.len() != xv.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("{perm:?} is not a permutation of rank {}", xv.rank())));
        }
        let (shape, data) = permute_values(xv.data(), xv.shape(), perm);
        Ok(self.record(
            Tensor::from_raw(shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!("concat of {first:?} and {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..][..block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.record(
            Tensor::from_raw(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (outer, extent, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * extent + start) * inner..][..len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        Ok(self.record(Tensor::from_raw(shape, out), Op::Slice { x, axis, start }))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given widths.
    pub fn split(&mut self, x: Var, axis: usize, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if axis >= self.value(x).rank() || total != self.shape(x)[axis] {
            return Err(Error::shape(format!(
                "split widths {widths:?} do not tile axis {axis} of {:?}",
                self.shape(x)
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(x, axis, start, w)?);
            start += w;
        }
        Ok(out)
    }
}

pub(super) fn concat_backward(shapes: &[Vec<usize>], axis: usize, g: &[f64]) -> Vec<Vec<f64>> {
    let (outer, _, inner) = split_axis(&shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (s, gp) in shapes.iter().zip(grads.iter_mut()) {
            let block = s[axis] * inner;
            gp.extend_from_slice(&g[off..off + block]);
            off += block;
        }
    }
    grads
}

pub(super) fn slice_backward(shape: &[usize], axis: usize, start: usize, len: usize, g: &[f64]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut gx = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        gx[(o * extent + start) * inner..][..len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let (s, d) = permute_values(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(d, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<f64> = (0..120).map(f64::from).collect();
        let perm = [2, 0, 3, 1];
        let (s, d) = permute_values(&x, &[2, 3, 4, 5], &perm);
        let (s2, d2) = permute_values(&d, &s, &inverse_perm(&perm));
        assert_eq!(s2, vec![2, 3, 4, 5]);
        assert_eq!(d2, x);
    }

    #[test]
    fn concat_then_split() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = t.constant(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 3]);
        let parts = t.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(t.value(parts[0]), t.value(a));
        assert_eq!(t.value(parts[1]), t.value(b));
        assert!(t.split(c, 1, &[1, 1]).is_err());
    }
}

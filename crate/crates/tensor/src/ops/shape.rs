use crate::error::{shape_err, spec_err, Result, TensorError};
use crate::ops::elementwise::split_axis;
use crate::{Graph, Scalar, Tensor, Var};

fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let y = (*xv).clone().reshape(shape)?;
        Ok(self.push_op(y, &[x], move |dy, _| Ok(vec![Some(dy.clone().reshape(&in_shape)?)])))
    }

    /// General axis permutation; `axes[i]` is the input axis placed at output position `i`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::AxisOutOfRange {
                    op: "permute",
                    axis: a,
                    rank,
                });
            }
            seen[a] = true;
        }
        if axes.len() != rank || seen.iter().any(|s| !s) {
            return Err(spec_err(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let (shape, data) = permute_data(&xv, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push_op(Tensor::new(&shape, data)?, &[x], move |dy, _| {
            let (s, d) = permute_data(dy, &inverse);
            Ok(vec![Some(Tensor::new(&s, d)?)])
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut axes: Vec<usize> = (0..rank).collect();
        if a >= rank || b >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let first = vals
            .first()
            .ok_or_else(|| TensorError::InvalidValue("concat of nothing".into()))?;
        let (outer, _, inner) = split_axis("concat", first.shape(), axis)?;
        let mut lens = Vec::with_capacity(vals.len());
        for v in &vals {
            let ok = v.rank() == first.rank()
                && v.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", v.shape(), first.shape()),
                ));
            }
            lens.push(v.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in vals.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.push_op(Tensor::new(&shape, out)?, xs, move |dy, needs| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut start = o * total * inner;
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&dy.data()[start..start + len * inner]);
                    start += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(needs)
                .map(|((g, s), &need)| need.then(|| Tensor::new(s, g)).transpose())
                .collect()
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, full, inner) = split_axis("narrow", xv.shape(), axis)?;
        if start + len > full {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) exceeds extent {full}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let in_shape = xv.shape().to_vec();
        Ok(self.push_op(Tensor::new(&shape, out)?, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                dx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(Tensor::new(&in_shape, dx)?)])
        }))
    }

    /// Nearest-neighbour upsampling of the last axis by an integer factor:
    /// every bin is repeated `factor` times. The adjoint sums over replicas.
    pub fn upsample_nearest_last(&self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(spec_err("upsample_nearest", "factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let f = *shape
            .last()
            .ok_or_else(|| shape_err("upsample_nearest", "rank-0 input"))?;
        let rows = xv.numel() / f.max(1);
        let mut out = Vec::with_capacity(xv.numel() * factor);
        for r in 0..rows {
            for &v in &xv.data()[r * f..(r + 1) * f] {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = f * factor;
        Ok(self.push_op(Tensor::new(&out_shape, out)?, &[x], move |dy, _| {
            let dx = dy
                .data()
                .chunks_exact(factor)
                .map(|c| c.iter().copied().sum())
                .collect();
            Ok(vec![Some(Tensor::new(&shape, dx)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let x = g.constant(t.clone());
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), vec![4, 2, 3]);
        assert_eq!(g.value(y).get(&[3, 1, 2]), t.get(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(*g.value(z), t);
    }

    #[test]
    fn concat_extent_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.concat(&[a, b], 1).is_err());
        assert_eq!(g.shape(g.concat(&[a, b], 0).unwrap()), vec![5, 3]);
    }

    #[test]
    fn upsample_shapes_and_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 8]));
        assert_eq!(g.shape(g.upsample_nearest_last(x, 16).unwrap()), vec![1, 2, 3, 128]);
        assert_eq!(g.upsample_nearest_last(x, 1).unwrap(), x);
        assert!(g.upsample_nearest_last(x, 0).is_err());
    }

    #[test]
    fn upsample_adjoint_of_sum_is_factor() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 2, 4], |i| i as f64));
        let y = g.upsample_nearest_last(x, 4).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 4.0));
    }
}

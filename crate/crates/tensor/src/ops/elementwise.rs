use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::{Graph, Scalar, Tensor, Var};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Graph<T> {
    fn unary(&self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let xv = self.value(x);
        let y = Rc::new(xv.map(f));
        let yc = Rc::clone(&y);
        self.push_shared(y, &[x], move |dy, _| {
            let data = xv
                .data()
                .iter()
                .zip(yc.data())
                .zip(dy.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            Ok(vec![Some(Tensor::new(xv.shape(), data)?)])
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn scalar_mul(&self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", &av, &bv)?;
        let y = av.zip_map(&bv, |p, q| p + q)?;
        Ok(self.push_op(y, &[a, b], |dy, needs| {
            Ok(vec![needs[0].then(|| dy.clone()), needs[1].then(|| dy.clone())])
        }))
    }

    /// Sums any number of same-shape values.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::InvalidValue("add_n of nothing".into()))?;
        rest.iter().try_fold(*first, |acc, &x| self.add(acc, x))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", &av, &bv)?;
        let y = av.zip_map(&bv, |p, q| p - q)?;
        Ok(self.push_op(y, &[a, b], |dy, needs| {
            Ok(vec![needs[0].then(|| dy.clone()), needs[1].then(|| dy.map(|v| -v))])
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", &av, &bv)?;
        let y = av.zip_map(&bv, |p, q| p * q)?;
        Ok(self.push_op(y, &[a, b], move |dy, needs| {
            Ok(vec![
                needs[0].then(|| dy.zip_map(&bv, |g, q| g * q)).transpose()?,
                needs[1].then(|| dy.zip_map(&av, |g, p| g * p)).transpose()?,
            ])
        }))
    }

    /// Per-channel scaling: `x: [B, C, ...]`, `s: [C]`.
    pub fn channel_scale(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || sv.shape() != [shape[1]] {
            return Err(shape_err(
                "channel_scale",
                format!("x {shape:?} with scale {:?}", sv.shape()),
            ));
        }
        let (b, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
        let mut y = xv.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let k = sv.data()[ci];
                for v in &mut y[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                    *v *= k;
                }
            }
        }
        let y = Tensor::new(&shape, y)?;
        Ok(self.push_op(y, &[x, s], move |dy, needs| {
            let mut dx = needs[0].then(|| vec![T::zero(); dy.numel()]);
            let mut ds = needs[1].then(|| vec![T::zero(); c]);
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                    if let Some(dx) = dx.as_deref_mut() {
                        let k = sv.data()[ci];
                        for (d, &g) in dx[r.clone()].iter_mut().zip(&dy.data()[r.clone()]) {
                            *d = g * k;
                        }
                    }
                    if let Some(ds) = ds.as_deref_mut() {
                        ds[ci] += crate::reduce::dot(&dy.data()[r.clone()], &xv.data()[r]);
                    }
                }
            }
            Ok(vec![
                dx.map(|d| Tensor::new(&shape, d)).transpose()?,
                ds.map(|d| Tensor::new(&[c], d)).transpose()?,
            ])
        }))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.push_op(Tensor::scalar(xv.sum()), &[x], move |dy, _| {
            Ok(vec![Some(Tensor::full(&shape, dy.item()))])
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scalar_mul(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = split_axis("mean", xv.shape(), axis)?;
        let scale = T::one() / T::from_f64(len as f64);
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv.data()[(o * len + a) * inner..][..inner];
                for (d, &s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = xv.shape().to_vec();
        out_shape.remove(axis);
        let in_shape = xv.shape().to_vec();
        let y = Tensor::new(&out_shape, y)?;
        Ok(self.push_op(y, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let g = &dy.data()[o * inner..(o + 1) * inner];
                for a in 0..len {
                    for (d, &gv) in dx[(o * len + a) * inner..][..inner].iter_mut().zip(g) {
                        *d = gv * scale;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&in_shape, dx)?)])
        }))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = split_axis("softmax", xv.shape(), axis)?;
        let mut y = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, a| m.max(y[idx(a)]));
                let mut z = T::zero();
                for a in 0..len {
                    let e = (y[idx(a)] - m).exp();
                    y[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    y[idx(a)] /= z;
                }
            }
        }
        let y = Rc::new(Tensor::new(xv.shape(), y)?);
        let yc = Rc::clone(&y);
        Ok(self.push_shared(y, &[x], move |dy, _| {
            let (yd, g) = (yc.data(), dy.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: T = (0..len).map(|a| yd[idx(a)] * g[idx(a)]).sum();
                    for a in 0..len {
                        dx[idx(a)] = yd[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            Ok(vec![Some(Tensor::new(yc.shape(), dx)?)])
        }))
    }

    /// Gated linear unit: splits `axis` into halves `(a, b)` and returns `a * sigmoid(b)`.
    pub fn glu(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = split_axis("glu", xv.shape(), axis)?;
        if len % 2 != 0 {
            return Err(shape_err("glu", format!("axis {axis} has odd extent {len}")));
        }
        let half = len / 2;
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = half;
        let mut y = vec![T::zero(); outer * half * inner];
        for o in 0..outer {
            for a in 0..half {
                for i in 0..inner {
                    let av = xv.data()[(o * len + a) * inner + i];
                    let bv = xv.data()[(o * len + a + half) * inner + i];
                    y[(o * half + a) * inner + i] = av * sigmoid(bv);
                }
            }
        }
        let in_shape = xv.shape().to_vec();
        Ok(self.push_op(Tensor::new(&out_shape, y)?, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..half {
                    for i in 0..inner {
                        let ia = (o * len + a) * inner + i;
                        let ib = (o * len + a + half) * inner + i;
                        let g = dy.data()[(o * half + a) * inner + i];
                        let s = sigmoid(xv.data()[ib]);
                        dx[ia] = g * s;
                        dx[ib] = g * xv.data()[ia] * s * (T::one() - s);
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&in_shape, dx)?)])
        }))
    }

    /// Inverted dropout; identity when `training` is false or `p == 0`.
    pub fn dropout(&self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidValue(format!("dropout p={p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = Tensor::new(xv.shape(), mask)?;
        let y = xv.zip_map(&mask, |a, m| a * m)?;
        Ok(self.push_op(y, &[x], move |dy, _| Ok(vec![Some(dy.zip_map(&mask, |g, m| g * m)?)])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn glu_with_zero_gate_halves() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 4], vec![2.0, -4.0, 0.0, 0.0]).unwrap());
        let y = g.glu(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0]);
    }

    #[test]
    fn axis_out_of_range() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.softmax(x, 2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2, .. })
        ));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[8]));
        let mut rng = rand::rng();
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    }
}

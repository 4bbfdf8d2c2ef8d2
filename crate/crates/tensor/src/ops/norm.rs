use crate::error::{shape_err, Result, TensorError};
use crate::{reduce, Graph, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Running statistics used in evaluation mode.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

/// Output of [`Graph::batch_norm`]. In training mode the per-channel batch
/// mean and unbiased variance are returned so the caller can update its
/// running statistics.
#[derive(Debug)]
pub struct BatchNormOutput<T> {
    pub y: Var,
    pub batch_stats: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization of `x: [B, C, ...]` over every axis but the channel.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<BatchNormOutput<T>> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", format!("need [B,C,...], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let n = b * inner;
        if n == 0 {
            return Err(TensorError::InvalidValue("batch_norm on an empty batch".into()));
        }
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("gamma {:?} / beta {:?} vs {c} channels", gv.shape(), bv.shape()),
            ));
        }
        let eps = T::from_f64(eps);
        let chan = move |bi: usize, ci: usize| (bi * c + ci) * inner..(bi * c + ci + 1) * inner;

        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train => {
                let nf = T::from_f64(n as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let s: T = (0..b).map(|bi| reduce::sum(&xv.data()[chan(bi, ci)])).sum();
                    let m = s / nf;
                    let ss: T = (0..b).map(|bi| reduce::sq_dev(&xv.data()[chan(bi, ci)], m)).sum();
                    mean[ci] = m;
                    var[ci] = ss / nf;
                }
                let unbiased: Vec<T> = if n > 1 {
                    let k = nf / T::from_f64((n - 1) as f64);
                    var.iter().map(|&v| v * k).collect()
                } else {
                    var.clone()
                };
                let stats = (Tensor::new(&[c], mean.clone())?, Tensor::new(&[c], unbiased)?);
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(shape_err("batch_norm", "running stats do not match channels"));
                }
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut y = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let r = chan(bi, ci);
                let (m, is, g, be) = (mean[ci], inv_std[ci], gv.data()[ci], bv.data()[ci]);
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xv.data()[r]) {
                    *h = (v - m) * is;
                    *o = g * *h + be;
                }
            }
        }
        let y = Tensor::new(&shape, y)?;
        let training = batch_stats.is_some();
        let out = self.push_op(y, &[x, gamma, beta], move |dy, needs| {
            let dyd = dy.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let r = chan(bi, ci);
                    dgamma[ci] += reduce::dot(&dyd[r.clone()], &xhat[r.clone()]);
                    dbeta[ci] += reduce::sum(&dyd[r]);
                }
            }
            let dx = needs[0].then(|| {
                let nf = T::from_f64(n as f64);
                let mut dx = vec![T::zero(); dyd.len()];
                for ci in 0..c {
                    let k = gv.data()[ci] * inv_std[ci];
                    for bi in 0..b {
                        let r = chan(bi, ci);
                        let dx = dx[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&xhat[r]);
                        if training {
                            let (a, mb, mg) = (k, k * dbeta[ci] / nf, k * dgamma[ci] / nf);
                            for ((d, &g), &h) in dx {
                                *d = a * g - mb - h * mg;
                            }
                        } else {
                            for ((d, &g), _) in dx {
                                *d = k * g;
                            }
                        }
                    }
                }
                dx
            });
            Ok(vec![
                dx.map(|d| Tensor::new(&shape, d)).transpose()?,
                needs[1].then(|| Tensor::new(&[c], dgamma)).transpose()?,
                needs[2].then(|| Tensor::new(&[c], dbeta)).transpose()?,
            ])
        });
        Ok(BatchNormOutput { y: out, batch_stats })
    }

    /// Normalization over the last axis with affine `gamma`, `beta` of that extent.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let shape = xv.shape().to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs last axis {d}", gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.numel() / d;
        let df = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let m = reduce::sum(row) / df;
            let v = reduce::sq_dev(row, m) / df;
            let is = T::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        Ok(
            self.push_op(Tensor::new(&shape, y)?, &[x, gamma, beta], move |dy, needs| {
                let g = dy.data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = needs[0].then(|| vec![T::zero(); g.len()]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * d + j] = inv_std[r] / df * (df * dh - s1 - hr[j] * s2);
                        }
                    }
                }
                Ok(vec![
                    dx.map(|v| Tensor::new(&shape, v)).transpose()?,
                    needs[1].then(|| Tensor::new(&[d], dgamma)).transpose()?,
                    needs[2].then(|| Tensor::new(&[d], dbeta)).transpose()?,
                ])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_beta() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 5.0));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::full(&[1], 0.25));
        let out = g.batch_norm(x, gamma, beta, BatchNormMode::Train, BN_EPS).unwrap();
        assert!(g.value(out.y).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[0, 2, 3]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(g.batch_norm(x, gamma, beta, BatchNormMode::Train, BN_EPS).is_err());
    }
}

use crate::error::{shape_err, Result};
use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// Affine map over the last axis: `x: [..., Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape().to_vec();
        let din = *xs.last().ok_or_else(|| shape_err("linear", "rank-0 input"))?;
        if wv.rank() != 2 || wv.shape()[1] != din {
            return Err(shape_err("linear", format!("x {xs:?} with weight {:?}", wv.shape())));
        }
        let dout = wv.shape()[0];
        let rows = xv.numel() / din.max(1);
        let mut y = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err("linear", format!("bias {:?} vs {dout} outputs", bv.shape())));
            }
            for row in y.chunks_exact_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        // y[rows, dout] += x[rows, din] @ w^T
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            xv.data(),
            din,
            1,
            wv.data(),
            1,
            din,
            T::one(),
            &mut y,
            dout,
            1,
        );
        let mut ys = xs.clone();
        *ys.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(Tensor::new(&ys, y)?, &parents, move |dy, needs| {
            let g = dy.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(
                    rows,
                    dout,
                    din,
                    T::one(),
                    g,
                    dout,
                    1,
                    wv.data(),
                    din,
                    1,
                    T::zero(),
                    &mut dx,
                    din,
                    1,
                );
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(
                    dout,
                    rows,
                    din,
                    T::one(),
                    g,
                    1,
                    dout,
                    xv.data(),
                    din,
                    1,
                    T::zero(),
                    &mut dw,
                    din,
                    1,
                );
                dw
            });
            let mut res = vec![
                dx.map(|d| Tensor::new(&xs, d)).transpose()?,
                dw.map(|d| Tensor::new(&[dout, din], d)).transpose()?,
            ];
            if needs.len() > 2 {
                let db = needs[2].then(|| {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                });
                res.push(db.map(|d| Tensor::new(&[dout], d)).transpose()?);
            }
            Ok(res)
        }))
    }

    /// Batched matrix product `[B, M, K] @ [B, K, N] -> [B, M, N]`, with `b`
    /// read as `[B, N, K]` and transposed when `transpose_b` is set.
    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("bmm", format!("{:?} @ {:?}", av.shape(), bv.shape())));
        }
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(shape_err(
                "bmm",
                format!("{:?} @ {:?} (transpose_b={transpose_b})", av.shape(), bv.shape()),
            ));
        }
        // Strides of b viewed as [K, N].
        let (rsb, csb) = if transpose_b { (1, k) } else { (n, 1) };
        let mut y = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv.data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut y[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push_op(Tensor::new(&[nb, m, n], y)?, &[a, b], move |dy, needs| {
            let g = dy.data();
            let da = needs[0].then(|| {
                let mut da = vec![T::zero(); nb * m * k];
                for i in 0..nb {
                    // da = g @ b^T, b^T viewed [N, K] has strides (csb, rsb)
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        n,
                        1,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        csb,
                        rsb,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        k,
                        1,
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); nb * k * n];
                for i in 0..nb {
                    // d(b as [K, N]) = a^T @ g, written back through b's own layout
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data()[i * m * k..(i + 1) * m * k],
                        1,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        n,
                        1,
                        T::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                        rsb,
                        csb,
                    );
                }
                db
            });
            Ok(vec![
                da.map(|d| Tensor::new(&a_shape, d)).transpose()?,
                db.map(|d| Tensor::new(&b_shape, d)).transpose()?,
            ])
        }))
    }
}

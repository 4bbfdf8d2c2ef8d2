use crate::error::{shape_err, Result};
use crate::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
}

impl<T: Scalar> Graph<T> {
    /// 2×2 pooling with stride 2 over the last two axes of `[B, C, T, F]`.
    pub fn pool2x2(&self, x: Var, mode: PoolMode) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 4 {
            return Err(shape_err("pool2d", format!("need [B,C,T,F], got {shape:?}")));
        }
        let (t, f) = (shape[2], shape[3]);
        if t % 2 != 0 || f % 2 != 0 || t == 0 || f == 0 {
            return Err(shape_err(
                "pool2d",
                format!("extents ({t}, {f}) must be even and non-zero"),
            ));
        }
        let (to, fo) = (t / 2, f / 2);
        let planes = shape[0] * shape[1];
        let mut y = Vec::with_capacity(planes * to * fo);
        // For max pooling, the flat input index that won each window.
        let mut argmax = Vec::new();
        let quarter = T::from_f64(0.25);
        for p in 0..planes {
            let base = p * t * f;
            for i in 0..to {
                for j in 0..fo {
                    let idx = [
                        base + 2 * i * f + 2 * j,
                        base + 2 * i * f + 2 * j + 1,
                        base + (2 * i + 1) * f + 2 * j,
                        base + (2 * i + 1) * f + 2 * j + 1,
                    ];
                    match mode {
                        PoolMode::Average => y.push(idx.iter().map(|&k| xv.data()[k]).sum::<T>() * quarter),
                        PoolMode::Max => {
                            let best = idx
                                .into_iter()
                                .reduce(|a, b| if xv.data()[b] > xv.data()[a] { b } else { a })
                                .unwrap();
                            argmax.push(best);
                            y.push(xv.data()[best]);
                        }
                    }
                }
            }
        }
        let out_shape = [shape[0], shape[1], to, fo];
        Ok(self.push_op(Tensor::new(&out_shape, y)?, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); planes * t * f];
            match mode {
                PoolMode::Average => {
                    for p in 0..planes {
                        for i in 0..to {
                            for j in 0..fo {
                                let g = dy.data()[(p * to + i) * fo + j] * quarter;
                                let base = p * t * f;
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    dx[base + (2 * i + di) * f + 2 * j + dj] = g;
                                }
                            }
                        }
                    }
                }
                PoolMode::Max => {
                    for (&k, &g) in argmax.iter().zip(dy.data()) {
                        dx[k] += g;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&shape, dx)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_values() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(g.value(g.pool2x2(x, PoolMode::Max).unwrap()).data(), &[4.0]);
        assert_eq!(g.value(g.pool2x2(x, PoolMode::Average).unwrap()).data(), &[2.5]);
        let ones = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert_eq!(g.value(g.pool2x2(ones, PoolMode::Average).unwrap()).data(), &[1.0]);
    }

    #[test]
    fn three_pools_reach_label_grid() {
        let g = Graph::<f32>::new();
        let mut x = g.constant(Tensor::zeros(&[1, 1, 400, 128]));
        for _ in 0..3 {
            x = g.pool2x2(x, PoolMode::Average).unwrap();
        }
        assert_eq!(g.shape(x), vec![1, 1, 50, 16]);
    }

    #[test]
    fn odd_extent_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.pool2x2(x, PoolMode::Average).is_err());
    }
}

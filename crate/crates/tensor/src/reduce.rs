//! Reductions with eight independent partial sums, which lets the compiler
//! vectorize them.

use crate::Scalar;

const LANES: usize = 8;

fn lanes<T: Scalar>(n: usize, f: impl Fn(usize) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let full = n / LANES * LANES;
    for base in (0..full).step_by(LANES) {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += f(base + k);
        }
    }
    let mut tail = T::zero();
    for i in full..n {
        tail += f(i);
    }
    acc.iter().copied().sum::<T>() + tail
}

pub(crate) fn sum<T: Scalar>(a: &[T]) -> T {
    lanes(a.len(), |i| a[i])
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let b = &b[..a.len()];
    lanes(a.len(), |i| a[i] * b[i])
}

/// `sum((a - m)^2)`.
pub(crate) fn sq_dev<T: Scalar>(a: &[T], m: T) -> T {
    lanes(a.len(), |i| (a[i] - m) * (a[i] - m))
}

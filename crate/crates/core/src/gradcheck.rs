//! Central finite differences, used as an independent check on [`crate::tape`].

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + eps·e_j) - f(x - eps·e_j)) / (2·eps)` for every element `j`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    assert!(eps > T::zero(), "finite difference step must be positive");
    let mut probe = x.data().to_vec();
    let mut out = Vec::with_capacity(probe.len());
    for j in 0..probe.len() {
        let orig = probe[j];
        probe[j] = orig + eps;
        let plus = f(&Tensor::new(x.shape(), probe.clone()).expect("same shape"));
        probe[j] = orig - eps;
        let minus = f(&Tensor::new(x.shape(), probe.clone()).expect("same shape"));
        probe[j] = orig;
        out.push((plus - minus) / (eps + eps));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let (x, y) = (x.widen(), y.widen());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

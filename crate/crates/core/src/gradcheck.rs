//! Central finite-difference checks against tape gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central differences of a scalar function w.r.t. every entry of `x`.
pub fn numeric_grad<T: Scalar>(
    x: &Tensor<T>,
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> Vec<T> {
    let h = T::cast(step);
    let two_h = T::cast(2.0 * step);
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x.as_f64() - y.as_f64()));
    let scale = norm(&mut a.iter().map(|x| x.as_f64()))
        .max(norm(&mut b.iter().map(|x| x.as_f64())))
        .max(floor);
    diff / scale
}

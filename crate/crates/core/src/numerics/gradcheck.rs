use crate::numerics::{Real, Tensor};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Tensor<T> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + h);
        let up = f(&probe);
        probe.data_mut()[i] = T::of(orig.f64() - h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push(T::of((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both are tiny.
pub fn relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    let norm = |t: &Tensor<T>| t.data().iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

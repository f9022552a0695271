//! Central finite differences, used to verify every analytic gradient.

use crate::tape::Mat;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numerical_grad(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut grad = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let plus = f(&probe);
        probe[[r, c]] = orig - h;
        let minus = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(numeric.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

//! Central finite differences, used by the gradient tests.

use crate::tensor::Tensor;

/// `∂f/∂x` by central differences with step `h`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = libm::sqrt(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum());
    let na = libm::sqrt(a.data().iter().map(|v| v * v).sum());
    let nb = libm::sqrt(b.data().iter().map(|v| v * v).sum());
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

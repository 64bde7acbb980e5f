//! Central finite differences for checking backward rules.

use crate::{Grads, ParamId, ParamStore, Tensor};

/// Normwise relative error `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Numerical gradient of `f` with respect to the listed parameters.
///
/// When `max_coords` is set, only that many evenly spaced coordinates of
/// each tensor are perturbed; the returned tensors hold `NaN` elsewhere.
pub fn numeric_param_grads(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    eps: f64,
    max_coords: Option<usize>,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> Grads<f64> {
    let mut work = store.clone();
    let mut out = Grads::new();
    for &id in ids {
        let base = store.value(id).as_ref().clone();
        let n = base.numel();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut g = Tensor::full(base.shape(), f64::NAN);
        for i in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            work.set_value(id, plus);
            let fp = f(&work);
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            work.set_value(id, minus);
            let fm = f(&work);
            g.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        work.set_value(id, base);
        out.accumulate(id, g);
    }
    out
}

/// Largest per-tensor relative error between analytic and numeric gradients,
/// comparing only coordinates the numeric pass filled in.
pub fn max_relative_error(analytic: &Grads<f64>, numeric: &Grads<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (id, num) in numeric.iter() {
        let zeros;
        let ana = match analytic.get(id) {
            Some(a) => a,
            None => {
                zeros = Tensor::zeros(num.shape());
                &zeros
            }
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (&x, &y) in ana.data().iter().zip(num.data()) {
            if !y.is_nan() {
                a.push(x);
                b.push(y);
            }
        }
        worst = worst.max(relative_error(&a, &b));
    }
    worst
}

//! Central finite differences, used as an independent oracle for backward passes.

use super::Tensor;

/// Numerical gradient of `f` with respect to every input tensor.
pub fn central_difference<F>(inputs: &[Tensor<f64>], eps: f64, mut f: F) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// `max |a - b| / max(1, |a|)` over all elements.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

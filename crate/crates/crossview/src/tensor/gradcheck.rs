//! Central finite-difference gradient oracle.
//!
//! Independent of the tape's backward pass: it only evaluates a loss
//! closure at perturbed parameter values. Run it at 64-bit with
//! `h = 1e-5` for tight comparisons against analytic gradients.

use super::Tensor;

/// Central-difference gradient of `f` w.r.t. every element of every
/// parameter: `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff<F>(f: &F, params: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for i in 0..params[p].numel() {
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] += h;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] -= h;
            let fm = f(&minus);
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push(Tensor::new(params[p].shape().to_vec(), g).expect("grad shape"));
    }
    grads
}

/// Central-difference gradient w.r.t. a single parameter tensor,
/// leaving the others fixed. `params` is scratch space and is restored
/// before returning.
pub fn central_diff_single<F>(
    f: &F,
    params: &mut [Tensor<f64>],
    which: usize,
    h: f64,
) -> Tensor<f64>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let n = params[which].numel();
    let mut g = vec![0.0; n];
    for i in 0..n {
        let orig = params[which].data()[i];
        params[which].data_mut()[i] = orig + h;
        let fp = f(params);
        params[which].data_mut()[i] = orig - h;
        let fm = f(params);
        params[which].data_mut()[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(params[which].shape().to_vec(), g).expect("grad shape")
}

/// Largest elementwise relative error between two gradients. The
/// denominator is floored at 1e-4 so that finite-difference noise on
/// true-zero components does not register as error.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

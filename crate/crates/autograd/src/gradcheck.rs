//! Central finite-difference gradient checking (test support).

use ndarray::ArrayD;

use crate::tensor::Tensor;

/// Numeric gradient of `loss` with respect to each parameter, by central
/// differences. `loss` must rebuild its graph on every call because the
/// parameters are perturbed in place between calls.
pub fn central_diff_gradients(
    params: &[&Tensor],
    h: f64,
    mut loss: impl FnMut() -> f64,
) -> Vec<ArrayD<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let base = p.value().clone();
        let mut g = ArrayD::<f64>::zeros(base.raw_dim());
        let flat_len = base.len();
        for i in 0..flat_len {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            p.set_value(plus);
            let lp = loss();

            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            p.set_value(minus);
            let lm = loss();

            g.as_slice_mut().unwrap()[i] = (lp - lm) / (2.0 * h);
        }
        p.set_value(base);
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and numeric gradients, with a
/// floor on the denominator so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n.iter()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::var(Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng).value().clone());
        let loss_fn = |w: &Tensor| x.conv2d(w, 2, 1).tanh().square().sum_all();

        let analytic: Vec<_> = grad(&loss_fn(&w), &[&w]).iter().map(|g| g.value().clone()).collect();
        let numeric = central_diff_gradients(&[&w], 1e-5, || loss_fn(&w).item());
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-7);
    }

    #[test]
    fn conv_transpose_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::var(Tensor::randn(&[3, 2, 4, 4], 0.5, &mut rng).value().clone());
        let loss_fn = |w: &Tensor| {
            x.conv_transpose2d(w, 2, 1, (8, 8)).sigmoid().sum_all()
        };
        let analytic: Vec<_> = grad(&loss_fn(&w), &[&w]).iter().map(|g| g.value().clone()).collect();
        let numeric = central_diff_gradients(&[&w], 1e-5, || loss_fn(&w).item());
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-7);
    }

    #[test]
    fn double_backprop_gradcheck() {
        // Differentiate the gradient-norm of a tiny net w.r.t. its weight:
        // checks that grad-of-grad is wired correctly end to end.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::var(Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng).value().clone());
        let w = Tensor::var(Tensor::randn(&[1, 2, 3, 3], 0.5, &mut rng).value().clone());

        let penalty = |w: &Tensor| {
            let score = x.conv2d(w, 1, 1).tanh().sum_all();
            let gx = grad(&score, &[&x]).remove(0);
            gx.square().sum_all() // squared gradient norm
        };

        let analytic: Vec<_> = grad(&penalty(&w), &[&w]).iter().map(|g| g.value().clone()).collect();
        let numeric = central_diff_gradients(&[&w], 1e-5, || penalty(&w).item());
        assert!(max_relative_error(&analytic, &numeric, 1e-5) < 1e-6);
    }
}

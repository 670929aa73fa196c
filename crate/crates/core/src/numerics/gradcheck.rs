//! Finite-difference gradient verification.
//!
//! The checker never trusts the graph it is checking: finite differences are
//! evaluated with gradient tracking disabled, so the two sides are
//! independent down to the primitive kernels.

use crate::error::{XmError, XmResult};
use crate::numerics::tensor::{no_grad, Tensor};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

fn check_step(h: f64) -> XmResult<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(XmError::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`, over all elements of `x`.
pub fn grad_check(
    f: &dyn Fn(&Tensor) -> XmResult<Tensor>,
    x: &Tensor,
    h: f64,
) -> XmResult<f64> {
    check_step(h)?;
    let shape = x.shape().to_vec();
    let base = x.to_vec();

    let leaf = Tensor::param(shape.clone(), base.clone());
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(XmError::LossNotScalar(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| XmError::MissingGradient("grad_check input".into()))?;

    let _guard = no_grad();
    let mut worst = 0.0_f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(shape.clone(), plus))?.value();
        let fm = f(&Tensor::from_vec(shape.clone(), minus))?.value();
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over a set of named parameter tensors for a loss that is
/// rebuilt by `build_loss` on every evaluation (the parameters are perturbed
/// in place between evaluations). Returns the max relative error over every
/// element of every listed parameter.
pub fn grad_check_params(
    build_loss: &dyn Fn() -> XmResult<Tensor>,
    params: &[(String, Tensor)],
    h: f64,
) -> XmResult<f64> {
    check_step(h)?;
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = build_loss()?;
    if loss.numel() != 1 {
        return Err(XmError::LossNotScalar(loss.shape().to_vec()));
    }
    loss.backward()?;

    let mut worst = 0.0_f64;
    let _guard = no_grad();
    for (name, p) in params {
        let analytic = p
            .grad()
            .ok_or_else(|| XmError::MissingGradient(name.clone()))?;
        let n = p.numel();
        for i in 0..n {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + h);
            let fp = build_loss()?.value();
            p.update_data(|d| d[i] = orig - h);
            let fm = build_loss()?.value();
            p.update_data(|d| d[i] = orig);
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        p.zero_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::numerics::rng::Rng;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        // f(x) = x^2 at x = 3: analytic 6, central difference 6 exactly.
        let f = |x: &Tensor| ops::mul(x, x).map(|s| ops::reduce_sum(&s, None));
        let err = grad_check(&f, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn softmax_cross_entropy_on_random_logits() {
        let mut rng = Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..6).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let target = 2usize;
        let f = move |x: &Tensor| -> XmResult<Tensor> {
            let p = ops::softmax(x)?;
            let logp = ops::log(&p);
            let mut pick = vec![0.0; 6];
            pick[target] = -1.0;
            let mask = Tensor::from_vec(vec![6], pick);
            Ok(ops::reduce_sum(&ops::mul(&logp, &mask)?, None))
        };
        let x = Tensor::from_vec(vec![6], logits);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn rejects_out_of_band_step_and_vector_loss() {
        let f = |x: &Tensor| ops::mul(x, x);
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        assert!(grad_check(&f, &x, 1e-2).is_err());
        assert!(grad_check(&f, &x, 1e-5).is_err()); // loss not scalar
    }
}

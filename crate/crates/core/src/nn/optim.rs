//! Parameter updates: plain SGD and a damped Newton step over the full
//! flattened parameter vector, plus a central-difference gradient used as a
//! testing oracle.

use nalgebra::{DMatrix, DVector};

use super::model::{GradientSet, MlpModel};
use crate::{Error, Result};

/// Finite-difference step used to build Hessians from analytic gradients.
pub const HESSIAN_FD_STEP: f64 = 1e-5;

/// Default Tikhonov damping added to the Hessian diagonal.
pub const DEFAULT_DAMPING: f64 = 1e-3;

/// Upper bound on parameters for which a dense Hessian is materialised.
pub const MAX_NEWTON_PARAMS: usize = 4096;

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(model: &mut MlpModel, grads: &GradientSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Validation(format!(
            "learning rate must be a finite non-negative number, got {lr}"
        )));
    }
    grads.check_matches(model)?;
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        layer.weights.add_scaled(&g.weights, -lr)?;
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(())
}

/// Outcome of a [`newton_step`].
#[derive(Debug, Clone)]
pub struct NewtonStep {
    /// Loss at the parameters before the update.
    pub loss: f64,
    /// The applied displacement `-(H + damping I)^-1 g`.
    pub step: Vec<f64>,
}

/// Dense Hessian of the loss behind `grad_fn`, built column by column from
/// central differences of the analytic gradient and then symmetrised.
pub fn finite_diff_hessian<F>(model: &MlpModel, grad_fn: &F) -> Result<DMatrix<f64>>
where
    F: Fn(&MlpModel) -> Result<(f64, GradientSet)>,
{
    let p = model.param_count();
    let base = model.flatten_params();
    let mut probe = model.clone();
    let mut hessian = DMatrix::<f64>::zeros(p, p);
    let mut shifted = base.clone();
    for i in 0..p {
        shifted[i] = base[i] + HESSIAN_FD_STEP;
        probe.set_params(&shifted)?;
        let plus = grad_fn(&probe)?.1.flatten();
        shifted[i] = base[i] - HESSIAN_FD_STEP;
        probe.set_params(&shifted)?;
        let minus = grad_fn(&probe)?.1.flatten();
        shifted[i] = base[i];
        for j in 0..p {
            hessian[(j, i)] = (plus[j] - minus[j]) / (2.0 * HESSIAN_FD_STEP);
        }
    }
    let sym = (&hessian + hessian.transpose()) * 0.5;
    Ok(sym)
}

/// One damped Newton update `v <- v - (H + damping I)^-1 g`.
///
/// `loss_fn` evaluates the loss and its analytic gradient at a model.
pub fn newton_step<F>(model: &mut MlpModel, loss_fn: F, damping: f64) -> Result<NewtonStep>
where
    F: Fn(&MlpModel) -> Result<(f64, GradientSet)>,
{
    if !damping.is_finite() || damping < 0.0 {
        return Err(Error::Validation(format!(
            "damping must be finite and non-negative, got {damping}"
        )));
    }
    let p = model.param_count();
    if p > MAX_NEWTON_PARAMS {
        return Err(Error::Validation(format!(
            "model has {p} parameters; dense Newton steps are limited to {MAX_NEWTON_PARAMS}"
        )));
    }
    let (loss, grads) = loss_fn(model)?;
    grads.check_matches(model)?;
    let g = DVector::from_vec(grads.flatten());
    let mut h = finite_diff_hessian(model, &loss_fn)?;
    for i in 0..p {
        h[(i, i)] += damping;
    }

    let lu = h.lu();
    let u = lu.u();
    let diag_max = u.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diag_min = u.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if diag_max == 0.0 || diag_min <= 1e-12 * diag_max {
        return Err(Error::Singular { damping });
    }
    let delta = lu.solve(&g).ok_or(Error::Singular { damping })?;
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { damping });
    }

    let step: Vec<f64> = delta.iter().map(|d| -d).collect();
    let updated: Vec<f64> = model
        .flatten_params()
        .iter()
        .zip(&step)
        .map(|(v, s)| v + s)
        .collect();
    model.set_params(&updated)?;
    Ok(NewtonStep { loss, step })
}

/// Central differences `(L(p + h) - L(p - h)) / 2h` for every parameter.
pub fn finite_diff_grad<F>(loss_fn: F, model: &MlpModel, step: f64) -> Result<GradientSet>
where
    F: Fn(&MlpModel) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Validation(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let base = model.flatten_params();
    let mut probe = model.clone();
    let mut shifted = base.clone();
    let mut flat = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        shifted[i] = base[i] + step;
        probe.set_params(&shifted)?;
        let plus = loss_fn(&probe)?;
        shifted[i] = base[i] - step;
        probe.set_params(&shifted)?;
        let minus = loss_fn(&probe)?;
        shifted[i] = base[i];
        flat.push((plus - minus) / (2.0 * step));
    }
    GradientSet::from_flat(model, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, DenseMatrix};

    fn scalar_model(w: f64) -> MlpModel {
        let layer = DenseLayer::new(
            DenseMatrix::new(1, 1, vec![w]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        MlpModel::new(vec![layer]).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let mut model = scalar_model(1.0);
        let mut g = GradientSet::zeros_like(&model);
        g.layers[0].weights.data_mut()[0] = 3.0;
        let before = model.clone();
        sgd_step(&mut model, &g, 0.0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut model = scalar_model(1.0);
        let mut g = GradientSet::zeros_like(&model);
        g.layers[0].weights.data_mut()[0] = 0.5;
        sgd_step(&mut model, &g, 0.01).unwrap();
        assert!((model.layers()[0].weights.data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_mismatched_gradients() {
        let mut model = scalar_model(1.0);
        let other = GradientSet::zeros_like(&MlpModel::identity(2));
        assert!(matches!(sgd_step(&mut model, &other, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_loss_has_zero_fd_gradient() {
        let model = MlpModel::identity(3);
        let g = finite_diff_grad(|_| Ok(7.0), &model, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn fd_gradient_of_square() {
        let model = scalar_model(3.0);
        let g = finite_diff_grad(
            |m| Ok(m.layers()[0].weights.data()[0].powi(2)),
            &model,
            1e-5,
        )
        .unwrap();
        assert!((g.layers[0].weights.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn singular_hessian_is_reported() {
        // flat loss: zero Hessian, zero damping
        let mut model = scalar_model(1.0);
        let err = newton_step(
            &mut model,
            |m| Ok((0.0, GradientSet::zeros_like(m))),
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
        assert!(err.to_string().contains("larger damping"));
    }
}

//! Central-difference gradient checks.
//!
//! The error for one coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`;
//! the floor keeps coordinates whose true gradient is ~0 from dividing by noise.
//! Functions containing `l1_loss` are not differentiable where prediction and
//! target coincide; callers must keep inputs at least `eps` away from ties.

use super::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn eval_scalar(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.scalar_value(loss)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.input(x.shape().to_vec(), x.data().to_vec(), true)?;
        let loss = f(&mut tape, v)?;
        eval_scalar(&tape, loss)?;
        let grads = tape.backward(loss)?;
        grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval_at = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(x.shape().to_vec(), data, false)?;
        let loss = f(&mut tape, v)?;
        eval_scalar(&tape, loss)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// The same check taken over every scalar of every trainable parameter.
pub fn finite_diff_check_params<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut analytic = params.clone();
    {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        eval_scalar(&tape, loss)?;
        let grads = tape.backward(loss)?;
        analytic.zero_grad();
        analytic.accumulate_grads(&bound, &grads)?;
    }
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        eval_scalar(&tape, loss)
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().to_vec();
    for name in &names {
        let reference = params.by_name(name).expect("name from same set");
        if !reference.requires_grad() {
            continue;
        }
        let grad = analytic
            .by_name(name)
            .and_then(|t| t.grad())
            .expect("accumulate_grads fills every trainable parameter")
            .to_vec();
        for i in 0..reference.numel() {
            let original = reference.data()[i];
            probe.by_name_mut(name).unwrap().data_mut()[i] = original + eps;
            let up = eval(&probe)?;
            probe.by_name_mut(name).unwrap().data_mut()[i] = original - eps;
            let down = eval(&probe)?;
            probe.by_name_mut(name).unwrap().data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(worst)
}

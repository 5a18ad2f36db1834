//! Central finite-difference gradient checking in f64.

use super::param::Parameter;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    /// Analytic and numeric values at `worst_index`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradError>,
    pub max_rel_err: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn param(&self, name: &str) -> Option<&ParamGradError> {
        self.per_param.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<'m, F>(values: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'m, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = values.iter().map(|v| tape.param_owned(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != [1, 1] {
        return Err(Error::shape("check_gradients", "function must return a scalar"));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "check_gradients" });
    }
    Ok(s)
}

/// Compares tape gradients of `f` against `(f(x+eps) − f(x−eps)) / 2eps`
/// for every component of every parameter. `f` may borrow data living for
/// `'m`, such as a model's structure.
pub fn check_gradients<'m, F>(params: &[Parameter<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'m, f64>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param_owned(p.value.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        params
            .iter()
            .zip(&vars)
            .map(|(p, &v)| {
                let [r, c] = p.value.shape();
                grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(r, c))
            })
            .collect()
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    let mut evaluations = 0;
    for (pi, p) in params.iter().enumerate() {
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        let mut max_abs = 0.0f64;
        for i in 0..p.value.len() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&values, &f)?;
            values[pi].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&values, &f)?;
            values[pi].data_mut()[i] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[i];
            max_abs = max_abs.max(a.abs());
            let err = relative_error(a, numeric);
            if err > worst.0 {
                worst = (err, i, a, numeric);
            }
        }
        per_param.push(ParamGradError {
            name: p.name.clone(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            worst_analytic: worst.2,
            worst_numeric: worst.3,
            max_abs_grad: max_abs,
        });
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        evaluations,
    })
}

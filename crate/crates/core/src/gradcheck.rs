//! Central finite-difference verification of tape gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{loss_on_tape, Batch, DropoutRates, Model};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error. Gradients smaller than this are
/// compared in absolute terms, where the finite-difference estimate is
/// dominated by rounding in the loss.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub eps: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} max_rel_err={:.3e} (at {}: analytic={:.6e} numeric={:.6e})",
                p.name, p.max_rel_err, p.worst_index, p.analytic, p.numeric
            )?;
        }
        write!(
            f,
            "{} eps={:e} tol={:e} max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.eps,
            self.tol,
            self.max_rel_err()
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn run<F>(f: &mut F, params: &[(String, Tensor)]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar loss"));
    }
    Ok((tape, vars, loss))
}

/// Compares tape gradients of the scalar program `f` against central
/// differences with step `eps`, for every element of every parameter.
///
/// Rejects programs that draw random numbers (dropout in training mode) or
/// whose loss differs between two identical forward passes.
pub fn grad_check<F>(params: &[(String, Tensor)], eps: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = run(&mut f, params)?;
    if tape.is_stochastic() {
        return Err(Error::NonDeterministic(
            "forward pass draws random numbers (disable dropout)".into(),
        ));
    }
    let base = tape.value(loss).item();
    let again = eval(&mut f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two forward passes gave {base} and {again}"
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: params[p].0.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grad.len() {
            let orig = params[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + eps;
            let plus = eval(&mut f, &work)?;
            work[p].1.data_mut()[i] = orig - eps;
            let minus = eval(&mut f, &work)?;
            work[p].1.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || !err.is_finite() {
                check.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        eps,
        tol,
    })
}

/// Gradient check of the teacher-forced loss of `model` on `batch` with
/// dropout disabled, over every parameter.
pub fn check_model(model: &Model, batch: &Batch, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let params: Vec<(String, Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    grad_check(&params, eps, tol, |tape, vars| {
        let w = model.params.bound(vars.to_vec());
        loss_on_tape(tape, &w, &model.config, batch, &mut Mode::Eval, &DropoutRates::NONE)
    })
}

fn eval<F>(f: &mut F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = run(f, params)?;
    Ok(tape.value(loss).item())
}

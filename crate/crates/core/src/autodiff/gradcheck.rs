use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, |a: f64, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
    }
}

fn eval<F>(f: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out)[(0, 0)])
}

/// Compares the tape gradient of the scalar `f(params)` with central finite
/// differences, entry by entry. NaN anywhere fails the parameter.
pub fn gradcheck<F>(f: F, params: &[Matrix], cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let mut report = ParamReport {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for idx in 0..params[p].data().len() {
            let x0 = params[p].data()[idx];
            work[p].data_mut()[idx] = x0 + cfg.h;
            let up = eval(&f, &work)?;
            work[p].data_mut()[idx] = x0 - cfg.h;
            let down = eval(&f, &work)?;
            work[p].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let err = (a - numeric).abs() / denom;
            let err = if err.is_finite() { err } else { f64::NAN };
            // The first NaN sticks.
            if !report.max_rel_err.is_nan() && (err.is_nan() || err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = !report.max_rel_err.is_nan() && report.max_rel_err <= cfg.tol;
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        params: reports,
        passed,
    })
}

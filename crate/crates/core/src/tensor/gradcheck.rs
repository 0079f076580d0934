//! Central finite differences against the tape's reverse pass.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|auto - numeric| / max(1, |auto|, |numeric|)` over checked
    /// coordinates.
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where the one-sided slopes disagree, i.e. the function is
    /// not differentiable within one step (relu or max kinks).
    pub excluded: Vec<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    Ok(out.item())
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let f0 = loss.item();
    let grads = tape.backward(loss)?;
    let auto: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    if eval(&f, points)?.to_bits() != f0.to_bits() {
        return Err(Error::OracleInvalid(
            "two forward passes at the same point disagree".into(),
        ));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tol,
        passed: true,
    };
    // Smooth curvature moves the one-sided slopes apart by |f''| * step; a
    // kink moves them apart by a finite jump.
    let kink_tol = (10.0 * tol).max(1e-3);
    let mut shifted = points.to_vec();
    for (k, point) in points.iter().enumerate() {
        for c in 0..point.numel() {
            let x = point.data()[c];
            shifted[k].data_mut()[c] = x + step;
            let fp = eval(&f, &shifted)?;
            shifted[k].data_mut()[c] = x - step;
            let fm = eval(&f, &shifted)?;
            shifted[k].data_mut()[c] = x;

            let left = (f0 - fm) / step;
            let right = (fp - f0) / step;
            if relative(left, right) > kink_tol {
                report.excluded.push((k, c));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative(auto[k].data()[c], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, c));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step, tol)
}

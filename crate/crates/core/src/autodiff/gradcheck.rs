//! Central-difference verification of reverse-mode gradients (64-bit only).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so gradients that are zero in
/// both computations do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;
/// Rounding allowance per unit of `|f|` in the difference `f(x+h) - f(x-h)`.
/// A coordinate whose true gradient is zero still shows a difference
/// quotient of about `eps * |f| / h`; that much is not counted as error.
pub const ROUNDOFF: f64 = 8.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point
    /// (relu at 0, clamp bounds); excluded from the error.
    pub flagged: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok((v.item(), g.kink_hash()))
}

/// Compares the analytic gradient of scalar `f` at `inputs` against central
/// differences with step [`STEP`], coordinate by coordinate.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let base_value = g.value(out).item();
    let base_kinks = g.kink_hash();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let (again, again_kinks) = evaluate(&f, inputs)?;
    if again.to_bits() != base_value.to_bits() || again_kinks != base_kinks {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        flagged: 0,
        tol,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let (fp, kp) = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let (fm, km) = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            if kp != base_kinks || km != base_kinks {
                report.flagged += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let noise = ROUNDOFF * base_value.abs().max(fp.abs()).max(fm.abs()).max(1.0) / STEP;
            let err = ((a - numeric).abs() - noise).max(0.0) / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

//! Central finite-difference verification of tape gradients (64-bit).

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero compare on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided); `None` = all.
    pub max_coords_per_input: Option<usize>,
    /// When nonzero, each coordinate's difference quotient is also taken at half the
    /// step. If the two disagree the function is not smooth at that scale (a ReLU or
    /// max-pool kink lies inside the interval), so the step is divided by ten and the
    /// probe repeated, up to this many times. Coordinates that never settle are
    /// counted as inconclusive instead of being compared. A kink exactly at the
    /// evaluation point gives step-independent quotients and still fails.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            floor: 1e-6,
            max_coords_per_input: None,
            kink_retries: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub failures: usize,
    /// Coordinates skipped because no probed step gave a smooth estimate.
    pub inconclusive: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape's gradients of `f(inputs)` against central differences.
///
/// `f` receives a fresh tape with every input registered as a trainable leaf and must
/// return a scalar.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: 0,
        inconclusive: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let n = work[i].numel();
        let stride = match opts.max_coords_per_input {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        for c in (0..n).step_by(stride) {
            let mut quotient = |h: f64| -> Result<f64> {
                let orig = work[i].data()[c];
                work[i].data_mut()[c] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[c] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[c] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let mut h = opts.step;
            let mut numeric = quotient(h)?;
            let mut settled = opts.kink_retries == 0;
            for _ in 0..opts.kink_retries {
                if relative_error(numeric, quotient(h / 2.0)?, opts.floor) <= opts.rel_tol / 4.0 {
                    settled = true;
                    break;
                }
                h /= 10.0;
                numeric = quotient(h)?;
            }
            if !settled {
                report.inconclusive += 1;
                continue;
            }
            let a = grad.data()[c];
            let err = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            if err > opts.rel_tol {
                report.failures += 1;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, c, a, numeric));
            }
        }
    }
    Ok(report)
}

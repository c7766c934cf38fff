//! Central finite-difference verification of analytic gradients.

use crate::error::{ensure, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1)` over all checked elements.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f32, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step, tolerance)
}

/// Checks the gradient of a scalar function with respect to every element of every input.
///
/// The numeric derivative is the fourth-order central difference
/// `(8·(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, with `h` taken from the
/// perturbed values as actually stored in `f32`, so linear functions check exactly.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f32, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    ensure!(step > 0.0, "grad_check: step must be positive, got {step}");
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        ensure!(out.value().numel() == 1, "grad_check: function must be scalar-valued");
        tape.backward(out)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item() as f64)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        tolerance,
        elements_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let original = x.data()[i];
            let mut at = |v: f32| -> Result<f64> {
                work[which].data_mut()[i] = v;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (original + step, original - step, original + 2.0 * step, original - 2.0 * step);
            let (f_p1, f_m1, f_p2, f_m2) = (at(p1)?, at(m1)?, at(p2)?, at(m2)?);
            work[which].data_mut()[i] = original;

            // Fourth-order central stencil, with the offsets as actually stored.
            let d1 = p1 as f64 - m1 as f64;
            let d2 = p2 as f64 - m2 as f64;
            let numeric = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (8.0 * d1 - d2);
            let a = analytic[which].data()[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > report.max_rel_error || report.elements_checked == 0 {
                report.max_rel_error = err;
                report.worst = (which, i);
            }
            report.elements_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_checks_exactly() {
        // dyadic inputs and step keep every perturbed sum exact in f32
        let x = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0);
        let r = grad_check(|_, x| Ok(x.sum()), &x, 1.0 / 128.0, 1e-3).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.elements_checked, 6);
    }

    #[test]
    fn sigmoid_sum_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let r = grad_check(|_, x| Ok(x.sigmoid().sum()), &x, 1e-3, 1e-3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly zero with a step crossing the kink yields numeric 0.5, analytic 0
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(|_, x| Ok(x.relu().scale(4.0).sum()), &x, 1e-3, 1e-3).unwrap();
        assert!(!r.passed());
    }
}

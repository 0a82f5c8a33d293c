//! Central finite-difference verification of tape gradients.

use crate::{Result, Tape, Tensor, Var};

/// Default perturbation for [`grad_check`].
pub const STEP: f64 = 1e-5;
/// Default acceptance threshold on relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero pairs from exploding.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of `f` against central differences at every
/// coordinate of every parameter.
///
/// `f` records a scalar loss on a fresh tape given one leaf per parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps.iter().map(|p| tape.constant(p.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &params[k]);
        let mut worst: f64 = 0.0;
        for j in 0..params[k].len() {
            let orig = params[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_param, passed: max_rel_error < tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let p = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let report = grad_check(
            |t, v| {
                let s = t.square(v[0])?;
                t.sum(s)
            },
            &[p],
            STEP,
            TOLERANCE,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn quadratic_example_matches_closed_form() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.square(v[0])?;
            t.sum(s)
        };
        let mut tape = Tape::new();
        let v = tape.param(theta.clone()).unwrap();
        let loss = f(&mut tape, &[v]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
        let report = grad_check(f, &[theta], STEP, TOLERANCE).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn symmetric_loss_at_zero_has_zero_gradient() {
        let report = grad_check(
            |t, v| {
                let s = t.square(v[0])?;
                t.mean(s)
            },
            &[Tensor::zeros(&[4])],
            STEP,
            TOLERANCE,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}

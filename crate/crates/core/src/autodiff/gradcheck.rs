//! Central finite-difference verification of tape gradients.

use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub probes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Corrupts one backward rule on the analytic tape (fault injection).
    pub fault: Option<OpKind>,
}

impl GradCheck {
    pub fn new(step: f64) -> Self {
        GradCheck { step, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    /// Compares the tape gradient of `f` at `params` with central differences.
    ///
    /// `f` receives a fresh tape and one leaf per parameter (in order) and
    /// must return a scalar node. It is evaluated `1 + 2·Σ|param|` times.
    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let h = self.step;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!(
                "finite-difference step must be positive, got {h}"
            )));
        }

        let mut tape = match self.fault {
            Some(kind) => Tape::with_fault(kind),
            None => Tape::new(),
        };
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(&as_param(p))).collect();
        let loss = f(&mut tape, &leaves)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite("evaluating f at the base point".into()));
        }
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&v| tape.grad(v).expect("leaf gradients are populated").to_vec())
            .collect();

        let eval = |probe: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|p| t.leaf(p)).collect();
            let out = f(&mut t, &vars)?;
            let v = t.scalar(out);
            if !v.is_finite() {
                return Err(Error::NonFinite("evaluating f at a probe point".into()));
            }
            Ok(v)
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: 0,
            worst_index: 0,
            probes: 0,
        };
        let mut probe: Vec<Tensor> = params.to_vec();
        for (pi, grads) in analytic.iter().enumerate() {
            for (j, &g) in grads.iter().enumerate() {
                let base = params[pi].values()[j];
                probe[pi].values_mut()[j] = base + h;
                let plus = eval(&probe)?;
                probe[pi].values_mut()[j] = base - h;
                let minus = eval(&probe)?;
                probe[pi].values_mut()[j] = base;

                let numeric = (plus - minus) / (2.0 * h);
                let rel = (g - numeric).abs() / numeric.abs().max(1.0);
                report.probes += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_param = pi;
                    report.worst_index = j;
                }
            }
        }
        Ok(report)
    }
}

fn as_param(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.values().to_vec(), true).expect("re-wrapping a valid tensor")
}

/// Maximum relative gradient error of `f` at `params` with step `h`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(h).run(f, params).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v, true).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with a fixed non-symmetric A.
        let a = vec![2.0, -1.0, 0.5, 0.3, 1.5, -0.7, 0.0, 0.4, 3.0];
        let f = |tape: &mut Tape, v: &[Var]| {
            let am = tape.constant(vec![3, 3], a.clone())?;
            let x = tape.reshape(v[0], vec![3, 1])?;
            let ax = tape.matmul(am, x)?;
            let prod = tape.mul(x, ax)?;
            Ok(tape.sum(prod))
        };
        let err = grad_check(f, &[t(vec![3], vec![0.7, -1.2, 2.1])], 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let f = |tape: &mut Tape, v: &[Var]| Ok(tape.sum(v[0]));
        assert!(grad_check(f, &[t(vec![1], vec![1.0])], 0.0).is_err());
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // log(x) at x = 1e-6 with h = 1e-3 leaves the domain on the minus side.
        let f = |tape: &mut Tape, v: &[Var]| {
            let l = tape.log(v[0])?;
            Ok(tape.sum(l))
        };
        assert!(grad_check(f, &[t(vec![1], vec![1e-6])], 1e-3).is_err());
    }

    #[test]
    fn injected_fault_is_detected() {
        let f = |tape: &mut Tape, v: &[Var]| {
            let s = tape.softmax(v[0])?;
            let w = tape.constant(vec![3], vec![1.0, -2.0, 0.5])?;
            let p = tape.mul(s, w)?;
            Ok(tape.sum(p))
        };
        let params = [t(vec![3], vec![0.2, -0.4, 1.1])];
        let clean = GradCheck::new(1e-5).run(f, &params).unwrap();
        assert!(clean.max_rel_error < 1e-8);
        let broken = GradCheck::new(1e-5)
            .with_fault(Some(OpKind::Softmax))
            .run(f, &params)
            .unwrap();
        assert!(broken.max_rel_error > 1e-2);
    }
}

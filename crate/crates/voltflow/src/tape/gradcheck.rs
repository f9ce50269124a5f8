//! Central-finite-difference verification of tape gradients.
//!
//! Any loss that exposes its trainable parameters through [`ScalarObjective`]
//! can be checked: the analytic gradient from one backward pass is compared
//! component-by-component against `(f(θ+ε) − f(θ−ε)) / 2ε`. Detached
//! subexpressions must enter the objective as fixed inputs, not checked
//! parameters — the difference oracle sees through stop-gradients by design.

use super::{TapeError, Tensor};
use thiserror::Error;

/// A deterministic scalar loss over a fixed set of parameter tensors.
/// Evaluations must be pure functions of the parameters (fix batches, noise
/// draws, and time samples before checking).
pub trait ScalarObjective {
    /// One name per parameter tensor, aligned with `get_params`.
    fn param_names(&self) -> Vec<String>;
    fn get_params(&self) -> Vec<Tensor>;
    fn set_params(&mut self, params: &[Tensor]);
    /// Loss at the current parameters (forward only).
    fn loss(&mut self) -> f64;
    /// Loss plus analytic gradients aligned with `get_params`.
    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor>), TapeError>;
}

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("step size {0} outside (0, 1e-2]")]
    InvalidEps(f64),
    #[error("non-finite loss while perturbing parameter `{param}`")]
    NonFiniteLoss { param: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// max over components of |analytic − central| / (|analytic| + |central| + 1e-12)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_component: usize,
    pub worst_analytic: f64,
    pub worst_central: f64,
    pub components_checked: usize,
}

/// Compare analytic gradients against central differences over every
/// component of every parameter. Parameters are restored afterwards.
pub fn finite_difference_gradcheck(
    obj: &mut dyn ScalarObjective,
    eps: f64,
) -> Result<GradcheckReport, GradcheckError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(GradcheckError::InvalidEps(eps));
    }
    let names = obj.param_names();
    let baseline = obj.get_params();
    let (loss0, grads) = obj.loss_and_grads()?;
    if !loss0.is_finite() {
        return Err(GradcheckError::NonFiniteLoss { param: "<baseline>".into() });
    }

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_component: 0,
        worst_analytic: 0.0,
        worst_central: 0.0,
        components_checked: 0,
    };

    let mut work = baseline.clone();
    for (pi, grad) in grads.iter().enumerate() {
        for ci in 0..grad.data.len() {
            let orig = work[pi].data[ci];

            work[pi].data[ci] = orig + eps;
            obj.set_params(&work);
            let plus = obj.loss();

            work[pi].data[ci] = orig - eps;
            obj.set_params(&work);
            let minus = obj.loss();

            work[pi].data[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                obj.set_params(&baseline);
                return Err(GradcheckError::NonFiniteLoss { param: names[pi].clone() });
            }

            let central = (plus - minus) / (2.0 * eps);
            let analytic = grad.data[ci];
            let rel = (analytic - central).abs() / (analytic.abs() + central.abs() + 1e-12);
            report.components_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = names[pi].clone();
                report.worst_component = ci;
                report.worst_analytic = analytic;
                report.worst_central = central;
            }
        }
    }
    obj.set_params(&baseline);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    /// f(w) = Σ w², optionally with a detached copy of a fixed input mixed in.
    struct Quadratic {
        w: Tensor,
        fixed: Tensor,
        use_detach: bool,
    }

    impl Quadratic {
        fn build(&self) -> (Tape, crate::tape::Var, crate::tape::Var) {
            let mut tape = Tape::new();
            let w = tape.param(&self.w);
            let sq = tape.mul(w, w);
            let root = if self.use_detach {
                // Σ w² + Σ (w ⊙ sg(fixed)) — the detached branch is data.
                let f = tape.input(&self.fixed);
                let fd = tape.detach(f);
                let mixed = tape.mul(w, fd);
                let s = tape.add(sq, mixed);
                tape.sum(s)
            } else {
                tape.sum(sq)
            };
            (tape, w, root)
        }
    }

    impl ScalarObjective for Quadratic {
        fn param_names(&self) -> Vec<String> {
            vec!["w".into()]
        }
        fn get_params(&self) -> Vec<Tensor> {
            vec![self.w.clone()]
        }
        fn set_params(&mut self, params: &[Tensor]) {
            self.w = params[0].clone();
        }
        fn loss(&mut self) -> f64 {
            let (tape, _, root) = self.build();
            tape.scalar_value(root)
        }
        fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor>), TapeError> {
            let (mut tape, w, root) = self.build();
            tape.backward(root)?;
            Ok((tape.scalar_value(root), vec![tape.grad_tensor(w)]))
        }
    }

    #[test]
    fn quadratic_matches_central_differences() {
        let mut obj = Quadratic {
            w: Tensor::new(vec![3], vec![0.7, -1.3, 2.1]),
            fixed: Tensor::new(vec![3], vec![0.0; 3]),
            use_detach: false,
        };
        let report = finite_difference_gradcheck(&mut obj, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "quadratic FD is exact: {report:?}");
        assert_eq!(report.components_checked, 3);
    }

    #[test]
    fn detached_branch_still_checks_clean() {
        // The detached factor is a fixed input, so forward and backward agree.
        let mut obj = Quadratic {
            w: Tensor::new(vec![3], vec![0.4, 0.9, -0.2]),
            fixed: Tensor::new(vec![3], vec![1.5, -2.0, 0.3]),
            use_detach: true,
        };
        let report = finite_difference_gradcheck(&mut obj, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let mut obj = Quadratic {
            w: Tensor::new(vec![1], vec![1.0]),
            fixed: Tensor::new(vec![1], vec![0.0]),
            use_detach: false,
        };
        assert!(matches!(
            finite_difference_gradcheck(&mut obj, 0.0),
            Err(GradcheckError::InvalidEps(_))
        ));
        assert!(matches!(
            finite_difference_gradcheck(&mut obj, 0.5),
            Err(GradcheckError::InvalidEps(_))
        ));
    }

    struct Poison;
    impl ScalarObjective for Poison {
        fn param_names(&self) -> Vec<String> {
            vec!["p".into()]
        }
        fn get_params(&self) -> Vec<Tensor> {
            vec![Tensor::new(vec![1], vec![1.0])]
        }
        fn set_params(&mut self, _: &[Tensor]) {}
        fn loss(&mut self) -> f64 {
            f64::NAN
        }
        fn loss_and_grads(&mut self) -> Result<(f64, Vec<Tensor>), TapeError> {
            Ok((1.0, vec![Tensor::new(vec![1], vec![0.0])]))
        }
    }

    #[test]
    fn non_finite_perturbed_loss_names_the_parameter() {
        match finite_difference_gradcheck(&mut Poison, 1e-5) {
            Err(GradcheckError::NonFiniteLoss { param }) => assert_eq!(param, "p"),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}

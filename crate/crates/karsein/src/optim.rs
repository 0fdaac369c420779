//! Parameter slots, the Adam optimizer, and the finite-difference gradient
//! verifier every hand-derived backward pass is checked against.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

/// A trainable parameter together with its gradient buffer.
///
/// The gradient has the same shape as the value and is zeroed at the start of
/// every backward pass.
#[derive(Debug, Clone)]
pub struct GradSlot<F: Scalar> {
    pub value: Matrix<F>,
    pub grad: Matrix<F>,
}

impl<F: Scalar> GradSlot<F> {
    pub fn new(value: Matrix<F>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        GradSlot { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn cast<G: Scalar>(&self) -> GradSlot<G> {
        GradSlot {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Adam optimizer state for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub step: u64,
    pub m: Matrix<F>,
    pub v: Matrix<F>,
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> AdamState<F> {
    /// Defaults beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
        }
    }
}

/// One bias-corrected Adam step on `param.value` using `param.grad`.
///
/// A non-finite gradient aborts the step and names the parameter.
pub fn adam_update<F: Scalar>(
    name: &str,
    param: &mut GradSlot<F>,
    state: &mut AdamState<F>,
) -> Result<()> {
    if !param.grad.all_finite() {
        return Err(Error::non_finite(format!(
            "gradient of parameter '{name}' is not finite; step {} aborted",
            state.step + 1
        )));
    }
    state.step += 1;
    let one = F::one();
    let b1 = state.beta1;
    let b2 = state.beta2;
    // bias corrections computed in f64 to avoid pow-loss at large step counts
    let bc1 = F::from_f64(1.0 - state.beta1.to_f64_val().powi(state.step as i32));
    let bc2 = F::from_f64(1.0 - state.beta2.to_f64_val().powi(state.step as i32));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let g = param.grad.data();
    let w = param.value.data_mut();
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] = w[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Anything exposing an ordered list of named parameter slots.
///
/// The ordering is a contract: checkpoints, Adam states and gradient buffers
/// all index parameters by position in this list.
pub trait ParamGrads<F: Scalar> {
    fn param_count(&self) -> usize;
    fn param_name(&self, idx: usize) -> String;
    fn param(&self, idx: usize) -> &GradSlot<F>;
    fn param_mut(&mut self, idx: usize) -> &mut GradSlot<F>;

    fn zero_grads(&mut self) {
        for i in 0..self.param_count() {
            self.param_mut(i).zero_grad();
        }
    }

    fn total_param_len(&self) -> usize {
        (0..self.param_count()).map(|i| self.param(i).value.len()).sum()
    }
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// max over coordinates of |g_analytic - g_fd| / max(1, |g_fd|)
    pub max_rel_err: f64,
    /// parameter name and flat coordinate of the worst entry
    pub worst_param: String,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub coords_checked: usize,
}

/// Central-difference check of stored analytic gradients against `loss`.
///
/// `loss` must be a pure function of the current parameter values. The
/// analytic gradients are expected to already be present in each slot's
/// `grad` buffer. Perturbation size `h` defaults to 1e-5 at the call sites
/// that verify models.
pub fn finite_diff_check<M, L>(model: &mut M, loss: L, h: f64) -> Result<FiniteDiffReport>
where
    M: ParamGrads<f64>,
    L: Fn(&M) -> Result<f64>,
{
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        coords_checked: 0,
    };
    for p in 0..model.param_count() {
        let n = model.param(p).value.len();
        for k in 0..n {
            let orig = model.param(p).value.data()[k];
            model.param_mut(p).value.data_mut()[k] = orig + h;
            let f_plus = loss(model)?;
            model.param_mut(p).value.data_mut()[k] = orig - h;
            let f_minus = loss(model)?;
            model.param_mut(p).value.data_mut()[k] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::non_finite(format!(
                    "loss is not finite while perturbing {}[{}]",
                    model.param_name(p),
                    k
                )));
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let analytic = model.param(p).grad.data()[k];
            let rel = (analytic - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = model.param_name(p);
                report.worst_coord = k;
                report.worst_analytic = analytic;
                report.worst_fd = fd;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Single-parameter quadratic used to exercise the checker and Adam.
    struct Quadratic {
        w: GradSlot<f64>,
    }

    impl Quadratic {
        fn new(w0: f64) -> Self {
            Quadratic {
                w: GradSlot::new(Matrix::from_vec(1, 1, vec![w0]).unwrap()),
            }
        }
        fn loss(&self) -> f64 {
            let w = self.w.value.get(0, 0);
            w * w
        }
        fn fill_grad(&mut self, scale: f64) {
            let w = self.w.value.get(0, 0);
            self.w.grad.set(0, 0, 2.0 * w * scale);
        }
    }

    impl ParamGrads<f64> for Quadratic {
        fn param_count(&self) -> usize {
            1
        }
        fn param_name(&self, _: usize) -> String {
            "w".to_string()
        }
        fn param(&self, _: usize) -> &GradSlot<f64> {
            &self.w
        }
        fn param_mut(&mut self, _: usize) -> &mut GradSlot<f64> {
            &mut self.w
        }
    }

    #[test]
    fn finite_diff_accepts_correct_gradient() {
        let mut q = Quadratic::new(3.0);
        q.fill_grad(1.0);
        let report = finite_diff_check(&mut q, |m| Ok(m.loss()), 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
        assert_relative_eq!(report.worst_analytic, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn finite_diff_detects_corrupted_gradient() {
        let mut q = Quadratic::new(3.0);
        q.fill_grad(2.0); // doubled on purpose
        let report = finite_diff_check(&mut q, |m| Ok(m.loss()), 1e-5).unwrap();
        assert!(
            (report.max_rel_err - 1.0).abs() < 1e-6,
            "doubling a gradient of 6 vs fd 6 gives |12-6|/6 = 1, got {}",
            report.max_rel_err
        );
    }

    #[test]
    fn adam_zero_grad_leaves_param_unchanged() {
        let mut p = GradSlot::new(Matrix::from_vec(1, 2, vec![0.3f64, -0.7]).unwrap());
        let mut st = AdamState::new(1, 2, 1e-3);
        adam_update("p", &mut p, &mut st).unwrap();
        assert_eq!(p.value.data(), &[0.3, -0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // With m=v=0 and grad g, the bias-corrected first step is
        // lr * g / (|g| + eps'), which for g=1 is ~lr.
        let mut p = GradSlot::new(Matrix::from_vec(1, 1, vec![0.5f64]).unwrap());
        p.grad.set(0, 0, 1.0);
        let mut st = AdamState::new(1, 1, 1e-3);
        adam_update("p", &mut p, &mut st).unwrap();
        assert_relative_eq!(p.value.get(0, 0), 0.5 - 1e-3, epsilon = 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut q = Quadratic::new(1.0);
        let mut st = AdamState::new(1, 1, 1e-2);
        for _ in 0..1000 {
            q.fill_grad(1.0);
            adam_update("w", &mut q.w, &mut st).unwrap();
        }
        assert!(q.w.value.get(0, 0).abs() < 0.05);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = GradSlot::new(Matrix::from_vec(1, 3, vec![0.1f64, 0.2, 0.3]).unwrap());
            let mut st = AdamState::new(1, 3, 1e-3);
            for i in 0..50 {
                for (k, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = ((i * 7 + k) as f64).sin();
                }
                adam_update("p", &mut p, &mut st).unwrap();
            }
            p.value.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = GradSlot::new(Matrix::from_vec(1, 1, vec![0.5f64]).unwrap());
        p.grad.set(0, 0, f64::NAN);
        let mut st = AdamState::new(1, 1, 1e-3);
        let err = adam_update("W_b", &mut p, &mut st).unwrap_err().to_string();
        assert!(err.contains("W_b"), "diagnostic should name the parameter: {err}");
        assert_eq!(st.step, 0, "aborted step must not advance state");
    }
}

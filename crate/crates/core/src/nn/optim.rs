//! First-order optimisers.

use super::{NnError, ParamTree};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    /// Adaptive moment estimation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment accumulators for one [`ParamTree`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    kind: OptimKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamTree, kind: OptimKind, lr: f64) -> Result<Self, NnError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = |t: &ParamTree| (0..t.len()).map(|i| vec![0.0; t.values(i).len()]).collect();
        Ok(Self { kind, lr, step: 0, m: zeros(params), v: zeros(params) })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    /// Applies one update from the gradients held in `params`.
    ///
    /// Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamTree) -> Result<(), NnError> {
        if params.len() != self.m.len()
            || (0..params.len()).any(|i| params.values(i).len() != self.m[i].len())
        {
            return Err(NnError::Shape("optimiser state does not match parameters".into()));
        }
        for i in 0..params.len() {
            if let Some(pos) = params.grad(i).iter().position(|g| !g.is_finite()) {
                return Err(NnError::Numeric(format!(
                    "non-finite gradient in {}[{pos}]",
                    params.name(i)
                )));
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimKind::Sgd => {
                for i in 0..params.len() {
                    let (values, grad) = params.values_and_grad(i);
                    for (x, g) in values.iter_mut().zip(grad) {
                        *x -= lr * g;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let (values, grad) = params.values_and_grad(i);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..values.len() {
                        let g = grad[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tree(x: f64) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("x", vec![1], vec![x]).unwrap();
        t
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut t = scalar_tree(0.7);
        let mut opt = OptimState::new(&t, OptimKind::default(), 1e-3).unwrap();
        opt.step(&mut t).unwrap();
        assert_eq!(t.values(0), &[0.7]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn descends_on_square() {
        let mut t = scalar_tree(1.0);
        let mut opt = OptimState::new(&t, OptimKind::default(), 1e-3).unwrap();
        t.grad_mut(0)[0] = 2.0; // d/dx x² at 1
        opt.step(&mut t).unwrap();
        assert!(t.values(0)[0].abs() < 1.0);
    }

    #[test]
    fn non_finite_grad_is_rejected() {
        let mut t = scalar_tree(1.0);
        let mut opt = OptimState::new(&t, OptimKind::default(), 1e-3).unwrap();
        t.grad_mut(0)[0] = f64::NAN;
        assert!(matches!(opt.step(&mut t), Err(NnError::Numeric(_))));
        assert_eq!(t.values(0), &[1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn sgd_step() {
        let mut t = scalar_tree(1.0);
        let mut opt = OptimState::new(&t, OptimKind::Sgd, 0.1).unwrap();
        t.grad_mut(0)[0] = 2.0;
        opt.step(&mut t).unwrap();
        assert!((t.values(0)[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let t = scalar_tree(1.0);
        assert!(OptimState::new(&t, OptimKind::Sgd, 0.0).is_err());
        assert!(OptimState::new(&t, OptimKind::Sgd, f64::NAN).is_err());
    }
}

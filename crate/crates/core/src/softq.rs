//! Soft action-value composed from a value net and a policy/prior pair:
//!
//! ```text
//! Q(a, s) = V(s) + α · (log π(a|s) − log π̃(a|s))
//! ```
//!
//! The target value net `φ'` and the prior policy `π̃` are frozen copies that
//! only change through [`SoftQ::sync_target`] and [`SoftQ::sync_prior`].

use rand::Rng;

use crate::flow::{FlowConfig, FlowPolicy};
use crate::nn::{Activation, Matrix, Mlp, ParamTree, ParamVars, Tape, Var};
use crate::Error;

const VALUE_PREFIX: &str = "mlp";

/// State → scalar soft value, with a zeroed output layer at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    net: Mlp,
    params: ParamTree,
}

impl ValueFunction {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self, Error> {
        let mut sizes = vec![state_dim];
        sizes.extend(hidden);
        sizes.push(1);
        let mut params = ParamTree::new();
        let net = Mlp::build(&mut params, VALUE_PREFIX, &sizes, Activation::Tanh, rng)?;
        net.zero_output(&mut params);
        Ok(Self { net, params })
    }

    pub fn from_params(params: ParamTree) -> Result<Self, Error> {
        let net = Mlp::attach(&params, VALUE_PREFIX, Activation::Tanh)?;
        if net.out_dim() != 1 {
            return Err(Error::Shape(format!("value net must output 1 value, got {}", net.out_dim())));
        }
        Ok(Self { net, params })
    }

    pub fn state_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree {
        &mut self.params
    }

    /// Recorded `batch × 1` values.
    pub fn forward_vars(&self, tape: &mut Tape, params: &ParamVars, s: Var) -> Result<Var, Error> {
        Ok(self.net.forward(tape, params, s)?)
    }

    pub fn values(&self, s: &Matrix) -> Result<Vec<f64>, Error> {
        Ok(self.net.forward_plain(&self.params, s)?.into_vec())
    }

    pub fn value(&self, s: &[f64]) -> Result<f64, Error> {
        Ok(self.values(&Matrix::row_vector(s))?[0])
    }

    /// Data-dependent init on a batch of states; the output layer stays zero.
    pub fn data_dependent_init<R: Rng + ?Sized>(&mut self, states: &Matrix, rng: &mut R) -> Result<(), Error> {
        self.net.data_dependent_init(&mut self.params, states, rng)?;
        self.net.zero_output(&mut self.params);
        Ok(())
    }
}

/// Policy, prior, value and target value bundled for the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQ {
    policy: FlowPolicy,
    prior: FlowPolicy,
    value: ValueFunction,
    target: ValueFunction,
}

impl SoftQ {
    /// Fresh networks: uniform policy and prior, zero value and target.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        flow: &FlowConfig,
        value_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, Error> {
        let policy = FlowPolicy::new(action_dim, state_dim, flow, rng)?;
        let value = ValueFunction::new(state_dim, value_hidden, rng)?;
        Ok(Self { prior: policy.clone(), target: value.clone(), policy, value })
    }

    /// Assembles the four networks, checking that snapshots match their
    /// live counterparts in layout.
    pub fn from_parts(
        policy: FlowPolicy,
        prior: FlowPolicy,
        value: ValueFunction,
        target: ValueFunction,
    ) -> Result<Self, Error> {
        policy.params().check_same_layout(prior.params())?;
        value.params().check_same_layout(target.params())?;
        if policy.state_dim() != value.state_dim() {
            return Err(Error::Shape(format!(
                "policy sees {}-dim states but the value net {}",
                policy.state_dim(),
                value.state_dim()
            )));
        }
        Ok(Self { policy, prior, value, target })
    }

    pub fn policy(&self) -> &FlowPolicy {
        &self.policy
    }

    pub fn prior(&self) -> &FlowPolicy {
        &self.prior
    }

    pub fn value_fn(&self) -> &ValueFunction {
        &self.value
    }

    pub fn target(&self) -> &ValueFunction {
        &self.target
    }

    /// Live parameters `(θ, φ)`, the only ones the optimiser touches.
    pub fn trainable_mut(&mut self) -> (&mut ParamTree, &mut ParamTree) {
        (self.policy.params_mut(), self.value.params_mut())
    }

    /// Data-dependent init of the live nets on a first batch, then both
    /// snapshots are refreshed so that `π̃ = π` and `φ' = φ` again.
    pub fn data_dependent_init<R: Rng + ?Sized>(
        &mut self,
        states: &Matrix,
        actions: &Matrix,
        rng: &mut R,
    ) -> Result<(), Error> {
        self.policy.data_dependent_init(states, actions, rng)?;
        self.value.data_dependent_init(states, rng)?;
        self.sync_prior();
        self.sync_target();
        Ok(())
    }

    /// `φ' := φ`, bitwise.
    pub fn sync_target(&mut self) {
        self.target = self.value.clone();
    }

    /// `θ̃ := θ`, bitwise.
    pub fn sync_prior(&mut self) {
        self.prior = self.policy.clone();
    }

    pub fn value(&self, s: &[f64]) -> Result<f64, Error> {
        self.value.value(s)
    }

    /// `log π(a|s) − log π̃(a|s)` per row.
    pub fn kl_terms(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>, Error> {
        let lp = self.policy.log_prob_batch(s, a)?;
        let lq = self.prior.log_prob_batch(s, a)?;
        Ok(lp.iter().zip(&lq).map(|(p, q)| p - q).collect())
    }

    pub fn kl_term(&self, s: &[f64], a: &[f64]) -> Result<f64, Error> {
        Ok(self.kl_terms(&Matrix::row_vector(s), &Matrix::row_vector(a))?[0])
    }

    /// `α · kl_term(s, a)`.
    pub fn advantage(&self, s: &[f64], a: &[f64], alpha: f64) -> Result<f64, Error> {
        check_alpha(alpha)?;
        Ok(alpha * self.kl_term(s, a)?)
    }

    pub fn soft_q(&self, s: &[f64], a: &[f64], alpha: f64) -> Result<f64, Error> {
        Ok(self.soft_q_batch(&Matrix::row_vector(s), &Matrix::row_vector(a), alpha)?[0])
    }

    pub fn soft_q_batch(&self, s: &Matrix, a: &Matrix, alpha: f64) -> Result<Vec<f64>, Error> {
        check_alpha(alpha)?;
        let kl = self.kl_terms(s, a)?;
        let v = self.value.values(s)?;
        let q: Vec<f64> = v.iter().zip(&kl).map(|(v, k)| v + alpha * k).collect();
        if let Some(bad) = q.iter().find(|q| !q.is_finite()) {
            return Err(Error::Numeric(format!("soft Q evaluated to {bad}")));
        }
        Ok(q)
    }

    /// Target values `V(s'; φ')`.
    pub fn target_values(&self, s: &Matrix) -> Result<Vec<f64>, Error> {
        self.target.values(s)
    }
}

fn check_alpha(alpha: f64) -> Result<(), Error> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive and finite, got {alpha}")))
    }
}

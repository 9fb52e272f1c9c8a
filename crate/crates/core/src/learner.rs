//! One optimisation step of the soft Q-function:
//!
//! 1. sample a minibatch from replay,
//! 2. `kl_i = log π(a_i|s_i) − log π̃(a_i|s_i)`,
//! 3. solve the temperature on `(V(s_i), kl_i)`,
//! 4. `q_i = α·kl_i + V(s_i)` and `q'_i = r_i + γ·V(s'_i; φ')`,
//! 5. minimise `mean (q_i − q'_i)²` jointly over `θ` and `φ`,
//! 6. refresh the target value net and the prior on their periods.
//!
//! Neither `q'` nor `α` carries gradient.

use rand::Rng;

use crate::nn::{clip_global_norm, Matrix, OptimKind, OptimState, ParamTree, Tape, DEFAULT_LEARNING_RATE};
use crate::replay::{Batch, ReplayBuffer};
use crate::softq::{SoftQ, ValueFunction};
use crate::temperature::{solve_alpha, AlphaSolution, DualBatch, TemperatureConfig};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync_period: u64,
    pub prior_sync_period: u64,
    pub temperature: TemperatureConfig,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub optimizer: OptimKind,
    /// Temperature used until the dual first has an interior minimum.
    pub alpha_init: f64,
    /// When the dual has no interior minimum, keep the previous temperature
    /// instead of jumping to a bound.
    pub keep_alpha_on_boundary: bool,
    /// Never refresh the prior: KL is then measured against the initial
    /// uniform policy, i.e. plain entropy regularisation.
    pub fixed_uniform_prior: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            target_sync_period: 1000,
            prior_sync_period: 1000,
            temperature: TemperatureConfig::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            grad_clip: 1.0,
            optimizer: OptimKind::default(),
            alpha_init: 0.05,
            keep_alpha_on_boundary: true,
            fixed_uniform_prior: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.target_sync_period == 0 || self.prior_sync_period == 0 {
            return Err(Error::Config("sync periods must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("gradient clip must be positive, got {}", self.grad_clip)));
        }
        self.temperature.validate()?;
        if !(self.alpha_init >= self.temperature.alpha_min && self.alpha_init <= self.temperature.alpha_max) {
            return Err(Error::Config(format!(
                "alpha_init {} outside [{}, {}]",
                self.alpha_init, self.temperature.alpha_min, self.temperature.alpha_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepReport {
    pub step: u64,
    pub td_loss: f64,
    pub alpha: f64,
    pub mean_kl: f64,
    pub mean_abs_q: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub alpha_converged: bool,
}

/// `q'_i = r_i + γ·V(s'_i; φ')`, or `r_i` for terminal transitions.
pub fn td_targets(batch: &Batch, target: &ValueFunction, gamma: f64) -> Result<Vec<f64>, Error> {
    let v_next = target.values(&batch.s_next)?;
    Ok(bootstrap(&batch.r, &batch.terminal, &v_next, gamma))
}

fn bootstrap(r: &[f64], terminal: &[bool], v_next: &[f64], gamma: f64) -> Vec<f64> {
    r.iter()
        .zip(terminal)
        .zip(v_next)
        .map(|((r, &done), v)| if done { *r } else { r + gamma * v })
        .collect()
}

/// How the step's temperature is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    /// Solve the dual, falling back to `previous` as configured.
    Solve { previous: f64 },
    Fixed(f64),
}

/// Loss value and gradients for one batch.
#[derive(Debug, Clone)]
pub struct TdEvaluation {
    pub loss: f64,
    pub alpha: f64,
    pub solution: Option<AlphaSolution>,
    pub kl: Vec<f64>,
    pub q: Vec<f64>,
    pub targets: Vec<f64>,
    /// `θ` with gradients filled in.
    pub policy_grads: ParamTree,
    /// `φ` with gradients filled in.
    pub value_grads: ParamTree,
    /// `φ'` with gradients filled in; the stop-gradient makes them zero.
    pub target_grads: ParamTree,
}

/// Records the TD loss on a tape and differentiates it.
pub fn evaluate_td(
    nets: &SoftQ,
    batch: &Batch,
    config: &LearnerConfig,
    alpha: AlphaChoice,
) -> Result<TdEvaluation, Error> {
    let mut tape = Tape::new();
    let pt = tape.params(nets.policy().params());
    let pv = tape.params(nets.value_fn().params());
    let ptar = tape.params(nets.target().params());
    let s = tape.leaf(batch.s.clone());
    let a = tape.leaf(batch.a.clone());
    let s_next = tape.leaf(batch.s_next.clone());

    let logp = nets.policy().log_prob_vars(&mut tape, &pt, s, a)?;
    let prior = nets.prior().log_prob_batch(&batch.s, &batch.a)?;
    let prior = tape.leaf(Matrix::column(&prior));
    let kl = tape.sub(logp, prior)?;
    let v = nets.value_fn().forward_vars(&mut tape, &pv, s)?;

    let kl_values = tape.value(kl).as_slice().to_vec();
    let v_values = tape.value(v).as_slice().to_vec();
    let (alpha, solution) = match alpha {
        AlphaChoice::Fixed(x) => (x, None),
        AlphaChoice::Solve { previous } => {
            let sol = solve_alpha(&DualBatch::new(v_values, kl_values.clone())?, &config.temperature)?;
            let use_previous = config.keep_alpha_on_boundary && !sol.bracketed;
            (if use_previous { previous } else { sol.alpha }, Some(sol))
        }
    };

    let scaled = tape.scale(kl, alpha);
    let q = tape.add(scaled, v)?;
    let v_next = nets.target().forward_vars(&mut tape, &ptar, s_next)?;
    let v_next = tape.detach(v_next);
    let targets = bootstrap(&batch.r, &batch.terminal, tape.value(v_next).as_slice(), config.gamma);
    let target_var = tape.leaf(Matrix::column(&targets));
    let diff = tape.sub(q, target_var)?;
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    let loss_value = tape.value(loss).item().expect("scalar loss");
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("TD loss evaluated to {loss_value}")));
    }
    let grads = tape.backward(loss)?;
    let mut policy_grads = nets.policy().params().clone();
    let mut value_grads = nets.value_fn().params().clone();
    let mut target_grads = nets.target().params().clone();
    grads.write_into(&mut policy_grads, &pt);
    grads.write_into(&mut value_grads, &pv);
    grads.write_into(&mut target_grads, &ptar);
    Ok(TdEvaluation {
        loss: loss_value,
        alpha,
        solution,
        kl: kl_values,
        q: tape.value(q).as_slice().to_vec(),
        targets,
        policy_grads,
        value_grads,
        target_grads,
    })
}

/// Owns the networks and optimiser state.
#[derive(Debug, Clone)]
pub struct Learner {
    config: LearnerConfig,
    nets: SoftQ,
    policy_opt: OptimState,
    value_opt: OptimState,
    step: u64,
    alpha: f64,
    initialised: bool,
}

impl Learner {
    pub fn new(nets: SoftQ, config: LearnerConfig) -> Result<Self, Error> {
        config.validate()?;
        let policy_opt = OptimState::new(nets.policy().params(), config.optimizer, config.learning_rate)?;
        let value_opt = OptimState::new(nets.value_fn().params(), config.optimizer, config.learning_rate)?;
        let alpha = config.alpha_init;
        Ok(Self { config, nets, policy_opt, value_opt, step: 0, alpha, initialised: false })
    }

    /// Resumes from stored networks, skipping data-dependent init.
    pub fn resume(nets: SoftQ, config: LearnerConfig, step: u64, alpha: f64) -> Result<Self, Error> {
        let mut learner = Self::new(nets, config)?;
        learner.step = step;
        learner.alpha = alpha;
        learner.initialised = true;
        Ok(learner)
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn nets(&self) -> &SoftQ {
        &self.nets
    }

    /// Optimisation steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Temperature used by the latest step.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialised(&self) -> bool {
        self.initialised
    }

    /// Samples a minibatch and trains on it. Returns [`Error::NotReady`]
    /// while the buffer holds fewer than a batch of transitions.
    pub fn train_step<R: Rng>(&mut self, replay: &ReplayBuffer, rng: &mut R) -> Result<TrainStepReport, Error> {
        let batch = replay.sample_batch(self.config.batch_size, rng)?;
        self.train_on_batch(&batch, rng)
    }

    /// One optimisation step on a given batch. The very first call runs
    /// data-dependent initialisation on that batch.
    pub fn train_on_batch<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<TrainStepReport, Error> {
        if !self.initialised {
            self.nets.data_dependent_init(&batch.s, &batch.a, rng)?;
            self.initialised = true;
        }
        let eval = evaluate_td(&self.nets, batch, &self.config, AlphaChoice::Solve { previous: self.alpha })?;
        let (policy, value) = self.nets.trainable_mut();
        copy_grads(policy, &eval.policy_grads);
        copy_grads(value, &eval.value_grads);
        let grad_norm = crate::nn::global_grad_norm([&*policy, &*value]);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {grad_norm} at step {}", self.step)));
        }
        clip_global_norm(&mut [&mut *policy, &mut *value], self.config.grad_clip)?;
        self.policy_opt.step(policy)?;
        self.value_opt.step(value)?;
        self.step += 1;
        self.alpha = eval.alpha;
        if self.step % self.config.target_sync_period == 0 {
            self.nets.sync_target();
        }
        if !self.config.fixed_uniform_prior && self.step % self.config.prior_sync_period == 0 {
            self.nets.sync_prior();
        }
        let n = eval.q.len() as f64;
        Ok(TrainStepReport {
            step: self.step,
            td_loss: eval.loss,
            alpha: eval.alpha,
            mean_kl: eval.kl.iter().sum::<f64>() / n,
            mean_abs_q: eval.q.iter().map(|q| q.abs()).sum::<f64>() / n,
            grad_norm,
            alpha_converged: eval.solution.is_some_and(|s| s.converged),
        })
    }
}

fn copy_grads(dst: &mut ParamTree, src: &ParamTree) {
    for i in 0..dst.len() {
        dst.grad_mut(i).copy_from_slice(src.grad(i));
    }
}

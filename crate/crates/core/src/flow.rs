//! State-conditioned Real NVP policy over the action box `(−1, 1)^D`.
//!
//! The map from base sample `z` to action `a` is
//!
//! ```text
//! z ──atanh──▶ x ──coupling₀..coupling₃──▶ y ──tanh──▶ a
//! ```
//!
//! with a uniform base density on the box. Each coupling layer transforms the
//! coordinates outside its mask affinely, `y_u = x_u·exp(σ) + τ`, where the
//! log-scale `σ` and shift `τ` come from MLPs fed with the pass-through
//! coordinates concatenated with the state. When every conditioner outputs
//! zero the couplings are identities and `tanh∘atanh` leaves the uniform base
//! density untouched.

use rand::Rng;

use crate::nn::{Activation, Matrix, Mlp, ParamTree, ParamVars, Tape, Var};
use crate::Error;

pub const BOUNDARY_EPS: f64 = 1e-6;

/// Architecture of a [`FlowPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    /// Hidden widths of every conditioner MLP.
    pub hidden: Vec<usize>,
    /// Log-scales are `scale_bound · tanh(net)`.
    pub scale_bound: f64,
    pub boundary_eps: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { coupling_layers: 4, hidden: vec![64, 64], scale_bound: 2.0, boundary_eps: BOUNDARY_EPS }
    }
}

/// The box `[−1, 1]^dim`; environments rescale to physical units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionBox {
    dim: usize,
}

impl ActionBox {
    pub fn new(dim: usize) -> Result<Self, Error> {
        if dim == 0 {
            return Err(Error::Config("action dimension must be at least 1".into()));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log-volume of the box, `D·log 2`.
    pub fn log_volume(&self) -> f64 {
        self.dim as f64 * std::f64::consts::LN_2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// `true` for pass-through coordinates.
    pub mask: Vec<bool>,
    pass: Vec<usize>,
    transformed: Vec<usize>,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
}

impl CouplingLayer {
    fn new(mask: Vec<bool>, scale_net: Mlp, translate_net: Mlp) -> Self {
        let pass = (0..mask.len()).filter(|&i| mask[i]).collect();
        let transformed = (0..mask.len()).filter(|&i| !mask[i]).collect();
        Self { mask, pass, transformed, scale_net, translate_net }
    }

    /// `[x_pass ‖ s]`, or just `s` when nothing passes through.
    fn conditioner_input(&self, tape: &mut Tape, x: Var, s: Var) -> Result<Var, Error> {
        if self.pass.is_empty() {
            return Ok(s);
        }
        let xp = tape.select_cols(x, &self.pass)?;
        Ok(tape.concat_cols(xp, s)?)
    }

    fn scale_and_shift(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        cond: Var,
        scale_bound: f64,
    ) -> Result<(Var, Var), Error> {
        let raw = self.scale_net.forward(tape, params, cond)?;
        let squashed = tape.tanh(raw);
        let scale = tape.scale(squashed, scale_bound);
        let shift = self.translate_net.forward(tape, params, cond)?;
        Ok((scale, shift))
    }

    fn reassemble(&self, tape: &mut Tape, x: Var, new: Var) -> Result<Var, Error> {
        if self.pass.is_empty() {
            return Ok(new);
        }
        let kept = tape.select_cols(x, &self.pass)?;
        Ok(tape.merge_cols(kept, new, &self.mask)?)
    }
}

/// Alternating half-masks: even layers pass the first `ceil(D/2)`
/// coordinates, odd layers pass the rest. For `D = 1` nothing passes.
pub fn coupling_mask(dim: usize, layer: usize) -> Vec<bool> {
    if dim == 1 {
        return vec![false];
    }
    let half = dim.div_ceil(2);
    (0..dim).map(|j| if layer % 2 == 0 { j < half } else { j >= half }).collect()
}

/// Tape handles of a batched flow evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    /// Output of the map (`a` forward, `z` inverse), `batch × D`.
    pub output: Var,
    /// Log-Jacobian determinant per row, `batch × 1`.
    pub logdet: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    action_box: ActionBox,
    state_dim: usize,
    layers: Vec<CouplingLayer>,
    scale_bound: f64,
    boundary_eps: f64,
    params: ParamTree,
    /// `1.0` except when a sign error is injected for diagnostics.
    squash_sign: f64,
}

impl FlowPolicy {
    /// Builds a flow whose conditioners all output zero, so the policy is
    /// exactly uniform on the box.
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        state_dim: usize,
        config: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self, Error> {
        let action_box = ActionBox::new(action_dim)?;
        if state_dim == 0 {
            return Err(Error::Config("state dimension must be at least 1".into()));
        }
        if config.coupling_layers == 0 {
            return Err(Error::Config("flow needs at least one coupling layer".into()));
        }
        if !(config.boundary_eps > 0.0 && config.boundary_eps < 0.5) {
            return Err(Error::Config(format!("boundary epsilon {} out of range", config.boundary_eps)));
        }
        if !(config.scale_bound > 0.0) {
            return Err(Error::Config("scale bound must be positive".into()));
        }
        let mut params = ParamTree::new();
        let mut layers = Vec::with_capacity(config.coupling_layers);
        for k in 0..config.coupling_layers {
            let mask = coupling_mask(action_dim, k);
            let n_pass = mask.iter().filter(|&&m| m).count();
            let mut sizes = vec![n_pass + state_dim];
            sizes.extend(&config.hidden);
            sizes.push(action_dim - n_pass);
            let scale_net =
                Mlp::build(&mut params, &format!("coupling{k}/scale"), &sizes, Activation::Tanh, rng)?;
            let translate_net =
                Mlp::build(&mut params, &format!("coupling{k}/translate"), &sizes, Activation::Tanh, rng)?;
            layers.push(CouplingLayer::new(mask, scale_net, translate_net));
        }
        let mut flow = Self {
            action_box,
            state_dim,
            layers,
            scale_bound: config.scale_bound,
            boundary_eps: config.boundary_eps,
            params,
            squash_sign: 1.0,
        };
        flow.zero_outputs();
        Ok(flow)
    }

    /// Reattaches an architecture to parameters read back from storage.
    pub fn from_params(
        action_dim: usize,
        state_dim: usize,
        config: &FlowConfig,
        params: ParamTree,
    ) -> Result<Self, Error> {
        let action_box = ActionBox::new(action_dim)?;
        let mut layers = Vec::with_capacity(config.coupling_layers);
        for k in 0..config.coupling_layers {
            let mask = coupling_mask(action_dim, k);
            let n_pass = mask.iter().filter(|&&m| m).count();
            let scale_net = Mlp::attach(&params, &format!("coupling{k}/scale"), Activation::Tanh)?;
            let translate_net = Mlp::attach(&params, &format!("coupling{k}/translate"), Activation::Tanh)?;
            for net in [&scale_net, &translate_net] {
                if net.in_dim() != n_pass + state_dim || net.out_dim() != action_dim - n_pass {
                    return Err(Error::Shape(format!("coupling{k} conditioner has the wrong shape")));
                }
            }
            layers.push(CouplingLayer::new(mask, scale_net, translate_net));
        }
        let expected: usize = layers
            .iter()
            .map(|l| 2 * l.scale_net.layers().len() * 3)
            .sum();
        if expected != params.len() {
            return Err(Error::Shape(format!(
                "flow parameters hold {} entries, architecture expects {expected}",
                params.len()
            )));
        }
        Ok(Self {
            action_box,
            state_dim,
            layers,
            scale_bound: config.scale_bound,
            boundary_eps: config.boundary_eps,
            params,
            squash_sign: 1.0,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }

    pub fn action_box(&self) -> ActionBox {
        self.action_box
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn boundary_eps(&self) -> f64 {
        self.boundary_eps
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree {
        &mut self.params
    }

    /// Flips the sign of the squash-stage log-determinant in both
    /// directions. Only for checking that the diagnostics catch it.
    #[doc(hidden)]
    pub fn inject_squash_sign_error(&mut self) {
        self.squash_sign = -1.0;
    }

    /// Zeroes the last layer of every conditioner: the flow becomes the
    /// identity and the policy uniform.
    pub fn zero_outputs(&mut self) {
        for layer in &self.layers {
            layer.scale_net.zero_output(&mut self.params);
            layer.translate_net.zero_output(&mut self.params);
        }
    }

    fn check_batch(&self, x: &Matrix, s: &Matrix) -> Result<(), Error> {
        if x.cols() != self.action_dim() || s.cols() != self.state_dim || x.rows() != s.rows() {
            return Err(Error::Shape(format!(
                "flow expects {}-dim actions and {}-dim states with equal rows, got {:?} and {:?}",
                self.action_dim(),
                self.state_dim,
                x.shape(),
                s.shape()
            )));
        }
        Ok(())
    }

    /// Recorded base → action map.
    pub fn forward_vars(&self, tape: &mut Tape, params: &ParamVars, z: Var, s: Var) -> Result<FlowVars, Error> {
        let x0 = tape.atanh(z);
        let stage = tape.log1m_sq(z);
        let stage = tape.sum_cols(stage);
        let mut logdet = tape.scale(stage, -1.0);
        let mut x = x0;
        for layer in &self.layers {
            let cond = layer.conditioner_input(tape, x, s)?;
            let (scale, shift) = layer.scale_and_shift(tape, params, cond, self.scale_bound)?;
            let xu = tape.select_cols(x, &layer.transformed)?;
            let e = tape.exp(scale);
            let scaled = tape.mul(xu, e)?;
            let yu = tape.add(scaled, shift)?;
            x = layer.reassemble(tape, x, yu)?;
            let ld = tape.sum_cols(scale);
            logdet = tape.add(logdet, ld)?;
        }
        let a = tape.tanh(x);
        let squash = tape.log_sech2(x);
        let squash = tape.sum_cols(squash);
        let squash = tape.scale(squash, self.squash_sign);
        let logdet = tape.add(logdet, squash)?;
        Ok(FlowVars { output: a, logdet })
    }

    /// Recorded action → base map. Actions are clipped to the safe interior.
    pub fn inverse_vars(&self, tape: &mut Tape, params: &ParamVars, a: Var, s: Var) -> Result<FlowVars, Error> {
        let lim = 1.0 - self.boundary_eps;
        let a = tape.clamp(a, -lim, lim);
        let mut y = tape.atanh(a);
        let stage = tape.log1m_sq(a);
        let stage = tape.sum_cols(stage);
        let mut logdet = tape.scale(stage, -1.0);
        for layer in self.layers.iter().rev() {
            let cond = layer.conditioner_input(tape, y, s)?;
            let (scale, shift) = layer.scale_and_shift(tape, params, cond, self.scale_bound)?;
            let yu = tape.select_cols(y, &layer.transformed)?;
            let centred = tape.sub(yu, shift)?;
            let neg = tape.scale(scale, -1.0);
            let e = tape.exp(neg);
            let xu = tape.mul(centred, e)?;
            y = layer.reassemble(tape, y, xu)?;
            let ld = tape.sum_cols(neg);
            logdet = tape.add(logdet, ld)?;
        }
        let z = tape.tanh(y);
        let squash = tape.log_sech2(y);
        let squash = tape.sum_cols(squash);
        let squash = tape.scale(squash, self.squash_sign);
        let logdet = tape.add(logdet, squash)?;
        Ok(FlowVars { output: z, logdet })
    }

    /// Recorded `log π(a|s)` as a `batch × 1` column.
    pub fn log_prob_vars(&self, tape: &mut Tape, params: &ParamVars, s: Var, a: Var) -> Result<Var, Error> {
        let inv = self.inverse_vars(tape, params, a, s)?;
        Ok(tape.add_scalar(inv.logdet, -self.action_box.log_volume()))
    }

    /// Batched base → action map with per-row log-determinants.
    pub fn forward_batch(&self, z: &Matrix, s: &Matrix) -> Result<(Matrix, Vec<f64>), Error> {
        self.check_batch(z, s)?;
        let lim = 1.0 - self.boundary_eps;
        if let Some(bad) = z.as_slice().iter().find(|v| !(v.abs() <= lim)) {
            return Err(Error::Domain(format!("base sample {bad} outside the interior (−{lim}, {lim})")));
        }
        check_finite(s, "state")?;
        let mut tape = Tape::new();
        let p = tape.params(&self.params);
        let (zv, sv) = (tape.leaf(z.clone()), tape.leaf(s.clone()));
        let out = self.forward_vars(&mut tape, &p, zv, sv)?;
        Ok((tape.value(out.output).clone(), tape.value(out.logdet).as_slice().to_vec()))
    }

    /// Batched action → base map with per-row log-determinants.
    pub fn inverse_batch(&self, a: &Matrix, s: &Matrix) -> Result<(Matrix, Vec<f64>), Error> {
        self.check_batch(a, s)?;
        check_finite(a, "action")?;
        check_finite(s, "state")?;
        let mut tape = Tape::new();
        let p = tape.params(&self.params);
        let (av, sv) = (tape.leaf(a.clone()), tape.leaf(s.clone()));
        let out = self.inverse_vars(&mut tape, &p, av, sv)?;
        Ok((tape.value(out.output).clone(), tape.value(out.logdet).as_slice().to_vec()))
    }

    pub fn log_prob_batch(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>, Error> {
        let (_, logdet) = self.inverse_batch(a, s)?;
        let lv = self.action_box.log_volume();
        Ok(logdet.into_iter().map(|l| l - lv).collect())
    }

    pub fn forward(&self, z: &[f64], s: &[f64]) -> Result<(Vec<f64>, f64), Error> {
        let (a, ld) = self.forward_batch(&Matrix::row_vector(z), &Matrix::row_vector(s))?;
        Ok((a.into_vec(), ld[0]))
    }

    pub fn inverse(&self, a: &[f64], s: &[f64]) -> Result<(Vec<f64>, f64), Error> {
        let (z, ld) = self.inverse_batch(&Matrix::row_vector(a), &Matrix::row_vector(s))?;
        Ok((z.into_vec(), ld[0]))
    }

    /// `log π(a|s)`; zero density (−∞) is never returned because actions are
    /// clipped into the interior first.
    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64, Error> {
        Ok(self.log_prob_batch(&Matrix::row_vector(s), &Matrix::row_vector(a))?[0])
    }

    /// Draws `rows` base samples uniformly from the safe interior.
    pub fn base_samples<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix {
        let lim = 1.0 - self.boundary_eps;
        let data = (0..rows * self.action_dim()).map(|_| rng.random_range(-lim..lim)).collect();
        Matrix::from_vec(rows, self.action_dim(), data).expect("sample buffer")
    }

    /// One action per state row, with its log-density.
    pub fn sample_batch<R: Rng + ?Sized>(&self, s: &Matrix, rng: &mut R) -> Result<(Matrix, Vec<f64>), Error> {
        let z = self.base_samples(s.rows(), rng);
        let (a, logdet) = self.forward_batch(&z, s)?;
        let lv = self.action_box.log_volume();
        Ok((a, logdet.into_iter().map(|l| -lv - l).collect()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64), Error> {
        let (a, lp) = self.sample_batch(&Matrix::row_vector(s), rng)?;
        Ok((a.into_vec(), lp[0]))
    }

    /// Data-dependent initialisation of every conditioner on a batch of
    /// `(state, action)` rows, followed by re-zeroing their output layers.
    ///
    /// Conditioner inputs are what each coupling layer sees while the flow is
    /// the identity: the unsquashed action coordinates and the state.
    pub fn data_dependent_init<R: Rng + ?Sized>(
        &mut self,
        states: &Matrix,
        actions: &Matrix,
        rng: &mut R,
    ) -> Result<(), Error> {
        self.check_batch(actions, states)?;
        let lim = 1.0 - self.boundary_eps;
        let x = actions.map(|v| v.clamp(-lim, lim).atanh());
        for layer in &self.layers {
            let cond = if layer.pass.is_empty() {
                states.clone()
            } else {
                let xp = x.select_cols(&layer.pass);
                concat(&xp, states)
            };
            layer.scale_net.data_dependent_init(&mut self.params, &cond, rng)?;
            layer.translate_net.data_dependent_init(&mut self.params, &cond, rng)?;
        }
        self.zero_outputs();
        Ok(())
    }
}

fn concat(a: &Matrix, b: &Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..a.rows()).map(|r| [a.row(r), b.row(r)].concat()).collect();
    Matrix::from_rows(&rows).expect("equal widths")
}

fn check_finite(m: &Matrix, what: &str) -> Result<(), Error> {
    if m.as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite {what} input")))
    }
}

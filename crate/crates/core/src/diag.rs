//! On-demand numerical self-checks behind `quinoa diag`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::flow::{FlowConfig, FlowPolicy};
use crate::learner::{evaluate_td, AlphaChoice, LearnerConfig};
use crate::nn::{Activation, Matrix, Mlp, ParamTree, Tape, Var};
use crate::replay::{Batch, Transition};
use crate::softq::SoftQ;
use crate::temperature::{
    dual, dual_derivative, frozen_dual, reweighting_kl, soft_values, solve_alpha, DualBatch, TemperatureConfig,
};
use crate::Error;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagKind {
    GradCheck,
    FlowCheck,
    DualCheck,
}

impl std::str::FromStr for DiagKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "gradcheck" => Ok(Self::GradCheck),
            "flowcheck" => Ok(Self::FlowCheck),
            "dualcheck" => Ok(Self::DualCheck),
            _ => Err(Error::Config(format!("unknown diagnostic {s:?} (gradcheck, flowcheck, dualcheck)"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiagOptions {
    pub seed: u64,
    /// Corrupt the flow's squash log-determinant before `flowcheck`.
    pub inject_logdet_fault: bool,
}

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst error observed.
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), error, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagReport {
    pub checks: Vec<Check>,
}

impl DiagReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for DiagReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            writeln!(f, "{verdict} {:<32} max_err={:.3e} tol={:.1e}", c.name, c.error, c.tolerance)?;
        }
        Ok(())
    }
}

pub fn run(kind: DiagKind, options: &DiagOptions) -> Result<DiagReport, Error> {
    let checks = match kind {
        DiagKind::GradCheck => gradcheck(options.seed)?,
        DiagKind::FlowCheck => flowcheck(options)?,
        DiagKind::DualCheck => dualcheck(options.seed)?,
    };
    Ok(DiagReport { checks })
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, or the absolute gap when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Fourth-order central differences of `f` at `x`, one coordinate at a time:
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
pub fn numeric_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |offset: f64| {
                x[i] = orig + offset;
                f(x)
            };
            let near = at(h) - at(-h);
            let far = at(2.0 * h) - at(-2.0 * h);
            x[i] = orig;
            (8.0 * near - far) / (12.0 * h)
        })
        .collect()
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Overwrites every parameter with N(0, scale²) draws.
pub fn randomize_params<R: Rng>(tree: &mut ParamTree, scale: f64, rng: &mut R) {
    let normal = Normal::new(0.0, scale).expect("valid scale");
    for i in 0..tree.len() {
        for v in tree.values_mut(i) {
            *v = normal.sample(rng);
        }
    }
}

type OpBuilder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, Error>>;

/// Gradient check of `sum(w ⊙ build(inputs))` with respect to every input,
/// for a fixed random weighting `w`.
fn check_op(name: &str, inputs: Vec<Matrix>, build: OpBuilder, rng: &mut ChaCha8Rng) -> Result<Check, Error> {
    let record = |inputs: &[Matrix], weights: &Matrix| -> Result<(Tape, Vec<Var>, Var), Error> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let wv = tape.leaf(weights.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss))
    };
    let (rows, cols) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).shape()
    };
    let weights = random_matrix(rows, cols, -1.0, 1.0, rng);
    let (tape, vars, loss) = record(&inputs, &weights)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].as_slice().len();
        let analytic = grads.wrt(*var).map_or_else(|| vec![0.0; n], |g| g.as_slice().to_vec());
        let mut work = inputs.clone();
        let mut x = work[k].as_slice().to_vec();
        let numeric = numeric_gradient(&mut x, FD_STEP, |x| {
            work[k].as_mut_slice().copy_from_slice(x);
            let (t, _, l) = record(&work, &weights).expect("perturbed evaluation");
            t.value(l).item().expect("scalar")
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(Check::new(format!("grad {name}"), worst, GRAD_TOLERANCE))
}

fn gradcheck(seed: u64) -> Result<Vec<Check>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m = |rows, cols, lo, hi, rng: &mut ChaCha8Rng| random_matrix(rows, cols, lo, hi, rng);
    let mut checks = Vec::new();
    let x = m(4, 3, -1.5, 1.5, r);
    let y = m(4, 3, -1.5, 1.5, r);
    let w = m(5, 3, -1.0, 1.0, r);
    let g = m(1, 5, 0.5, 2.0, r);
    let row = m(1, 3, -1.0, 1.0, r);
    let pos = m(4, 3, 0.2, 3.0, r);
    let inner = m(4, 3, -0.9, 0.9, r);
    let unary: Vec<(&str, Matrix, fn(&mut Tape, Var) -> Var)> = vec![
        ("tanh", x.clone(), |t, v| t.tanh(v)),
        ("exp", x.clone(), |t, v| t.exp(v)),
        ("log", pos.clone(), |t, v| t.log(v)),
        ("atanh", inner.clone(), |t, v| t.atanh(v)),
        ("square", x.clone(), |t, v| t.square(v)),
        ("log1m_sq", inner.clone(), |t, v| t.log1m_sq(v)),
        ("log_sech2", x.clone(), |t, v| t.log_sech2(v)),
        ("scale", x.clone(), |t, v| t.scale(v, -1.7)),
        ("add_scalar", x.clone(), |t, v| t.add_scalar(v, 0.3)),
        ("clamp", inner.clone(), |t, v| t.clamp(v, -0.95, 0.95)),
        ("sum_cols", x.clone(), |t, v| t.sum_cols(v)),
        ("sum", x.clone(), |t, v| t.sum(v)),
        ("mean", x.clone(), |t, v| t.mean(v)),
    ];
    for (name, input, f) in unary {
        checks.push(check_op(name, vec![input], Box::new(move |t, v| Ok(f(t, v[0]))), r)?);
    }
    checks.push(check_op("add", vec![x.clone(), y.clone()], Box::new(|t, v| Ok(t.add(v[0], v[1])?)), r)?);
    checks.push(check_op("sub", vec![x.clone(), y.clone()], Box::new(|t, v| Ok(t.sub(v[0], v[1])?)), r)?);
    checks.push(check_op("mul", vec![x.clone(), y.clone()], Box::new(|t, v| Ok(t.mul(v[0], v[1])?)), r)?);
    checks.push(check_op("matmul", vec![x.clone(), w.clone()], Box::new(|t, v| Ok(t.matmul_t(v[0], v[1])?)), r)?);
    let wb = m(1, w.rows(), -1.0, 1.0, r);
    checks.push(check_op(
        "affine",
        vec![x.clone(), w.clone(), wb],
        Box::new(|t, v| Ok(t.affine(v[0], v[1], v[2])?)),
        r,
    )?);
    checks.push(check_op("weight_norm", vec![w.clone(), g], Box::new(|t, v| Ok(t.weight_norm(v[0], v[1])?)), r)?);
    checks.push(check_op("bias_add", vec![x.clone(), row], Box::new(|t, v| Ok(t.add_row(v[0], v[1])?)), r)?);
    checks.push(check_op("select_cols", vec![x.clone()], Box::new(|t, v| Ok(t.select_cols(v[0], &[2, 0])?)), r)?);
    checks.push(check_op("concat_cols", vec![x.clone(), y.clone()], Box::new(|t, v| Ok(t.concat_cols(v[0], v[1])?)), r)?);
    let a = m(4, 2, -1.0, 1.0, r);
    let b = m(4, 1, -1.0, 1.0, r);
    checks.push(check_op(
        "merge_cols",
        vec![a, b],
        Box::new(|t, v| Ok(t.merge_cols(v[0], v[1], &[true, false, true])?)),
        r,
    )?);

    checks.push(mlp_gradcheck(r)?);
    checks.push(flow_gradcheck(r)?);
    checks.push(td_gradcheck(r)?);
    Ok(checks)
}

/// Gradient of a scalar function of one parameter tree, analytic vs numeric.
fn tree_gradcheck(
    name: &str,
    tree: &ParamTree,
    loss: impl Fn(&ParamTree) -> Result<(f64, ParamTree), Error>,
) -> Result<Check, Error> {
    let (_, with_grads) = loss(tree)?;
    let mut worst: f64 = 0.0;
    let mut work = tree.clone();
    for i in 0..tree.len() {
        let mut x = tree.values(i).to_vec();
        let numeric = numeric_gradient(&mut x, FD_STEP, |x| {
            work.values_mut(i).copy_from_slice(x);
            loss(&work).expect("perturbed evaluation").0
        });
        work.values_mut(i).copy_from_slice(tree.values(i));
        worst = worst.max(relative_error(with_grads.grad(i), &numeric));
    }
    Ok(Check::new(name, worst, GRAD_TOLERANCE))
}

fn mlp_gradcheck(rng: &mut ChaCha8Rng) -> Result<Check, Error> {
    let mut tree = ParamTree::new();
    let net = Mlp::build(&mut tree, "net", &[3, 6, 6, 2], Activation::Tanh, rng)?;
    randomize_params(&mut tree, 0.7, rng);
    let input = random_matrix(5, 3, -1.0, 1.0, rng);
    tree_gradcheck("grad mlp", &tree, |tree| {
        let mut tape = Tape::new();
        let p = tape.params(tree);
        let x = tape.leaf(input.clone());
        let out = net.forward(&mut tape, &p, x)?;
        let out = tape.tanh(out);
        let loss = tape.sum(out);
        let grads = tape.backward(loss)?;
        let mut with = tree.clone();
        grads.write_into(&mut with, &p);
        Ok((tape.value(loss).item().expect("scalar"), with))
    })
}

fn small_flow_config() -> FlowConfig {
    FlowConfig { hidden: vec![6, 6], ..Default::default() }
}

fn flow_gradcheck(rng: &mut ChaCha8Rng) -> Result<Check, Error> {
    let mut flow = FlowPolicy::new(2, 2, &small_flow_config(), rng)?;
    randomize_params(flow.params_mut(), 0.5, rng);
    let s = random_matrix(4, 2, -1.0, 1.0, rng);
    let a = random_matrix(4, 2, -0.9, 0.9, rng);
    let base = flow.clone();
    tree_gradcheck("grad flow log_prob", base.params(), |tree| {
        let mut f = base.clone();
        f.params_mut().copy_values_from(tree)?;
        let mut tape = Tape::new();
        let p = tape.params(f.params());
        let (sv, av) = (tape.leaf(s.clone()), tape.leaf(a.clone()));
        let lp = f.log_prob_vars(&mut tape, &p, sv, av)?;
        let loss = tape.sum(lp);
        let grads = tape.backward(loss)?;
        let mut with = tree.clone();
        grads.write_into(&mut with, &p);
        Ok((tape.value(loss).item().expect("scalar"), with))
    })
}

fn random_batch<R: Rng>(n: usize, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Batch, Error> {
    let ts: Vec<Transition> = (0..n)
        .map(|i| Transition {
            s: (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            a: (0..action_dim).map(|_| rng.random_range(-0.95..0.95)).collect(),
            r: rng.random_range(-1.0..1.0),
            s_next: (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            terminal: i % 3 == 0,
        })
        .collect();
    Batch::from_transitions(&ts)
}

/// Random networks with distinct live and snapshot parameters.
pub fn random_soft_q<R: Rng>(state_dim: usize, action_dim: usize, rng: &mut R) -> Result<SoftQ, Error> {
    let mut nets = SoftQ::new(state_dim, action_dim, &small_flow_config(), &[6, 6], rng)?;
    let (p, v) = nets.trainable_mut();
    randomize_params(p, 0.4, rng);
    randomize_params(v, 0.4, rng);
    nets.sync_prior();
    nets.sync_target();
    let (p, v) = nets.trainable_mut();
    randomize_params(p, 0.4, rng);
    randomize_params(v, 0.4, rng);
    Ok(nets)
}

fn td_gradcheck(rng: &mut ChaCha8Rng) -> Result<Check, Error> {
    let nets = random_soft_q(2, 2, rng)?;
    let batch = random_batch(6, 2, 2, rng)?;
    let config = LearnerConfig::default();
    let alpha = AlphaChoice::Fixed(0.7);
    let with_policy = |tree: &ParamTree, policy: bool| -> Result<(f64, ParamTree), Error> {
        let mut n = nets.clone();
        let (p, v) = n.trainable_mut();
        if policy { p } else { v }.copy_values_from(tree)?;
        let e = evaluate_td(&n, &batch, &config, alpha)?;
        Ok((e.loss, if policy { e.policy_grads } else { e.value_grads }))
    };
    let theta = tree_gradcheck("grad td loss / policy", nets.policy().params(), |t| with_policy(t, true))?;
    let phi = tree_gradcheck("grad td loss / value", nets.value_fn().params(), |t| with_policy(t, false))?;
    Ok(Check::new("grad td loss", theta.error.max(phi.error), GRAD_TOLERANCE))
}

/// Midpoint-rule integral of the policy density over the box.
pub fn density_mass(flow: &FlowPolicy, s: &[f64], points: usize) -> Result<f64, Error> {
    // Midpoint rule in u = atanh(a), where the integrand π(tanh u)·sech²(u) is
    // smooth and the boundary layers are resolved.
    let d = flow.action_dim();
    let reach = (1.0 - flow.boundary_eps()).atanh();
    let h = 2.0 * reach / points as f64;
    let grid: Vec<(f64, f64)> = (0..points)
        .map(|i| {
            let u: f64 = -reach + (i as f64 + 0.5) * h;
            (u.tanh(), 1.0 / u.cosh().powi(2))
        })
        .collect();
    let rows: Vec<(Vec<f64>, f64)> = match d {
        1 => grid.iter().map(|&(a, j)| (vec![a], j)).collect(),
        2 => grid.iter().flat_map(|&(a, ja)| grid.iter().map(move |&(b, jb)| (vec![a, b], ja * jb))).collect(),
        _ => return Err(Error::Shape("quadrature supports D ≤ 2".into())),
    };
    let mut total = 0.0;
    for chunk in rows.chunks(4096) {
        let a = Matrix::from_rows(&chunk.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>())?;
        let sm = Matrix::from_rows(&vec![s.to_vec(); chunk.len()])?;
        let lp = flow.log_prob_batch(&sm, &a)?;
        total += lp.iter().zip(chunk).map(|(l, (_, j))| l.exp() * j).sum::<f64>();
    }
    Ok(total * h.powi(d as i32))
}

fn flowcheck(options: &DiagOptions) -> Result<Vec<Check>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let r = &mut rng;
    let prepare = |mut f: FlowPolicy| {
        if options.inject_logdet_fault {
            f.inject_squash_sign_error();
        }
        f
    };
    let mut checks = Vec::new();

    let fresh = prepare(FlowPolicy::new(2, 3, &small_flow_config(), r)?);
    let s = random_matrix(200, 3, -2.0, 2.0, r);
    let a = random_matrix(200, 2, -0.999, 0.999, r);
    let uniform = -2.0 * std::f64::consts::LN_2;
    let dev = fresh.log_prob_batch(&s, &a)?.iter().map(|l| (l - uniform).abs()).fold(0.0, f64::max);
    checks.push(Check::new("uniform at init", dev, 1e-9));

    let (mut round, mut logdet_sum, mut consistency, mut mass_err) = (0f64, 0f64, 0f64, 0f64);
    for d in [1, 2] {
        for _ in 0..3 {
            let mut flow = FlowPolicy::new(d, 2, &small_flow_config(), r)?;
            randomize_params(flow.params_mut(), 0.1, r);
            let flow = prepare(flow);
            let s = random_matrix(256, 2, -1.0, 1.0, r);
            let z = random_matrix(256, d, -0.99, 0.99, r);
            let (a, fwd) = flow.forward_batch(&z, &s)?;
            let (z_back, inv) = flow.inverse_batch(&a, &s)?;
            round = round.max(z.as_slice().iter().zip(z_back.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            logdet_sum = logdet_sum.max(fwd.iter().zip(&inv).map(|(f, i)| (f + i).abs()).fold(0.0, f64::max));
            let (sa, lp) = flow.sample_batch(&s, r)?;
            let lp_back = flow.log_prob_batch(&s, &sa)?;
            consistency = consistency.max(lp.iter().zip(&lp_back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            let mass = density_mass(&flow, s.row(0), if d == 1 { 20_000 } else { 400 })?;
            mass_err = mass_err.max((mass - 1.0).abs());
        }
    }
    checks.push(Check::new("round trip |z - z'|", round, 1e-9));
    checks.push(Check::new("forward + inverse logdet", logdet_sum, 1e-9));
    checks.push(Check::new("sample/log_prob consistency", consistency, 1e-9));
    checks.push(Check::new("quadrature mass", mass_err, 1e-2));
    Ok(checks)
}

fn random_dual_batch<R: Rng>(rng: &mut R) -> Result<DualBatch, Error> {
    let n = rng.random_range(8..64);
    let spread = 10f64.powf(rng.random_range(-1.0..2.0));
    let v = (0..n).map(|_| spread * rng.random_range(-1.0..1.0)).collect();
    let kl = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    DualBatch::new(v, kl)
}

fn dualcheck(seed: u64) -> Result<Vec<Check>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = TemperatureConfig::default();
    let eps = config.epsilon;
    let (mut fd, mut argmin, mut budget, mut convex) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..30 {
        let batch = random_dual_batch(&mut rng)?;
        let sol = solve_alpha(&batch, &config)?;
        if !sol.converged {
            continue;
        }
        let alpha = sol.alpha;
        // The derivative differentiates the dual of fixed soft action values.
        for probe in [0.3 * alpha, 3.0 * alpha] {
            let q = soft_values(probe, &batch);
            let h = 1e-6 * probe;
            let num = (frozen_dual(probe + h, &q, eps)? - frozen_dual(probe - h, &q, eps)?) / (2.0 * h);
            fd = fd.max(relative_error(&[dual_derivative(probe, &batch, eps)?], &[num]));
        }
        // The solution minimises the dual of the soft values it produces.
        let q = soft_values(alpha, &batch);
        let grid: Vec<f64> = (0..2001).map(|i| alpha * 10f64.powf(-1.0 + 2.0 * i as f64 / 2000.0)).collect();
        let values = grid.iter().map(|&a| frozen_dual(a, &q, eps)).collect::<Result<Vec<_>, _>>()?;
        let best = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| grid[i]).expect("grid");
        argmin = argmin.max((best - alpha).abs() / alpha);
        // Chord slopes of a convex function never decrease, whatever the spacing.
        let literal = grid.iter().map(|&a| dual(a, &batch, eps)).collect::<Result<Vec<_>, _>>()?;
        for values in [&values, &literal] {
            let slopes: Vec<f64> =
                (1..grid.len()).map(|i| (values[i] - values[i - 1]) / (grid[i] - grid[i - 1])).collect();
            let slope_scale = slopes.iter().fold(1f64, |m, s| m.max(s.abs()));
            for w in slopes.windows(2) {
                convex = convex.max((w[0] - w[1]) / slope_scale);
            }
        }
        budget = budget.max((reweighting_kl(alpha, &batch) - eps).abs());
    }
    Ok(vec![
        Check::new("derivative vs finite difference", fd, 1e-5),
        Check::new("solution vs grid argmin (rel)", argmin, 2.5e-3),
        Check::new("budget identity at optimum", budget, 1e-6),
        Check::new("grid convexity (slope drop)", convex, 1e-6),
    ])
}

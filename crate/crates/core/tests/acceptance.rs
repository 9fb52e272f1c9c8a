//! Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
//! hard criterion fails. Soft criteria are reported but never gate.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quinoa::checkpoint::Checkpoint;
use quinoa::cli::train;
use quinoa::config::RunConfig;
use quinoa::diag::{self, randomize_params, random_soft_q, DiagKind, DiagOptions};
use quinoa::envs::{Bandit, EnvKind, Environment, Pendulum};
use quinoa::flow::{FlowConfig, FlowPolicy};
use quinoa::learner::{evaluate_td, AlphaChoice, Learner, LearnerConfig};
use quinoa::nn::Matrix;
use quinoa::replay::{Batch, Transition};
use quinoa::softq::SoftQ;
use quinoa::temperature::{dual, frozen_dual, reweighting_kl, soft_values, solve_alpha, DualBatch, TemperatureConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

struct Gate {
    hard_failures: usize,
    /// Criterion ids given on the command line; empty means all.
    only: Vec<String>,
}

impl Gate {
    fn selected(&self, id: &str) -> bool {
        self.only.is_empty() || self.only.iter().any(|o| o == id)
    }

    fn run(&mut self, id: &str, name: &str, budget: Duration, soft: bool, f: impl FnOnce() -> Vec<Outcome>) {
        if !self.selected(id) {
            return;
        }
        let start = Instant::now();
        let outcomes = f();
        let elapsed = start.elapsed();
        let within = elapsed <= budget;
        let passed = outcomes.iter().all(|o| o.passed) && within;
        let tag = match (passed, soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL",
            (false, false) => "FAIL",
        };
        let details: Vec<&str> = outcomes.iter().map(|o| o.detail.as_str()).collect();
        println!(
            "[{tag}] {id} {name}: {} ({:.1} s of {:.0} s budget)",
            details.join("; "),
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        );
        if !passed && !soft {
            self.hard_failures += 1;
        }
    }
}

fn info(id: &str, text: &str) {
    println!("[INFO] {id} {text}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lim: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-lim..lim)).collect()).unwrap()
}

// ---- 1: uniform initialisation --------------------------------------------

fn uniform_init() -> Vec<Outcome> {
    let mut worst_lp: f64 = 0.0;
    let mut worst_q: f64 = 0.0;
    let mut r = rng(1);
    for (state_dim, action_dim) in [(1, 1), (3, 1), (4, 2), (2, 3)] {
        let mut nets = SoftQ::new(state_dim, action_dim, &FlowConfig::default(), &[64, 64], &mut r).unwrap();
        let s = uniform_rows(&mut r, 250, state_dim, 3.0);
        let a = uniform_rows(&mut r, 250, action_dim, 1.0);
        // Before and after data-dependent initialisation on a replay-like batch.
        for pass in 0..2 {
            if pass == 1 {
                nets.data_dependent_init(&s, &a, &mut r).unwrap();
            }
            let uniform = -(action_dim as f64) * std::f64::consts::LN_2;
            for lp in nets.policy().log_prob_batch(&s, &a).unwrap() {
                worst_lp = worst_lp.max((lp - uniform).abs());
            }
            for q in nets.soft_q_batch(&s, &a, 0.7).unwrap() {
                worst_q = worst_q.max(q.abs());
            }
        }
    }
    vec![
        Outcome::new(worst_lp < 1e-9, format!("max |log π + D ln 2| = {worst_lp:.1e} (< 1e-9) over 2000 pairs")),
        Outcome::new(worst_q < 1e-9, format!("max |Q| = {worst_q:.1e} (< 1e-9)")),
    ]
}

// ---- 2: flow correctness ---------------------------------------------------

fn random_flow(action_dim: usize, state_dim: usize, r: &mut ChaCha8Rng) -> FlowPolicy {
    let config = FlowConfig { hidden: vec![16, 16], ..FlowConfig::default() };
    let mut flow = FlowPolicy::new(action_dim, state_dim, &config, r).unwrap();
    randomize_params(flow.params_mut(), 0.1, r);
    flow
}

/// Midpoint rule on a uniform grid in `a`, refined near the box edges by a
/// second grid in `atanh(a)`.
fn quadrature_mass(flow: &FlowPolicy, s: &[f64]) -> f64 {
    let d = flow.action_dim();
    // Nodes and weights in one dimension: uniform in a on |a| ≤ 0.9, uniform
    // in u = atanh(a) beyond, where the density varies on a log scale.
    let mut nodes: Vec<(f64, f64)> = Vec::new();
    let inner = 300;
    let h = 1.8 / inner as f64;
    for i in 0..inner {
        nodes.push((-0.9 + (i as f64 + 0.5) * h, h));
    }
    let (u0, u1) = (0.9f64.atanh(), (1.0 - flow.boundary_eps()).atanh());
    let outer = 100;
    let hu = (u1 - u0) / outer as f64;
    for i in 0..outer {
        let u: f64 = u0 + (i as f64 + 0.5) * hu;
        let w = hu / u.cosh().powi(2);
        nodes.push((u.tanh(), w));
        nodes.push((-u.tanh(), w));
    }
    let rows: Vec<(Vec<f64>, f64)> = match d {
        1 => nodes.iter().map(|&(a, w)| (vec![a], w)).collect(),
        _ => nodes.iter().flat_map(|&(a, wa)| nodes.iter().map(move |&(b, wb)| (vec![a, b], wa * wb))).collect(),
    };
    let mut total = 0.0;
    for chunk in rows.chunks(8192) {
        let a = Matrix::from_rows(&chunk.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>()).unwrap();
        let sm = Matrix::from_rows(&vec![s.to_vec(); chunk.len()]).unwrap();
        let lp = flow.log_prob_batch(&sm, &a).unwrap();
        total += lp.iter().zip(chunk).map(|(l, (_, w))| l.exp() * w).sum::<f64>();
    }
    total
}

/// True when every coordinate lies where the inverse is defined without clipping.
fn interior(row: &[f64], eps: f64) -> bool {
    row.iter().all(|a| a.abs() <= 1.0 - eps)
}

fn flow_correctness() -> Vec<Outcome> {
    let mut r = rng(2);
    let (mut round_trip, mut consistency): (f64, f64) = (0.0, 0.0);
    let (mut used, mut saturated) = (0, 0);
    for k in 0..100 {
        let d = 1 + k % 3;
        let flow = random_flow(d, 3, &mut r);
        let eps = flow.boundary_eps();
        let s = uniform_rows(&mut r, 100, 3, 2.0);
        let z = flow.base_samples(100, &mut r);
        let (a, fwd) = flow.forward_batch(&z, &s).unwrap();
        let (back, inv) = flow.inverse_batch(&a, &s).unwrap();
        for i in 0..100 {
            if !interior(a.row(i), eps) {
                saturated += 1;
                continue;
            }
            used += 1;
            for (x, y) in z.row(i).iter().zip(back.row(i)) {
                round_trip = round_trip.max((x - y).abs());
            }
            round_trip = round_trip.max((fwd[i] + inv[i]).abs());
        }
        let (samples, lp) = flow.sample_batch(&s, &mut r).unwrap();
        let check = flow.log_prob_batch(&s, &samples).unwrap();
        for i in 0..100 {
            if interior(samples.row(i), eps) {
                consistency = consistency.max((lp[i] - check[i]).abs());
            }
        }
    }
    info("2", &format!("{saturated} of 10^4 draws map beyond 1 − ε, where the inverse clips; excluded"));
    let mut mass_err: f64 = 0.0;
    for k in 0..6 {
        let d = 1 + k % 2;
        let flow = random_flow(d, 2, &mut r);
        let s = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        mass_err = mass_err.max((quadrature_mass(&flow, &s) - 1.0).abs());
    }
    vec![
        Outcome::new(round_trip < 1e-9, format!("round trip {round_trip:.1e} (< 1e-9) on {used} draws")),
        Outcome::new(mass_err < 1e-2, format!("quadrature mass error {mass_err:.1e} (< 1e-2, D ≤ 2)")),
        Outcome::new(consistency < 1e-9, format!("sample/log_prob {consistency:.1e} (< 1e-9)")),
    ]
}

// ---- 3: gradients ----------------------------------------------------------

fn random_batch(r: &mut ChaCha8Rng, n: usize, state_dim: usize, action_dim: usize) -> Batch {
    let ts: Vec<Transition> = (0..n)
        .map(|i| Transition {
            s: (0..state_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            a: (0..action_dim).map(|_| r.random_range(-0.9..0.9)).collect(),
            r: r.random_range(-1.0..1.0),
            s_next: (0..state_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            terminal: i % 3 == 0,
        })
        .collect();
    Batch::from_transitions(&ts).unwrap()
}

/// Fourth-order central difference of the TD loss in one coordinate.
fn td_loss_fd(nets: &SoftQ, batch: &Batch, policy: bool, param: usize, idx: usize, alpha: f64) -> f64 {
    let config = LearnerConfig::default();
    let h = 1e-4;
    let at = |delta: f64| {
        let mut n = nets.clone();
        let (p, v) = n.trainable_mut();
        let tree = if policy { p } else { v };
        tree.values_mut(param)[idx] += delta;
        evaluate_td(&n, batch, &config, AlphaChoice::Fixed(alpha)).unwrap().loss
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

fn gradients() -> Vec<Outcome> {
    let mut outcomes = Vec::new();
    let mut ops_worst: f64 = 0.0;
    let mut ops_pass = true;
    let mut count = 0;
    for seed in 0..3 {
        let report = diag::run(DiagKind::GradCheck, &DiagOptions { seed, inject_logdet_fault: false }).unwrap();
        for c in &report.checks {
            ops_worst = ops_worst.max(c.error);
            ops_pass &= c.error < 1e-5;
        }
        count = report.checks.len();
    }
    outcomes.push(Outcome::new(ops_pass, format!("{count} checks × 3 seeds, worst rel err {ops_worst:.1e} (< 1e-5)")));

    // The full loss, against differences computed here.
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let nets = random_soft_q(2, 2, &mut r).unwrap();
        let batch = random_batch(&mut r, 8, 2, 2);
        let alpha = r.random_range(0.2..2.0);
        let e = evaluate_td(&nets, &batch, &LearnerConfig::default(), AlphaChoice::Fixed(alpha)).unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (policy, grads) in [(true, &e.policy_grads), (false, &e.value_grads)] {
            for param in 0..grads.len() {
                for idx in 0..grads.grad(param).len().min(6) {
                    analytic.push(grads.grad(param)[idx]);
                    numeric.push(td_loss_fd(&nets, &batch, policy, param, idx, alpha));
                }
            }
        }
        let scale = numeric.iter().fold(0f64, |m, x| m.max(x.abs())).max(1e-8);
        let err = analytic.iter().zip(&numeric).fold(0f64, |m, (a, n)| m.max((a - n).abs())) / scale;
        worst = worst.max(err);
    }
    outcomes.push(Outcome::new(worst < 1e-5, format!("full TD loss vs FD rel err {worst:.1e} (< 1e-5)")));
    outcomes
}

// ---- 4: dual solver --------------------------------------------------------

fn random_dual_batch(r: &mut ChaCha8Rng, with_kl: bool) -> DualBatch {
    let n = r.random_range(2..256);
    let spread = 10f64.powf(r.random_range(-1.0..2.0));
    let kl_amp = if with_kl { 0.1 } else { 0.0 };
    let v = (0..n).map(|_| spread * r.random_range(-1.0..1.0)).collect();
    let kl = (0..n).map(|_| kl_amp * r.random_range(-1.0..1.0)).collect();
    DualBatch::new(v, kl).unwrap()
}

/// Argmin of `f` on a 10^4-point log grid over the solver's interval,
/// refined by a parabola through the best point and its neighbours.
fn log_grid_argmin(config: &TemperatureConfig, f: impl Fn(f64) -> f64) -> f64 {
    let n = 10_000;
    let (lo, hi) = (config.alpha_min.ln(), config.alpha_max.ln());
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| f(x.exp())).collect();
    let k = (0..n).min_by(|&i, &j| ys[i].total_cmp(&ys[j])).unwrap();
    if k == 0 || k == n - 1 {
        return xs[k].exp();
    }
    let (y0, y1, y2) = (ys[k - 1], ys[k], ys[k + 1]);
    let h = xs[1] - xs[0];
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom > 0.0 { 0.5 * h * (y0 - y2) / denom } else { 0.0 };
    (xs[k] + shift.clamp(-h, h)).exp()
}

fn uniform_grid_convex(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 10_000;
    let ys: Vec<f64> = (0..n).map(|i| f(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect();
    ys.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).fold(f64::INFINITY, f64::min)
}

fn dual_solver() -> Vec<Outcome> {
    let config = TemperatureConfig::default();
    let eps = config.epsilon;
    let mut r = rng(4);
    let (mut literal, mut frozen, mut no_kl, mut interior) = (0, 0, 0, 0);
    let (mut budget_err, mut min_second): (f64, f64) = (0.0, f64::INFINITY);
    let mut worst_literal: f64 = 0.0;
    for _ in 0..100 {
        let batch = random_dual_batch(&mut r, true);
        let sol = solve_alpha(&batch, &config).unwrap();
        let rel = |x: f64| (x - sol.alpha).abs() / sol.alpha;

        let grid = log_grid_argmin(&config, |a| dual(a, &batch, eps).unwrap());
        worst_literal = worst_literal.max(rel(grid));
        literal += (rel(grid) < 1e-4) as usize;

        if sol.converged {
            interior += 1;
            budget_err = budget_err.max((reweighting_kl(sol.alpha, &batch) - eps).abs());
            let q = soft_values(sol.alpha, &batch);
            let g = log_grid_argmin(&config, |a| frozen_dual(a, &q, eps).unwrap());
            frozen += (rel(g) < 1e-4) as usize;
        }

        // Same batch with the log-ratio terms removed.
        let plain = DualBatch::new(batch.v().to_vec(), vec![0.0; batch.len()]).unwrap();
        let ps = solve_alpha(&plain, &config).unwrap();
        let pg = log_grid_argmin(&config, |a| dual(a, &plain, eps).unwrap());
        no_kl += ((pg - ps.alpha).abs() / ps.alpha < 1e-4) as usize;

        let (lo, hi) = (sol.alpha / 20.0, sol.alpha * 20.0);
        min_second = min_second.min(uniform_grid_convex(|a| dual(a, &batch, eps).unwrap(), lo, hi));
    }
    info(
        "4",
        &format!(
            "same batches, frozen-Q dual argmin matches α* in {frozen}/{interior}; with kl = 0 the literal argmin matches in {no_kl}/100"
        ),
    );
    vec![
        Outcome::new(
            literal == 100,
            format!("α* vs log-grid argmin of dual within 1e-4: {literal}/100 (worst {worst_literal:.1e})"),
        ),
        Outcome::new(budget_err < 1e-6, format!("reweighting KL − ε {budget_err:.1e} at {interior} interior optima (< 1e-6)")),
        Outcome::new(min_second >= -1e-9, format!("min second difference {min_second:.1e} (≥ −1e-9)")),
    ]
}

// ---- 5: policy/Q duality ---------------------------------------------------

fn duality() -> Vec<Outcome> {
    let mut r = rng(5);
    let (mut worst, mut worst_cells): (f64, f64) = (0.0, 0.0);
    let n = 1001;
    let h = 2.0 / n as f64;
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * h).collect();
    for _ in 0..20 {
        let mut nets = random_soft_q(2, 1, &mut r).unwrap();
        let (p, _) = nets.trainable_mut();
        randomize_params(p, 0.1, &mut r);
        let s = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let alpha = r.random_range(0.1..3.0);
        let sm = Matrix::from_rows(&vec![s.to_vec(); n]).unwrap();
        let am = Matrix::column(&grid);
        let prior = nets.prior().log_prob_batch(&sm, &am).unwrap();
        let q = nets.soft_q_batch(&sm, &am, alpha).unwrap();
        let logits: Vec<f64> = prior.iter().zip(&q).map(|(p, q)| p + q / alpha).collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        let w: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let pi: Vec<f64> = nets.policy().log_prob_batch(&sm, &am).unwrap().iter().map(|l| l.exp()).collect();
        let pz: f64 = pi.iter().sum();
        let tv = 0.5 * w.iter().zip(&pi).map(|(w, p)| (w / z - p / pz).abs()).sum::<f64>();
        let cells = 0.5 * w.iter().zip(&pi).map(|(w, p)| (w / z - p * h).abs()).sum::<f64>();
        worst = worst.max(tv);
        worst_cells = worst_cells.max(cells);
    }
    info("5", &format!("against midpoint cell masses π(a)·Δa instead: {worst_cells:.1e}"));
    vec![Outcome::new(worst < 1e-3, format!("max total variation {worst:.1e} (< 1e-3) on 20 instances, 1001 points"))]
}

// ---- 6, 7: learning --------------------------------------------------------

fn learning_config(env: EnvKind, seed: u64, out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.env = env;
    c.seed = seed;
    c.output_dir = out.to_path_buf();
    match env {
        EnvKind::Bandit => {
            c.total_steps = 50_000;
            c.train_every = 4;
            c.eval_period = 5_000;
            c.eval_episodes = 1_000;
            c.checkpoint_period = 5_000;
            c.learner.alpha_init = 0.05;
        }
        _ => {
            c.total_steps = 200_000;
            c.train_every = 4;
            c.eval_period = 20_000;
            c.eval_episodes = 10;
            c.checkpoint_period = 0;
        }
    }
    c
}

/// Expected bandit reward under the uniform policy by the midpoint rule.
fn bandit_uniform_baseline() -> f64 {
    let n = 200_000;
    let h = 2.0 / n as f64;
    (0..n).map(|i| Bandit::reward(-1.0 + (i as f64 + 0.5) * h)).sum::<f64>() * h / 2.0
}

fn mode_fractions(path: &Path, r: &mut ChaCha8Rng) -> [f64; 2] {
    let ckpt = Checkpoint::load(path).unwrap();
    let s = Matrix::zeros(10_000, 1);
    let (a, _) = ckpt.nets.policy().sample_batch(&s, r).unwrap();
    Bandit::OPTIMA.map(|c| a.as_slice().iter().filter(|x| (*x - c).abs() <= 0.1).count() as f64 / 10_000.0)
}

fn bandit_learning() -> (Vec<Outcome>, Vec<Outcome>) {
    let baseline = bandit_uniform_baseline();
    info("6", &format!("uniform-policy baseline by quadrature: {baseline:.4}"));
    let mut finals = Vec::new();
    let mut multimodal = Vec::new();
    let mut r = rng(6);
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&learning_config(EnvKind::Bandit, seed, dir.path())).unwrap();
        let ret = summary.final_eval.unwrap().mean_return;
        finals.push(ret);
        let mut best = [0.0f64; 2];
        let mut both = false;
        for step in (5_000..=50_000).step_by(5_000) {
            let path = dir.path().join(format!("checkpoint_{step}"));
            let f = mode_fractions(&path, &mut r);
            best = [best[0].max(f[0]), best[1].max(f[1])];
            both |= f[0] >= 0.1 && f[1] >= 0.1;
        }
        multimodal.push(both);
        info(
            "6",
            &format!("seed {seed}: final eval {ret:.4}, peak mass near −0.7 {:.3}, near +0.7 {:.3}", best[0], best[1]),
        );
    }
    let mean = finals.iter().sum::<f64>() / 3.0;
    let hard = vec![
        Outcome::new(mean >= 0.85, format!("mean eval return {mean:.4} over 3 seeds (≥ 0.85)")),
        Outcome::new(baseline < 0.85, format!("uniform baseline {baseline:.4}")),
    ];
    let seeds = multimodal.iter().filter(|b| **b).count();
    let soft = vec![Outcome::new(seeds >= 1, format!("≥ 10% near both optima at some checkpoint in {seeds}/3 seeds (≥ 1)"))];
    (hard, soft)
}

fn pendulum_uniform_baseline() -> f64 {
    let mut r = rng(7);
    let mut env = Pendulum::default();
    let episodes = 100;
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset(&mut r);
        for _ in 0..Pendulum::MAX_STEPS {
            total += env.step(&[r.random_range(-1.0..1.0)]).unwrap().reward;
        }
    }
    total / episodes as f64
}

fn pendulum_learning() -> Vec<Outcome> {
    let baseline = pendulum_uniform_baseline();
    info("7", &format!("uniform-policy baseline over 100 episodes: {baseline:.1}"));
    let mut finals = Vec::new();
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&learning_config(EnvKind::Pendulum, seed, dir.path())).unwrap();
        let ret = summary.final_eval.unwrap().mean_return;
        info("7", &format!("seed {seed}: final eval {ret:.1} after {} learner steps", summary.train_steps));
        finals.push(ret);
    }
    finals.sort_by(f64::total_cmp);
    let median = finals[1];
    vec![
        Outcome::new(baseline <= -1000.0, format!("uniform baseline {baseline:.1} (≤ −1000)")),
        Outcome::new(median >= -400.0, format!("median eval return {median:.1} over 3 seeds (≥ −400)")),
    ]
}

// ---- 8: plumbing -----------------------------------------------------------

fn plumbing() -> Vec<Outcome> {
    let mut r = rng(8);
    let nets = random_soft_q(2, 1, &mut r).unwrap();
    let batch = random_batch(&mut r, 16, 2, 1);
    let e = evaluate_td(&nets, &batch, &LearnerConfig::default(), AlphaChoice::Fixed(0.5)).unwrap();
    let stop_grad = (0..e.target_grads.len()).all(|i| e.target_grads.grad(i).iter().all(|g| *g == 0.0));

    let config = LearnerConfig { target_sync_period: 5, prior_sync_period: 7, ..LearnerConfig::default() };
    let mut learner = Learner::new(random_soft_q(2, 1, &mut r).unwrap(), config).unwrap();
    let mut syncs = true;
    let (mut target, mut prior) = (None::<SoftQ>, None::<SoftQ>);
    for step in 1..=21u64 {
        learner.train_on_batch(&random_batch(&mut r, 16, 2, 1), &mut r).unwrap();
        let n = learner.nets();
        if step % 5 == 0 {
            syncs &= n.target().params().values_bitwise_eq(n.value_fn().params());
            target = Some(n.clone());
        } else if let Some(t) = &target {
            syncs &= n.target().params().values_bitwise_eq(t.target().params());
        }
        if step % 7 == 0 {
            syncs &= n.prior().params().values_bitwise_eq(n.policy().params());
            prior = Some(n.clone());
        } else if let Some(p) = &prior {
            syncs &= n.prior().params().values_bitwise_eq(p.prior().params());
        }
    }

    let ckpt = Checkpoint { nets: learner.nets().clone(), flow: FlowConfig { hidden: vec![6, 6], ..FlowConfig::default() }, step: learner.step(), alpha: learner.alpha() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let ckpt_ok = back.to_bytes() == std::fs::read(&path).unwrap()
        && back.nets.policy().params().values_bitwise_eq(ckpt.nets.policy().params())
        && back.nets.value_fn().params().values_bitwise_eq(ckpt.nets.value_fn().params())
        && back.nets.target().params().values_bitwise_eq(ckpt.nets.target().params())
        && back.nets.prior().params().values_bitwise_eq(ckpt.nets.prior().params());

    let rerun = |dir: &Path| {
        let mut c = RunConfig::default();
        c.env = EnvKind::Pendulum;
        c.total_steps = 1_500;
        c.eval_period = 500;
        c.eval_episodes = 2;
        c.learner.batch_size = 32;
        c.min_replay = 200;
        c.flow.hidden = vec![16, 16];
        c.value_hidden = vec![16, 16];
        c.checkpoint_period = 0;
        c.dump_trajectories = true;
        c.output_dir = dir.to_path_buf();
        train(&c).unwrap();
        ["metrics.csv", "plot.csv", "trajectories.csv", "final_checkpoint", "manifest.txt"]
            .map(|f| std::fs::read(dir.join(f)).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (rerun(a.path()), rerun(b.path()));
    // The manifest records the output directory, so compare it without that line.
    let strip = |m: &[u8]| String::from_utf8_lossy(m).lines().filter(|l| !l.starts_with("output_dir")).collect::<Vec<_>>().join("\n");
    let identical = ra[..4] == rb[..4] && strip(&ra[4]) == strip(&rb[4]);

    vec![
        Outcome::new(stop_grad, format!("target gradients exactly zero: {stop_grad}")),
        Outcome::new(syncs, format!("syncs bitwise and snapshots frozen between them: {syncs}")),
        Outcome::new(ckpt_ok, format!("checkpoint round trip bitwise: {ckpt_ok}")),
        Outcome::new(identical, format!("deterministic reruns byte-identical: {identical}")),
    ]
}

fn main() -> ExitCode {
    let only = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut gate = Gate { hard_failures: 0, only };
    let secs = Duration::from_secs;
    gate.run("1", "uniform initialisation", secs(1), false, uniform_init);
    gate.run("2", "flow correctness", secs(30), false, flow_correctness);
    gate.run("3", "gradient suite", secs(60), false, gradients);
    gate.run("4", "dual solver", secs(30), false, dual_solver);
    gate.run("5", "policy/Q duality", secs(10), false, duality);
    let mut soft = Vec::new();
    gate.run("6", "learning, bandit", secs(600), false, || {
        let (hard, s) = bandit_learning();
        soft = s;
        hard
    });
    gate.run("6", "multimodality (soft)", secs(600), true, || soft);
    gate.run("7", "learning, pendulum", secs(1800), false, pendulum_learning);
    gate.run("8", "plumbing", secs(120), false, plumbing);
    println!("acceptance: {} hard criteria failed", gate.hard_failures);
    if gate.hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}


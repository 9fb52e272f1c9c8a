//! Run configuration in a flat `key = value` text format.
//!
//! Sources are layered as defaults, then a config file, then command-line
//! settings. Unknown keys are rejected at every layer. The resolved
//! configuration is written back in the same format as the run manifest, so
//! a manifest can be fed straight back in as a config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::envs::EnvKind;
use crate::flow::FlowConfig;
use crate::learner::LearnerConfig;
use crate::nn::OptimKind;
use crate::Error;

/// Environment variable that overrides the output directory.
pub const OUT_ENV_VAR: &str = "QUINOA_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    /// Environment steps to run.
    pub total_steps: u64,
    /// Evaluate every this many environment steps; 0 disables periodic evals.
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub learner: LearnerConfig,
    pub flow: FlowConfig,
    pub value_hidden: Vec<usize>,
    pub replay_capacity: usize,
    /// Transitions required before the first update.
    pub min_replay: usize,
    /// One optimisation step every this many environment steps.
    pub train_every: u64,
    /// Write `checkpoint_<step>` every this many environment steps; 0 disables.
    pub checkpoint_period: u64,
    pub output_dir: PathBuf,
    /// Also write every transition to `trajectories.csv`.
    pub dump_trajectories: bool,
    /// Run the actor in a second thread (not deterministic).
    pub two_context: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Pendulum,
            seed: 0,
            total_steps: 200_000,
            eval_period: 5_000,
            eval_episodes: 10,
            learner: LearnerConfig::default(),
            flow: FlowConfig::default(),
            value_hidden: vec![64, 64],
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            min_replay: 1_000,
            train_every: 1,
            checkpoint_period: 50_000,
            output_dir: PathBuf::from("quinoa-out"),
            dump_trajectories: false,
            two_context: false,
        }
    }
}

/// Every accepted key with a one-line description, in manifest order.
pub const KEYS: &[(&str, &str)] = &[
    ("env", "pendulum | pointmass | bandit"),
    ("seed", "random seed"),
    ("total_steps", "environment steps"),
    ("eval_period", "environment steps between evaluations (0 = final only)"),
    ("eval_episodes", "episodes per evaluation"),
    ("gamma", "discount"),
    ("batch_size", "minibatch size"),
    ("target_sync_period", "optimisation steps between target value syncs"),
    ("prior_sync_period", "optimisation steps between prior policy syncs"),
    ("fixed_uniform_prior", "never sync the prior (entropy regularisation)"),
    ("epsilon", "KL budget in nats"),
    ("alpha_min", "lower temperature bound"),
    ("alpha_max", "upper temperature bound"),
    ("alpha_tolerance", "root tolerance of the temperature solve"),
    ("alpha_max_iterations", "iteration cap of the temperature solve"),
    ("alpha_init", "temperature before the dual first has an interior minimum"),
    ("keep_alpha_on_boundary", "keep the previous temperature when the dual minimum is on a bound"),
    ("optimizer", "adam | sgd"),
    ("learning_rate", "optimiser step size"),
    ("adam_beta1", "first-moment decay"),
    ("adam_beta2", "second-moment decay"),
    ("adam_eps", "denominator offset"),
    ("grad_clip", "global gradient-norm clip"),
    ("coupling_layers", "flow coupling layers"),
    ("flow_hidden", "comma-separated conditioner hidden widths"),
    ("scale_bound", "bound on coupling log-scales"),
    ("boundary_eps", "squash clipping margin"),
    ("value_hidden", "comma-separated value-net hidden widths"),
    ("replay_capacity", "replay buffer size"),
    ("min_replay", "transitions before the first update"),
    ("train_every", "environment steps per optimisation step"),
    ("checkpoint_period", "environment steps between checkpoints (0 = final only)"),
    ("output_dir", "directory for metrics, checkpoints and manifest"),
    ("dump_trajectories", "write trajectories.csv"),
    ("two_context", "run the actor in its own thread (non-deterministic)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>, Error> {
    let widths = value.split(',').map(|w| parse::<usize>(key, w.trim())).collect::<Result<Vec<_>, _>>()?;
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config(format!("{key}: widths must be positive, got {value:?}")));
    }
    Ok(widths)
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one setting. Keys accept `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let key = key.replace('-', "_");
        let value = value.trim();
        let l = &mut self.learner;
        let t = &mut l.temperature;
        match key.as_str() {
            "env" => self.env = value.parse()?,
            "seed" => self.seed = parse(&key, value)?,
            "total_steps" => self.total_steps = parse(&key, value)?,
            "eval_period" => self.eval_period = parse(&key, value)?,
            "eval_episodes" => self.eval_episodes = parse(&key, value)?,
            "gamma" => l.gamma = parse(&key, value)?,
            "batch_size" => l.batch_size = parse(&key, value)?,
            "target_sync_period" => l.target_sync_period = parse(&key, value)?,
            "prior_sync_period" => l.prior_sync_period = parse(&key, value)?,
            "fixed_uniform_prior" => l.fixed_uniform_prior = parse_bool(&key, value)?,
            "epsilon" => t.epsilon = parse(&key, value)?,
            "alpha_min" => t.alpha_min = parse(&key, value)?,
            "alpha_max" => t.alpha_max = parse(&key, value)?,
            "alpha_tolerance" => t.tolerance = parse(&key, value)?,
            "alpha_max_iterations" => t.max_iterations = parse(&key, value)?,
            "alpha_init" => l.alpha_init = parse(&key, value)?,
            "keep_alpha_on_boundary" => l.keep_alpha_on_boundary = parse_bool(&key, value)?,
            "optimizer" => {
                l.optimizer = match value {
                    "adam" => match l.optimizer {
                        OptimKind::Adam { .. } => l.optimizer,
                        OptimKind::Sgd => OptimKind::default(),
                    },
                    "sgd" => OptimKind::Sgd,
                    _ => return Err(Error::Config(format!("optimizer: expected adam or sgd, got {value:?}"))),
                }
            }
            "learning_rate" => l.learning_rate = parse(&key, value)?,
            "adam_beta1" | "adam_beta2" | "adam_eps" => {
                let x: f64 = parse(&key, value)?;
                let (mut b1, mut b2, mut eps) = match l.optimizer {
                    OptimKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
                    OptimKind::Sgd => return Err(Error::Config(format!("{key} requires optimizer = adam"))),
                };
                match key.as_str() {
                    "adam_beta1" => b1 = x,
                    "adam_beta2" => b2 = x,
                    _ => eps = x,
                }
                l.optimizer = OptimKind::Adam { beta1: b1, beta2: b2, eps };
            }
            "grad_clip" => l.grad_clip = parse(&key, value)?,
            "coupling_layers" => self.flow.coupling_layers = parse(&key, value)?,
            "flow_hidden" => self.flow.hidden = parse_widths(&key, value)?,
            "scale_bound" => self.flow.scale_bound = parse(&key, value)?,
            "boundary_eps" => self.flow.boundary_eps = parse(&key, value)?,
            "value_hidden" => self.value_hidden = parse_widths(&key, value)?,
            "replay_capacity" => self.replay_capacity = parse(&key, value)?,
            "min_replay" => self.min_replay = parse(&key, value)?,
            "train_every" => self.train_every = parse(&key, value)?,
            "checkpoint_period" => self.checkpoint_period = parse(&key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "dump_trajectories" => self.dump_trajectories = parse_bool(&key, value)?,
            "two_context" => self.two_context = parse_bool(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies the settings of a `key = value` document. Blank lines and
    /// lines starting with `#` are ignored; a key may appear only once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Error> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.replace('-', "_")) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies `--key value` / `--key=value` pairs.
    pub fn apply_args<S: AsRef<str>>(&mut self, args: &[S]) -> Result<(), Error> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key value, got {arg:?}")))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                    (flag, v.to_string())
                }
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Layers file, environment and command-line sources over the defaults.
    ///
    /// `QUINOA_OUT` beats the file but not an explicit `--output-dir`.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, out_env: Option<&str>, args: &[S]) -> Result<Self, Error> {
        let mut config = Self::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        if let Some(dir) = out_env.filter(|d| !d.is_empty()) {
            config.output_dir = PathBuf::from(dir);
        }
        config.apply_args(args)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.learner.validate()?;
        let f = &self.flow;
        if f.coupling_layers == 0 {
            return Err(Error::Config("coupling_layers must be at least 1".into()));
        }
        if !(f.boundary_eps > 0.0 && f.boundary_eps < 0.5) {
            return Err(Error::Config(format!("boundary_eps must lie in (0, 0.5), got {}", f.boundary_eps)));
        }
        if !(f.scale_bound > 0.0 && f.scale_bound.is_finite()) {
            return Err(Error::Config(format!("scale_bound must be positive, got {}", f.scale_bound)));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if self.train_every == 0 {
            return Err(Error::Config("train_every must be at least 1".into()));
        }
        if self.replay_capacity < self.learner.batch_size {
            return Err(Error::Config("replay_capacity must hold at least one batch".into()));
        }
        if self.min_replay > self.replay_capacity {
            return Err(Error::Config("min_replay exceeds replay_capacity".into()));
        }
        if let OptimKind::Adam { beta1, beta2, eps } = self.learner.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }

    /// Value of `key` as it would be written to a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        let l = &self.learner;
        let t = &l.temperature;
        let adam = match l.optimizer {
            OptimKind::Adam { beta1, beta2, eps } => Some((beta1, beta2, eps)),
            OptimKind::Sgd => None,
        };
        Some(match key {
            "env" => self.env.to_string(),
            "seed" => self.seed.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "eval_period" => self.eval_period.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "gamma" => l.gamma.to_string(),
            "batch_size" => l.batch_size.to_string(),
            "target_sync_period" => l.target_sync_period.to_string(),
            "prior_sync_period" => l.prior_sync_period.to_string(),
            "fixed_uniform_prior" => l.fixed_uniform_prior.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "alpha_min" => t.alpha_min.to_string(),
            "alpha_max" => t.alpha_max.to_string(),
            "alpha_tolerance" => t.tolerance.to_string(),
            "alpha_max_iterations" => t.max_iterations.to_string(),
            "alpha_init" => l.alpha_init.to_string(),
            "keep_alpha_on_boundary" => l.keep_alpha_on_boundary.to_string(),
            "optimizer" => if adam.is_some() { "adam" } else { "sgd" }.to_string(),
            "learning_rate" => l.learning_rate.to_string(),
            "adam_beta1" => adam?.0.to_string(),
            "adam_beta2" => adam?.1.to_string(),
            "adam_eps" => adam?.2.to_string(),
            "grad_clip" => l.grad_clip.to_string(),
            "coupling_layers" => self.flow.coupling_layers.to_string(),
            "flow_hidden" => join_widths(&self.flow.hidden),
            "scale_bound" => self.flow.scale_bound.to_string(),
            "boundary_eps" => self.flow.boundary_eps.to_string(),
            "value_hidden" => join_widths(&self.value_hidden),
            "replay_capacity" => self.replay_capacity.to_string(),
            "min_replay" => self.min_replay.to_string(),
            "train_every" => self.train_every.to_string(),
            "checkpoint_period" => self.checkpoint_period.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "dump_trajectories" => self.dump_trajectories.to_string(),
            "two_context" => self.two_context.to_string(),
            _ => return None,
        })
    }

    /// The resolved configuration as a loadable `key = value` document.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            if let Some(v) = self.get(key) {
                writeln!(out, "{key} = {v}").expect("write to string");
            }
        }
        out
    }
}

//! Training, evaluation and diagnostics entry points behind the binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actor::{evaluate, write_trajectory_csv, Actor, ActorStep, Evaluation};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, KEYS, OUT_ENV_VAR};
use crate::diag::{DiagKind, DiagOptions};
use crate::envs::EnvKind;
use crate::flow::FlowPolicy;
use crate::learner::{Learner, TrainStepReport};
use crate::replay::ReplayBuffer;
use crate::softq::SoftQ;
use crate::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_IO: u8 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const PLOT_FILE: &str = "plot.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const FINAL_CHECKPOINT: &str = "final_checkpoint";
pub const METRICS_HEADER: &str = "step,td_loss,alpha,mean_kl,mean_abs_q,grad_norm,eval_return,alpha_converged";
pub const PLOT_HEADER: &str = "step,eval_return,alpha,td_loss,mean_kl";

/// Learner steps between policy snapshots in two-context mode.
const SNAPSHOT_PERIOD: u64 = 100;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Nn(crate::nn::NnError::Config(_)) => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "quinoa", version, about = "Soft Q-learning with normalizing-flow policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent; settings are `--key value` pairs (see below).
    #[command(after_help = settings_help())]
    Train {
        /// Flat `key = value` config file, overridden by command-line settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        settings: Vec<String>,
    },
    /// Evaluate a checkpoint and write per-episode returns to eval.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Numerical self-checks: gradcheck, flowcheck or dualcheck.
    Diag {
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_logdet_fault: bool,
    },
}

/// Writes to stdout, ignoring a closed pipe.
fn say(args: std::fmt::Arguments) {
    let _ = std::io::stdout().lock().write_fmt(args);
}

fn settings_help() -> String {
    let mut s = String::from("Settings:\n");
    for (key, doc) in KEYS {
        s.push_str(&format!("  --{:<24} {doc}\n", key.replace('_', "-")));
    }
    s
}

/// Runs a parsed command, printing to stdout, and returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Train { config, settings } => {
            let out_env = std::env::var(OUT_ENV_VAR).ok();
            RunConfig::resolve(config.as_deref(), out_env.as_deref(), &settings).and_then(|c| {
                let summary = train(&c)?;
                if let Some(e) = &summary.final_eval {
                    say(format_args!("final mean return {:.4} over {} episodes\n", e.mean_return, e.returns.len()));
                }
                say(format_args!("outputs in {}\n", c.output_dir.display()));
                Ok(())
            })
        }
        Command::Eval { checkpoint, env, episodes, seed, output_dir } => {
            let out = output_dir
                .or_else(|| std::env::var(OUT_ENV_VAR).ok().filter(|s| !s.is_empty()).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            env.parse::<EnvKind>().and_then(|env| {
                let e = eval_checkpoint(&checkpoint, env, episodes, seed, &out)?;
                say(format_args!("mean return {}\n", e.mean_return));
                Ok(())
            })
        }
        Command::Diag { kind, seed, inject_logdet_fault } => kind.parse::<DiagKind>().and_then(|kind| {
            let report = crate::diag::run(kind, &DiagOptions { seed, inject_logdet_fault })?;
            say(format_args!("{report}"));
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Numeric("diagnostics failed".into()))
            }
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub train_steps: u64,
    pub last_report: Option<TrainStepReport>,
    pub final_eval: Option<Evaluation>,
    pub output_dir: PathBuf,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

struct Outputs {
    metrics: BufWriter<File>,
    plot: BufWriter<File>,
    trajectories: Option<BufWriter<File>>,
}

impl Outputs {
    fn create(config: &RunConfig) -> Result<Self, Error> {
        let dir = &config.output_dir;
        fs::create_dir_all(dir)?;
        let manifest = format!("# quinoa {} run manifest\n{}", env!("CARGO_PKG_VERSION"), config.to_text());
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        let mut plot = BufWriter::new(File::create(dir.join(PLOT_FILE))?);
        writeln!(plot, "{PLOT_HEADER}")?;
        let trajectories = if config.dump_trajectories {
            Some(BufWriter::new(File::create(dir.join(TRAJECTORY_FILE))?))
        } else {
            None
        };
        Ok(Self { metrics, plot, trajectories })
    }

    fn flush(&mut self) -> Result<(), Error> {
        self.metrics.flush()?;
        self.plot.flush()?;
        if let Some(t) = &mut self.trajectories {
            t.flush()?;
        }
        Ok(())
    }
}

/// Running means of the training metrics between evaluations.
#[derive(Default)]
struct Window {
    n: u64,
    alpha: f64,
    td_loss: f64,
    mean_kl: f64,
}

impl Window {
    fn add(&mut self, r: &TrainStepReport) {
        self.n += 1;
        self.alpha += r.alpha;
        self.td_loss += r.td_loss;
        self.mean_kl += r.mean_kl;
    }

    fn means(&self) -> [Option<f64>; 3] {
        let n = self.n as f64;
        if self.n == 0 {
            [None; 3]
        } else {
            [Some(self.alpha / n), Some(self.td_loss / n), Some(self.mean_kl / n)]
        }
    }
}

/// Trains per `config`, writing metrics, plot data, checkpoints and the
/// manifest to the output directory.
///
/// Files written before a failure are flushed and kept.
pub fn train(config: &RunConfig) -> Result<TrainSummary, Error> {
    config.validate()?;
    let mut outputs = Outputs::create(config)?;
    let result = if config.two_context {
        train_two_context(config, &mut outputs)
    } else {
        let mut actor = Actor::new(config.env.make());
        let mut actor_rng = seeded(config.seed, 1);
        train_loop(config, &mut outputs, |policy| actor.step(policy, &mut actor_rng))
    };
    let flushed = outputs.flush();
    let summary = result?;
    flushed?;
    Ok(summary)
}

fn train_two_context(config: &RunConfig, outputs: &mut Outputs) -> Result<TrainSummary, Error> {
    let mut init_rng = seeded(config.seed, 0);
    let spec = config.env.make().spec();
    let initial = FlowPolicy::new(spec.action_dim, spec.state_dim, &config.flow, &mut init_rng)?;
    let shared = Arc::new(RwLock::new(Arc::new(initial)));
    let (tx, rx) = mpsc::sync_channel::<Result<ActorStep, Error>>(4096);
    let total = config.total_steps;
    let (env, seed) = (config.env, config.seed);
    std::thread::scope(|scope| {
        let reader = Arc::clone(&shared);
        scope.spawn(move || {
            let mut actor = Actor::new(env.make());
            let mut rng = seeded(seed, 1);
            for _ in 0..total {
                let policy = Arc::clone(&reader.read().expect("policy lock"));
                let step = actor.step(&policy, &mut rng);
                let failed = step.is_err();
                if tx.send(step).is_err() || failed {
                    break;
                }
            }
        });
        let mut calls = 0u64;
        let result = train_loop(config, outputs, |policy| {
            if calls % SNAPSHOT_PERIOD == 0 {
                *shared.write().expect("policy lock") = Arc::new(policy.clone());
            }
            calls += 1;
            rx.recv().map_err(|_| Error::Env("actor stopped early".into()))?
        });
        drop(rx);
        result
    })
}

fn train_loop(
    config: &RunConfig,
    outputs: &mut Outputs,
    mut next: impl FnMut(&FlowPolicy) -> Result<ActorStep, Error>,
) -> Result<TrainSummary, Error> {
    let spec = config.env.make().spec();
    let mut init_rng = seeded(config.seed, 0);
    let mut learner_rng = seeded(config.seed, 2);
    let mut eval_rng = seeded(config.seed, 3);
    let nets = SoftQ::new(spec.state_dim, spec.action_dim, &config.flow, &config.value_hidden, &mut init_rng)?;
    let mut learner = Learner::new(nets, config.learner.clone())?;
    let mut replay = ReplayBuffer::new(config.replay_capacity)?;
    let min_fill = config.min_replay.max(config.learner.batch_size);
    let mut window = Window::default();
    let mut last_report = None;
    let mut final_eval = None;
    let mut eval_env = config.env.make();
    let dir = &config.output_dir;

    for env_step in 1..=config.total_steps {
        let acted = next(learner.nets().policy())?;
        if let Some(out) = &mut outputs.trajectories {
            write_trajectory_csv(out, env_step, std::slice::from_ref(&acted.transition), env_step == 1)?;
        }
        replay.push(acted.transition);

        let report = if replay.len() >= min_fill && env_step % config.train_every == 0 {
            let r = learner.train_step(&replay, &mut learner_rng)?;
            window.add(&r);
            last_report = Some(r);
            Some(r)
        } else {
            None
        };

        let is_last = env_step == config.total_steps;
        let eval_now = is_last || (config.eval_period > 0 && env_step % config.eval_period == 0);
        let eval = if eval_now {
            let e = evaluate(eval_env.as_mut(), learner.nets().policy(), config.eval_episodes, &mut eval_rng)?;
            let [alpha, td, kl] = window.means();
            writeln!(outputs.plot, "{env_step},{},{},{},{}", e.mean_return, fmt_opt(alpha), fmt_opt(td), fmt_opt(kl))?;
            window = Window::default();
            let mean = e.mean_return;
            if is_last {
                final_eval = Some(e);
            }
            Some(mean)
        } else {
            None
        };

        if report.is_some() || eval.is_some() {
            let (td, alpha, kl, q, g, conv) = match report {
                Some(r) => (
                    Some(r.td_loss),
                    Some(r.alpha),
                    Some(r.mean_kl),
                    Some(r.mean_abs_q),
                    Some(r.grad_norm),
                    u8::from(r.alpha_converged).to_string(),
                ),
                None => (None, None, None, None, None, String::new()),
            };
            writeln!(
                outputs.metrics,
                "{env_step},{},{},{},{},{},{},{conv}",
                fmt_opt(td),
                fmt_opt(alpha),
                fmt_opt(kl),
                fmt_opt(q),
                fmt_opt(g),
                fmt_opt(eval)
            )?;
        }

        if config.checkpoint_period > 0 && env_step % config.checkpoint_period == 0 {
            checkpoint_of(&learner, config).save(&dir.join(format!("checkpoint_{env_step}")))?;
        }
    }
    checkpoint_of(&learner, config).save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainSummary {
        env_steps: config.total_steps,
        train_steps: learner.step(),
        last_report,
        final_eval,
        output_dir: dir.clone(),
    })
}

fn checkpoint_of(learner: &Learner, config: &RunConfig) -> Checkpoint {
    Checkpoint { nets: learner.nets().clone(), flow: config.flow.clone(), step: learner.step(), alpha: learner.alpha() }
}

/// Evaluates a stored policy and writes `eval.csv` into `out_dir`.
pub fn eval_checkpoint(path: &Path, env: EnvKind, episodes: usize, seed: u64, out_dir: &Path) -> Result<Evaluation, Error> {
    let ckpt = Checkpoint::load(path)?;
    let mut env = env.make();
    let spec = env.spec();
    let policy = ckpt.nets.policy();
    if spec.state_dim != policy.state_dim() || spec.action_dim != policy.action_dim() {
        return Err(Error::Config(format!(
            "checkpoint policy is for {}-dim states and {}-dim actions, {} has {} and {}",
            policy.state_dim(),
            policy.action_dim(),
            env.name(),
            spec.state_dim,
            spec.action_dim
        )));
    }
    let mut rng = seeded(seed, 3);
    let e = evaluate(env.as_mut(), policy, episodes, &mut rng)?;
    fs::create_dir_all(out_dir)?;
    let mut out = BufWriter::new(File::create(out_dir.join("eval.csv"))?);
    writeln!(out, "episode,return")?;
    for (i, r) in e.returns.iter().enumerate() {
        writeln!(out, "{i},{r}")?;
    }
    writeln!(out, "mean,{}", e.mean_return)?;
    out.flush()?;
    Ok(e)
}

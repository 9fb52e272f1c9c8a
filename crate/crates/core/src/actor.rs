//! Environment interaction: episodes, single-step acting and evaluation.

use std::io::Write;

use rand::Rng;

use crate::envs::Environment;
use crate::flow::FlowPolicy;
use crate::replay::Transition;
use crate::Error;

/// Transitions of one episode in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    /// True if each `s_next` equals the following `s`.
    pub fn is_chained(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].s_next == w[1].s)
    }
}

/// Runs one episode with actions sampled from `policy`. The episode stops at
/// a terminal step or after `max_steps`; a time limit is not terminal.
pub fn run_episode<R: Rng>(
    env: &mut dyn Environment,
    policy: &FlowPolicy,
    rng: &mut R,
    max_steps: usize,
) -> Result<Trajectory, Error> {
    let mut s = env.reset(rng);
    let mut transitions = Vec::with_capacity(max_steps.min(4096));
    for _ in 0..max_steps {
        let (a, _) = policy.sample(&s, rng)?;
        let step = env.step(&a)?;
        if !step.reward.is_finite() {
            return Err(Error::Env(format!("{} returned reward {}", env.name(), step.reward)));
        }
        let terminal = step.terminal;
        transitions.push(Transition { s, a, r: step.reward, s_next: step.observation.clone(), terminal });
        s = step.observation;
        if terminal {
            break;
        }
    }
    Ok(Trajectory { transitions })
}

/// Steps an environment one transition at a time, resetting between
/// episodes, for interleaving with learner updates.
pub struct Actor {
    env: Box<dyn Environment>,
    max_steps: usize,
    state: Option<Vec<f64>>,
    t: usize,
    episode_return: f64,
    episodes: u64,
}

/// One acted transition, plus the return of the episode it closed, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorStep {
    pub transition: Transition,
    pub finished_return: Option<f64>,
}

impl Actor {
    pub fn new(env: Box<dyn Environment>) -> Self {
        let max_steps = env.spec().max_steps;
        Self { env, max_steps, state: None, t: 0, episode_return: 0.0, episodes: 0 }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn step<R: Rng>(&mut self, policy: &FlowPolicy, rng: &mut R) -> Result<ActorStep, Error> {
        let s = match self.state.take() {
            Some(s) => s,
            None => {
                self.t = 0;
                self.episode_return = 0.0;
                self.env.reset(rng)
            }
        };
        let (a, _) = policy.sample(&s, rng)?;
        let step = self.env.step(&a)?;
        if !step.reward.is_finite() {
            return Err(Error::Env(format!("{} returned reward {}", self.env.name(), step.reward)));
        }
        self.t += 1;
        self.episode_return += step.reward;
        let done = step.terminal || self.t >= self.max_steps;
        let transition = Transition { s, a, r: step.reward, s_next: step.observation.clone(), terminal: step.terminal };
        let finished_return = if done {
            self.episodes += 1;
            Some(self.episode_return)
        } else {
            self.state = Some(step.observation);
            None
        };
        Ok(ActorStep { transition, finished_return })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

/// Mean undiscounted return of `episodes` stochastic-policy episodes.
pub fn evaluate<R: Rng>(
    env: &mut dyn Environment,
    policy: &FlowPolicy,
    episodes: usize,
    rng: &mut R,
) -> Result<Evaluation, Error> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let max_steps = env.spec().max_steps;
    let returns = (0..episodes)
        .map(|_| run_episode(env, policy, rng, max_steps).map(|t| t.total_reward()))
        .collect::<Result<Vec<_>, _>>()?;
    let mean_return = returns.iter().sum::<f64>() / episodes as f64;
    Ok(Evaluation { mean_return, returns })
}

/// Writes `step,s...,a...,r,terminal` rows for each transition.
pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    first_step: u64,
    transitions: &[Transition],
    header: bool,
) -> std::io::Result<()> {
    if let (true, Some(t)) = (header, transitions.first()) {
        let mut cols = vec!["step".to_string()];
        cols.extend((0..t.s.len()).map(|i| format!("s{i}")));
        cols.extend((0..t.a.len()).map(|i| format!("a{i}")));
        cols.push("r".into());
        cols.push("terminal".into());
        writeln!(out, "{}", cols.join(","))?;
    }
    for (k, t) in transitions.iter().enumerate() {
        write!(out, "{}", first_step + k as u64)?;
        for x in t.s.iter().chain(&t.a) {
            write!(out, ",{x}")?;
        }
        writeln!(out, ",{},{}", t.r, u8::from(t.terminal))?;
    }
    Ok(())
}

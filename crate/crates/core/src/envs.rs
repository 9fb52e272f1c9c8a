//! Small deterministic continuous-control tasks.
//!
//! All environments take actions in the policy box `[−1, 1]^D` and scale
//! them internally. Out-of-box actions are clipped; non-finite ones are an
//! error.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Physical units per unit of policy action, per dimension.
    pub action_scale: Vec<f64>,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// True only for genuine terminations, never for time limits.
    pub terminal: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step, Error>;
    fn name(&self) -> EnvKind;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Pendulum,
    PointMass,
    Bandit,
}

impl EnvKind {
    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvKind::Pendulum => Box::new(Pendulum::default()),
            EnvKind::PointMass => Box::new(PointMass::default()),
            EnvKind::Bandit => Box::new(Bandit),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::PointMass => "pointmass",
            EnvKind::Bandit => "bandit",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "pointmass" => Ok(EnvKind::PointMass),
            "bandit" => Ok(EnvKind::Bandit),
            other => Err(Error::Config(format!(
                "unknown env {other:?} (expected pendulum, pointmass or bandit)"
            ))),
        }
    }
}

fn checked_action(action: &[f64], dim: usize) -> Result<Vec<f64>, Error> {
    if action.len() != dim {
        return Err(Error::Env(format!("expected {dim}-dim action, got {}", action.len())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Env(format!("non-finite action {action:?}")));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Classic torque-limited pendulum swing-up; `θ = 0` is upright.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    pub theta: f64,
    pub theta_dot: f64,
}

impl Pendulum {
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const DT: f64 = 0.05;
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const MAX_STEPS: usize = 200;

    pub fn with_state(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Mechanical energy of the rod about its pivot (upright is maximal
    /// potential energy).
    pub fn energy(&self) -> f64 {
        let inertia = Self::MASS * Self::LENGTH * Self::LENGTH / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot
            + Self::MASS * Self::G * Self::LENGTH / 2.0 * self.theta.cos()
    }

    pub fn reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let w = wrap_angle(theta);
        -(w * w + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::with_state(PI, 0.0)
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec { state_dim: 3, action_dim: 1, action_scale: vec![Self::MAX_TORQUE], max_steps: Self::MAX_STEPS }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, Error> {
        let a = checked_action(action, 1)?;
        let u = Self::MAX_TORQUE * a[0];
        let reward = Self::reward(self.theta, self.theta_dot, u);
        let (g, m, l, dt) = (Self::G, Self::MASS, Self::LENGTH, Self::DT);
        let accel = 3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 * u / (m * l * l);
        self.theta_dot = (self.theta_dot + accel * dt).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * dt;
        Ok(Step { observation: self.observation(), reward, terminal: false })
    }

    fn name(&self) -> EnvKind {
        EnvKind::Pendulum
    }
}

/// Planar double integrator that should settle on the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl PointMass {
    pub const GOAL: [f64; 2] = [0.0, 0.0];
    pub const DT: f64 = 0.1;
    pub const MAX_FORCE: f64 = 1.0;
    pub const MAX_SPEED: f64 = 2.0;
    /// Positions are confined to this box (velocity zeroed on contact).
    pub const ARENA: f64 = 1.0;
    pub const MAX_STEPS: usize = 100;

    pub fn observation(&self) -> Vec<f64> {
        vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self { position: [0.5, 0.5], velocity: [0.0, 0.0] }
    }
}

impl Environment for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            state_dim: 4,
            action_dim: 2,
            action_scale: vec![Self::MAX_FORCE; 2],
            max_steps: Self::MAX_STEPS,
        }
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.position = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
        self.velocity = [0.0, 0.0];
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, Error> {
        let a = checked_action(action, 2)?;
        let dist2: f64 = (0..2).map(|i| (self.position[i] - Self::GOAL[i]).powi(2)).sum();
        let effort: f64 = a.iter().map(|x| x * x).sum();
        let reward = -dist2 - 0.01 * effort;
        for i in 0..2 {
            let force = Self::MAX_FORCE * a[i];
            self.velocity[i] = (self.velocity[i] + force * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            self.position[i] += self.velocity[i] * Self::DT;
            if self.position[i].abs() > Self::ARENA {
                self.position[i] = self.position[i].clamp(-Self::ARENA, Self::ARENA);
                self.velocity[i] = 0.0;
            }
        }
        Ok(Step { observation: self.observation(), reward, terminal: false })
    }

    fn name(&self) -> EnvKind {
        EnvKind::PointMass
    }
}

/// One-step task with two equally good actions at ±0.7.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Bandit;

impl Bandit {
    pub const OPTIMA: [f64; 2] = [-0.7, 0.7];
    /// Twice the variance of each reward bump.
    pub const WIDTH: f64 = 0.02;

    pub fn reward(a: f64) -> f64 {
        Self::OPTIMA.iter().map(|c| (-(a - c) * (a - c) / Self::WIDTH).exp()).sum()
    }
}

impl Environment for Bandit {
    fn spec(&self) -> EnvSpec {
        EnvSpec { state_dim: 1, action_dim: 1, action_scale: vec![1.0], max_steps: 1 }
    }

    fn reset(&mut self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, Error> {
        let a = checked_action(action, 1)?;
        Ok(Step { observation: vec![0.0], reward: Self::reward(a[0]), terminal: true })
    }

    fn name(&self) -> EnvKind {
        EnvKind::Bandit
    }
}

//! Temperature from the convex dual
//!
//! ```text
//! L(α) = α·ε + α·logmeanexp_i(v_i/α + kl_i)
//! ```
//!
//! The solver finds the zero of the derivative taken with the soft action
//! values `q = v + α·kl` held fixed, by Illinois regula falsi in `log α` so
//! the bracket `[alpha_min, alpha_max]` can span many decades. At that zero
//! the softmax reweighting of the batch spends exactly the KL budget.

use crate::Error;

/// Per-sample values `V(s_i)` and log-ratios `log π(a_i|s_i) − log π̃(a_i|s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    v: Vec<f64>,
    kl: Vec<f64>,
}

impl DualBatch {
    pub fn new(v: Vec<f64>, kl: Vec<f64>) -> Result<Self, Error> {
        if v.len() != kl.len() {
            return Err(Error::Shape(format!("dual batch has {} values but {} log-ratios", v.len(), kl.len())));
        }
        if v.is_empty() {
            return Err(Error::Shape("dual batch is empty".into()));
        }
        if !v.iter().chain(&kl).all(|x| x.is_finite()) {
            return Err(Error::Numeric("dual batch holds non-finite entries".into()));
        }
        Ok(Self { v, kl })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn kl(&self) -> &[f64] {
        &self.kl
    }

    /// Exponents `u_i = v_i/α + kl_i`.
    pub fn exponents(&self, alpha: f64) -> Vec<f64> {
        self.v.iter().zip(&self.kl).map(|(v, k)| v / alpha + k).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureConfig {
    /// KL budget in nats.
    pub epsilon: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Required `|dual_derivative|` at an interior solution.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, alpha_min: 1e-6, alpha_max: 1e6, tolerance: 1e-8, max_iterations: 200 }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < self.alpha_max && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < alpha_min < alpha_max, got [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `log(mean(exp(u)))` with max-subtraction.
pub fn log_mean_exp(u: &[f64]) -> f64 {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = u.iter().map(|x| (x - m).exp()).sum();
    m + s.ln() - (u.len() as f64).ln()
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn check_alpha(alpha: f64) -> Result<(), Error> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive and finite, got {alpha}")))
    }
}

fn finite(x: f64, what: &str) -> Result<f64, Error> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} evaluated to {x}")))
    }
}

/// `L(α) = αε + α·logmeanexp(v/α + kl)`.
pub fn dual(alpha: f64, batch: &DualBatch, epsilon: f64) -> Result<f64, Error> {
    check_alpha(alpha)?;
    let u = batch.exponents(alpha);
    finite(alpha * epsilon + alpha * log_mean_exp(&u), "dual")
}

/// `L_q(α) = αε + α·logmeanexp(q/α)` for fixed soft action values `q`.
pub fn frozen_dual(alpha: f64, q: &[f64], epsilon: f64) -> Result<f64, Error> {
    check_alpha(alpha)?;
    let u: Vec<f64> = q.iter().map(|q| q / alpha).collect();
    finite(alpha * epsilon + alpha * log_mean_exp(&u), "frozen dual")
}

/// `ε + logmeanexp(u) − Σ_i w_i·u_i` with `u_i = v_i/α + kl_i` and
/// `w = softmax(u)`, which equals `ε − Σ w_i log(N w_i)`.
///
/// This is the derivative of [`frozen_dual`] with `q_i = v_i + α·kl_i` held
/// fixed, so a root is a temperature that minimises the dual of the soft
/// action values it itself produces. It agrees with `d dual/dα` only when
/// every `kl_i` is zero; otherwise the two differ by `Σ w_i kl_i`.
pub fn dual_derivative(alpha: f64, batch: &DualBatch, epsilon: f64) -> Result<f64, Error> {
    check_alpha(alpha)?;
    let u = batch.exponents(alpha);
    let w = softmax(&u);
    let weighted: f64 = w.iter().zip(&u).map(|(w, u)| w * u).sum();
    finite(epsilon + log_mean_exp(&u) - weighted, "dual derivative")
}

/// Soft action values `q_i = v_i + α·kl_i`.
pub fn soft_values(alpha: f64, batch: &DualBatch) -> Vec<f64> {
    batch.v().iter().zip(batch.kl()).map(|(v, k)| v + alpha * k).collect()
}

/// KL of the self-normalised reweighting from uniform, `Σ w_i log(N w_i)`.
pub fn reweighting_kl(alpha: f64, batch: &DualBatch) -> f64 {
    let w = softmax(&batch.exponents(alpha));
    let n = w.len() as f64;
    w.iter().filter(|&&w| w > 0.0).map(|w| w * (n * w).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSolution {
    pub alpha: f64,
    /// True only for an interior root with `|dL/dα| < tolerance`.
    pub converged: bool,
    /// True when the derivative changed sign on the interval.
    pub bracketed: bool,
    pub iterations: usize,
}

/// Root of [`dual_derivative`] on `[alpha_min, alpha_max]`.
///
/// A root is sought only when the derivative is negative at `alpha_min` and
/// positive at `alpha_max`; otherwise the boundary with the smaller dual value
/// is returned with `converged = false`.
pub fn solve_alpha(batch: &DualBatch, config: &TemperatureConfig) -> Result<AlphaSolution, Error> {
    config.validate()?;
    if batch.len() < 2 {
        return Err(Error::Shape("temperature solve needs at least two samples".into()));
    }
    let eps = config.epsilon;
    let f = |log_alpha: f64| dual_derivative(log_alpha.exp(), batch, eps);
    let (lo_bound, hi_bound) = (config.alpha_min.ln(), config.alpha_max.ln());

    // The sign change is judged between the interval ends. The derivative is
    // not monotone when kl varies, so a sign change found by searching from
    // the inside could be a transient crossing that the far end undoes.
    let (f_lo, f_hi) = (f(lo_bound)?, f(hi_bound)?);
    if !(f_lo < 0.0 && f_hi > 0.0) {
        let at_min = dual(config.alpha_min, batch, eps)? <= dual(config.alpha_max, batch, eps)?;
        let alpha = if at_min { config.alpha_min } else { config.alpha_max };
        return Ok(AlphaSolution { alpha, converged: false, bracketed: false, iterations: 0 });
    }

    // Geometric expansion outward from α = 1 tightens the bracket.
    let start = 0f64.clamp(lo_bound, hi_bound);
    let step = std::f64::consts::LN_10;
    let (mut a, mut b) = ((start - step).max(lo_bound), (start + step).min(hi_bound));
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    let mut iterations = 0;
    while fa >= 0.0 {
        a = (a - step).max(lo_bound);
        fa = if a == lo_bound { f_lo } else { f(a)? };
        iterations += 1;
    }
    while fb <= 0.0 {
        b = (b + step).min(hi_bound);
        fb = if b == hi_bound { f_hi } else { f(b)? };
        iterations += 1;
    }

    // Illinois: halve the retained endpoint's value after two same-side moves.
    let mut side = 0i8;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let fc = f(c)?;
        if fc.abs() < config.tolerance {
            return Ok(AlphaSolution { alpha: c.exp(), converged: true, bracketed: true, iterations });
        }
        if fc > 0.0 {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        if b - a <= 4.0 * f64::EPSILON * b.abs().max(1.0) {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    Ok(AlphaSolution { alpha: mid.exp(), converged: false, bracketed: true, iterations })
}

//! Diffusion schedules for both processes.
//!
//! All coefficient tables live here; the samplers and training code consume
//! them and never recompute schedule quantities on their own.

use crate::error::{HdpError, Result};
use serde::{Deserialize, Serialize};

/// Continuous (DDPM) beta schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Squared-cosine cumulative-alpha schedule with the usual beta cap.
    SquaredCos,
    /// Linear beta ramp from 1e-4 to 0.02.
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = HdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squaredcos" => Ok(ScheduleKind::SquaredCos),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(HdpError::InvalidArgument(format!(
                "unknown continuous schedule kind '{other}'"
            ))),
        }
    }
}

/// Precomputed DDPM coefficients over `K` steps.
///
/// `xi[k]` is the reverse-mean coefficient and `sigma[k]` the reverse-step
/// standard deviation, with `sigma[0] = 0` so the final step is
/// deterministic.
#[derive(Debug, Clone)]
pub struct ContinuousSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub xi: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ContinuousSchedule {
    pub fn k_steps(&self) -> usize {
        self.beta.len()
    }
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Build the full coefficient table for `k_steps` diffusion steps.
pub fn make_continuous_schedule(k_steps: usize, kind: ScheduleKind) -> Result<ContinuousSchedule> {
    if k_steps == 0 {
        return Err(HdpError::InvalidArgument(
            "continuous schedule needs at least one step".into(),
        ));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if k_steps == 1 {
                vec![LINEAR_BETA_END]
            } else {
                (0..k_steps)
                    .map(|k| {
                        LINEAR_BETA_START
                            + (LINEAR_BETA_END - LINEAR_BETA_START) * k as f64
                                / (k_steps - 1) as f64
                    })
                    .collect()
            }
        }
        ScheduleKind::SquaredCos => {
            let f = |t: f64| {
                let x = (t / k_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                    * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let mut prev = 1.0;
            (0..k_steps)
                .map(|k| {
                    let target = f((k + 1) as f64) / f(0.0);
                    let b = (1.0 - target / prev).min(MAX_BETA);
                    prev *= 1.0 - b;
                    b
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(k_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let xi: Vec<f64> = (0..k_steps)
        .map(|k| (1.0 - alpha[k]) / (1.0 - alpha_bar[k]).sqrt())
        .collect();
    let sigma: Vec<f64> = (0..k_steps)
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                (beta[k] * (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k])).sqrt()
            }
        })
        .collect();
    Ok(ContinuousSchedule {
        kind,
        beta,
        alpha,
        alpha_bar,
        xi,
        sigma,
    })
}

/// Keep-probability family for the masking process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAlphaKind {
    /// alpha(t) = 1 - t.
    Linear,
    /// alpha(t) = cos(pi t / 2).
    Cosine,
}

impl std::str::FromStr for MaskAlphaKind {
    type Err = HdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MaskAlphaKind::Linear),
            "cosine" => Ok(MaskAlphaKind::Cosine),
            other => Err(HdpError::InvalidArgument(format!(
                "unknown mask alpha kind '{other}'"
            ))),
        }
    }
}

/// Masking-rate schedule for the discrete process.
///
/// `alpha(t)` is the probability that a token is still unmasked at diffusion
/// time `t in [0, 1]`; `grid` holds the `n + 1` cosine-spaced time points
/// visited at sampling, strictly decreasing from 1 to 0.
#[derive(Debug, Clone)]
pub struct MaskSchedule {
    pub alpha_kind: MaskAlphaKind,
    pub n_steps: usize,
    pub grid: Vec<f64>,
}

impl MaskSchedule {
    pub fn new(n_steps: usize, alpha_kind: MaskAlphaKind) -> Result<Self> {
        if n_steps == 0 {
            return Err(HdpError::InvalidArgument(
                "mask schedule needs at least one step".into(),
            ));
        }
        let grid = (0..=n_steps)
            .map(|i| {
                (std::f64::consts::PI * i as f64 / (2.0 * n_steps as f64))
                    .cos()
                    .max(0.0)
            })
            .collect();
        Ok(MaskSchedule {
            alpha_kind,
            n_steps,
            grid,
        })
    }

    /// Keep probability at diffusion time `t`.
    pub fn alpha(&self, t: f64) -> f64 {
        match self.alpha_kind {
            MaskAlphaKind::Linear => (1.0 - t).clamp(0.0, 1.0),
            MaskAlphaKind::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos().clamp(0.0, 1.0),
        }
    }

    /// ELBO loss weight -alpha'(t) / (1 - alpha(t)).
    pub fn elbo_weight(&self, t: f64) -> f64 {
        match self.alpha_kind {
            MaskAlphaKind::Linear => 1.0 / t,
            MaskAlphaKind::Cosine => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                half_pi * (half_pi * t).sin() / (1.0 - (half_pi * t).cos())
            }
        }
    }

    /// The `(t, s)` pairs visited by the sampler, `t` decreasing.
    pub fn time_pairs(&self) -> Vec<(f64, f64)> {
        (0..self.n_steps)
            .map(|i| (self.grid[i], self.grid[i + 1]))
            .collect()
    }
}

/// Cosine-spaced sampling grid: `n` pairs `(cos(pi i / 2n), cos(pi (i+1) / 2n))`.
pub fn cosine_time_grid(n: usize) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(HdpError::InvalidArgument(
            "cosine time grid needs at least one step".into(),
        ));
    }
    Ok(MaskSchedule::new(n, MaskAlphaKind::Linear)?.time_pairs())
}

/// Probability that a masked token is revealed when stepping from time `t`
/// down to time `s`: `(alpha(s) - alpha(t)) / (1 - alpha(t))`, clamped to
/// [0, 1].
pub fn unmask_fraction(sched: &MaskSchedule, t: f64, s: f64) -> Result<f64> {
    if s >= t {
        return Err(HdpError::InvalidArgument(format!(
            "unmask_fraction requires s < t, got s={s}, t={t}"
        )));
    }
    if !(0.0..=1.0).contains(&t) || s < 0.0 {
        return Err(HdpError::InvalidArgument(format!(
            "times must satisfy 0 <= s < t <= 1, got s={s}, t={t}"
        )));
    }
    let denom = 1.0 - sched.alpha(t);
    if denom <= 0.0 {
        // alpha(t) = 1 means nothing is masked; revealing is vacuous.
        return Ok(1.0);
    }
    Ok(((sched.alpha(s) - sched.alpha(t)) / denom).clamp(0.0, 1.0))
}

//! Forward corruption, training target, and reverse sampling step for the
//! continuous plan.

use crate::error::{HdpError, Result};
use crate::rngcore::{normal_f32, Stream};
use crate::schedules::ContinuousSchedule;
use ndarray::Array2;

/// A horizon x action-dim matrix of normalized robot actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPlan {
    pub values: Array2<f32>,
}

impl ContinuousPlan {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HdpError::InvalidArgument(
                "continuous plan contains non-finite entries".into(),
            ));
        }
        Ok(ContinuousPlan { values })
    }

    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.values.ncols()
    }
}

/// I.i.d. standard normal draws matching the plan it corrupts.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub epsilon: Array2<f32>,
}

impl NoiseSample {
    pub fn draw(rows: usize, cols: usize, rng: &mut Stream) -> Self {
        NoiseSample {
            epsilon: Array2::from_shape_fn((rows, cols), |_| normal_f32(rng)),
        }
    }
}

fn check_step(k: usize, sched: &ContinuousSchedule) -> Result<()> {
    if k >= sched.k_steps() {
        return Err(HdpError::InvalidArgument(format!(
            "diffusion step {k} out of range for K={}",
            sched.k_steps()
        )));
    }
    Ok(())
}

/// Sample the forward corruption at step `k`:
/// `corrupted = sqrt(abar_k) * plan + sqrt(1 - abar_k) * eps`.
///
/// Returns the noise so it can serve as the regression target.
pub fn ddpm_forward(
    plan: &ContinuousPlan,
    k: usize,
    sched: &ContinuousSchedule,
    rng: &mut Stream,
) -> Result<(ContinuousPlan, NoiseSample)> {
    check_step(k, sched)?;
    let eps = NoiseSample::draw(plan.horizon(), plan.action_dim(), rng);
    let corrupted = forward_with_noise(plan, k, sched, &eps);
    Ok((corrupted, eps))
}

/// Forward corruption with caller-provided noise (used by tests and
/// replacement-style inpainting).
pub fn forward_with_noise(
    plan: &ContinuousPlan,
    k: usize,
    sched: &ContinuousSchedule,
    eps: &NoiseSample,
) -> ContinuousPlan {
    let signal = sched.alpha_bar[k].sqrt() as f32;
    let noise = (1.0 - sched.alpha_bar[k]).sqrt() as f32;
    ContinuousPlan {
        values: &plan.values * signal + &eps.epsilon * noise,
    }
}

/// Mean squared error over all entries.
pub fn ddpm_loss(eps: &NoiseSample, eps_hat: &NoiseSample) -> Result<f64> {
    if eps.epsilon.dim() != eps_hat.epsilon.dim() {
        return Err(HdpError::ShapeMismatch(format!(
            "noise shapes differ: {:?} vs {:?}",
            eps.epsilon.dim(),
            eps_hat.epsilon.dim()
        )));
    }
    let n = eps.epsilon.len() as f64;
    let sum: f64 = eps
        .epsilon
        .iter()
        .zip(eps_hat.epsilon.iter())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// One reverse step: sample from `N(mu, sigma_k^2 I)` with
/// `mu = (corrupted - xi_k * eps_hat) / sqrt(alpha_k)`.
///
/// At `k = 0` the schedule sets `sigma = 0`, so the output is deterministic.
pub fn ddpm_reverse_step(
    corrupted: &ContinuousPlan,
    k: usize,
    eps_hat: &NoiseSample,
    sched: &ContinuousSchedule,
    rng: &mut Stream,
) -> Result<ContinuousPlan> {
    check_step(k, sched)?;
    if corrupted.values.dim() != eps_hat.epsilon.dim() {
        return Err(HdpError::ShapeMismatch(
            "corrupted plan and predicted noise shapes differ".into(),
        ));
    }
    let xi = sched.xi[k] as f32;
    let inv_sqrt_alpha = (1.0 / sched.alpha[k].sqrt()) as f32;
    let sigma = sched.sigma[k] as f32;
    let mut out = (&corrupted.values - &(&eps_hat.epsilon * xi)) * inv_sqrt_alpha;
    if sigma > 0.0 {
        for v in out.iter_mut() {
            *v += sigma * normal_f32(rng);
        }
    }
    Ok(ContinuousPlan { values: out })
}

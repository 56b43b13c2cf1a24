//! Hybrid diffusion planning over paired continuous and symbolic plans.
//!
//! The crate couples a DDPM process over action trajectories with a masked
//! discrete diffusion process over token plans, denoised by one shared
//! two-headed transformer. It ships the three reference baselines
//! (continuous-only, joint-variable, and two-process diffusion), a planar
//! block-sorting world with a scripted cycle-sort expert, and the
//! train/sample/evaluate harness used by the `hdp` binary.

pub mod autodiff;
pub mod baselines;
pub mod hybrid;
pub mod model;
pub mod dataset;
pub mod ddpm;
pub mod expert;
pub mod denoiser;
pub mod optim;
pub mod sortworld;
pub mod error;
pub mod md4;
pub mod rngcore;
pub mod schedules;

pub use error::{HdpError, Result};

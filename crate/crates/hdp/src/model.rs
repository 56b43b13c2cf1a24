//! Planner engine shared by the hybrid model and the three baselines.
//!
//! One [`PlannerModel`] owns the denoiser, schedules, normalization, and
//! task geometry; the four formulations differ only in how they corrupt
//! training data, assemble losses, and run the reverse process. All of them
//! flow through this module's`train_step`/`plan` entry points, so
//! environment, dataset, optimizer, and evaluation code are shared by
//! construction.

use crate::autodiff::Tape;
use crate::baselines;
use crate::dataset::{Dataset, NormStats};
use crate::ddpm::ContinuousPlan;
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserShape, DiscInput, DiscSpec, KdKind};
use crate::error::{HdpError, Result};
use crate::expert::PAD_ID;
use crate::hybrid;
use crate::md4::{DiscretePlan, MdWeight, Vocabulary};
use crate::optim::{AdamW, Ema, OptimConfig};
use crate::rngcore::{SeedTree, Stream};
use crate::schedules::{
    make_continuous_schedule, ContinuousSchedule, MaskAlphaKind, MaskSchedule, ScheduleKind,
};
use crate::sortworld::WorldConfig;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Which denoising formulation a model instance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hybrid,
    Diffuser,
    Joint,
    Separate,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Hybrid => "hybrid",
            ModelKind::Diffuser => "diffuser",
            ModelKind::Joint => "joint",
            ModelKind::Separate => "separate",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelKind {
    type Err = HdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(ModelKind::Hybrid),
            "diffuser" => Ok(ModelKind::Diffuser),
            "joint" => Ok(ModelKind::Joint),
            "separate" => Ok(ModelKind::Separate),
            other => Err(HdpError::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Discrete-loss weight in the joint objective.
    pub lambda: f64,
    pub batch_size: usize,
    /// Passes over the dataset; steps = round(epochs * episodes / batch).
    pub epochs: f64,
    /// Explicit step count override.
    pub train_steps: Option<u64>,
    /// Continuous diffusion steps K (sampling runs K joint steps).
    pub k_continuous: usize,
    /// Discrete sampling steps N; the joint sampler requires N = K.
    pub n_discrete: usize,
    pub cont_schedule: ScheduleKind,
    pub mask_alpha: MaskAlphaKind,
    pub md4_weight: MdWeight,
    pub optim: OptimConfig,
    pub ema_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 1.0 / 30.0,
            batch_size: 64,
            epochs: 4800.0,
            train_steps: None,
            k_continuous: 100,
            n_discrete: 100,
            cont_schedule: ScheduleKind::SquaredCos,
            mask_alpha: MaskAlphaKind::Linear,
            md4_weight: MdWeight::Elbo,
            optim: OptimConfig::default(),
            ema_decay: 0.999,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(HdpError::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(HdpError::Config("batch size must be at least 1".into()));
        }
        if self.k_continuous == 0 || self.n_discrete == 0 {
            return Err(HdpError::Config("step counts must be at least 1".into()));
        }
        if self.n_discrete != self.k_continuous {
            return Err(HdpError::Config(
                "joint sampling pairs the processes step-for-step; set n_discrete = k_continuous"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn effective_steps(&self, episodes: usize) -> u64 {
        self.train_steps.unwrap_or_else(|| {
            (self.epochs * episodes as f64 / self.batch_size as f64).round() as u64
        })
    }
}

/// Everything needed to rebuild a model without the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub denoiser: DenoiserConfig,
    pub world: WorldConfig,
    pub h_c: usize,
    pub h_d: usize,
    pub act_dim: usize,
    pub obs_dim: usize,
    pub vocab: Vec<String>,
    pub norm: NormStats,
    pub training: TrainingConfig,
}

/// Pre-normalized training tensors.
pub struct TrainData {
    pub cont: Vec<Array2<f32>>,
    pub tokens: Vec<Vec<u16>>,
    pub obs: Vec<Vec<f32>>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        TrainData {
            cont: ds
                .episodes
                .iter()
                .map(|e| ds.norm.normalize_actions(&e.continuous))
                .collect(),
            tokens: ds.episodes.iter().map(|e| e.discrete.clone()).collect(),
            obs: ds
                .episodes
                .iter()
                .map(|e| ds.norm.normalize_obs(&e.observation))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cont.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cont.is_empty()
    }
}

/// Per-step loss report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cont: f64,
    pub l_disc: f64,
    pub l_total: f64,
}

/// A planner: denoiser plus schedules plus task geometry.
pub struct PlannerModel {
    pub kind: ModelKind,
    pub denoiser: Denoiser<f32>,
    pub cont_sched: ContinuousSchedule,
    /// Second DDPM schedule for the lifted token channel (separate baseline).
    pub disc_cont_sched: Option<ContinuousSchedule>,
    /// Masking schedule (hybrid only).
    pub mask_sched: Option<MaskSchedule>,
    pub vocab: Vocabulary,
    pub world: WorldConfig,
    pub h_c: usize,
    pub h_d: usize,
    pub act_dim: usize,
    pub obs_dim: usize,
    pub norm: NormStats,
    pub training: TrainingConfig,
}

/// Mutable training state kept outside the model so evaluation can load
/// weights without it.
pub struct TrainerState {
    pub opt: AdamW,
    pub ema: Ema,
    pub step: u64,
    pub rng: Stream,
}

impl TrainerState {
    pub fn new(model: &PlannerModel, seed: u64) -> Self {
        let rng = SeedTree::new(seed).derive("train", 0).stream();
        TrainerState {
            opt: AdamW::new(model.training.optim, model.denoiser.params()),
            ema: Ema::new(model.training.ema_decay, model.denoiser.params()),
            step: 0,
            rng,
        }
    }
}

/// Output of one sampling call.
#[derive(Debug, Clone)]
pub struct SampledPlan {
    /// Denormalized actions, world units (h_c x act_dim).
    pub continuous: ContinuousPlan,
    /// Token plan; absent for the continuous-only baseline.
    pub discrete: Option<DiscretePlan>,
}

/// Inpainting condition: known token positions and/or known continuous rows
/// (world units).
#[derive(Debug, Clone, Default)]
pub struct PlanCondition {
    pub tokens: Vec<(usize, u16)>,
    pub continuous_rows: Vec<(usize, Vec<f32>)>,
}

impl PlanCondition {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty() && self.continuous_rows.is_empty()
    }
}

impl PlannerModel {
    /// Build a fresh model for a dataset. Parameters are initialized from
    /// the seed's "init" stream.
    pub fn new(
        kind: ModelKind,
        den_cfg: DenoiserConfig,
        training: TrainingConfig,
        ds: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        training.validate()?;
        let m = ds.vocab.m();
        let act_dim = crate::sortworld::ACTION_DIM;
        let obs_dim = ds.world.obs_dim();
        let shape = shape_for(
            kind,
            ds.h_c,
            ds.h_d,
            act_dim,
            obs_dim,
            m,
            training.k_continuous,
        );
        let mut init_rng = SeedTree::new(seed).derive("init", 0).stream();
        let denoiser = Denoiser::new(den_cfg, shape, &mut init_rng)?;
        let cont_sched = make_continuous_schedule(training.k_continuous, training.cont_schedule)?;
        let disc_cont_sched = match kind {
            ModelKind::Separate => Some(make_continuous_schedule(
                training.k_continuous,
                training.cont_schedule,
            )?),
            _ => None,
        };
        let mask_sched = match kind {
            ModelKind::Hybrid => Some(MaskSchedule::new(training.n_discrete, training.mask_alpha)?),
            _ => None,
        };
        Ok(PlannerModel {
            kind,
            denoiser,
            cont_sched,
            disc_cont_sched,
            mask_sched,
            vocab: ds.vocab.clone(),
            world: ds.world.clone(),
            h_c: ds.h_c,
            h_d: ds.h_d,
            act_dim,
            obs_dim,
            norm: ds.norm.clone(),
            training,
        })
    }

    /// Rebuild a model from its serialized spec (checkpoint loading).
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        spec.training.validate()?;
        let m = spec.vocab.len();
        let shape = shape_for(
            spec.kind,
            spec.h_c,
            spec.h_d,
            spec.act_dim,
            spec.obs_dim,
            m,
            spec.training.k_continuous,
        );
        let mut init_rng = SeedTree::new(0).derive("init", 0).stream();
        let denoiser = Denoiser::new(spec.denoiser, shape, &mut init_rng)?;
        let cont_sched =
            make_continuous_schedule(spec.training.k_continuous, spec.training.cont_schedule)?;
        let disc_cont_sched = match spec.kind {
            ModelKind::Separate => Some(make_continuous_schedule(
                spec.training.k_continuous,
                spec.training.cont_schedule,
            )?),
            _ => None,
        };
        let mask_sched = match spec.kind {
            ModelKind::Hybrid => Some(MaskSchedule::new(
                spec.training.n_discrete,
                spec.training.mask_alpha,
            )?),
            _ => None,
        };
        Ok(PlannerModel {
            kind: spec.kind,
            denoiser,
            cont_sched,
            disc_cont_sched,
            mask_sched,
            vocab: Vocabulary::new(spec.vocab.clone())?,
            world: spec.world.clone(),
            h_c: spec.h_c,
            h_d: spec.h_d,
            act_dim: spec.act_dim,
            obs_dim: spec.obs_dim,
            norm: spec.norm.clone(),
            training: spec.training.clone(),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            denoiser: self.denoiser.cfg,
            world: self.world.clone(),
            h_c: self.h_c,
            h_d: self.h_d,
            act_dim: self.act_dim,
            obs_dim: self.obs_dim,
            vocab: self.vocab.symbols().to_vec(),
            norm: self.norm.clone(),
            training: self.training.clone(),
        }
    }

    /// One optimizer step on a uniformly sampled batch.
    pub fn train_step(&mut self, data: &TrainData, state: &mut TrainerState) -> Result<LossReport> {
        if data.is_empty() {
            return Err(HdpError::InvalidArgument("empty dataset".into()));
        }
        let b = self.training.batch_size;
        let idx: Vec<usize> = (0..b)
            .map(|_| crate::rngcore::below(&mut state.rng, data.len()))
            .collect();
        let mut tape = Tape::new();
        let (loss_vars, report) = match self.kind {
            ModelKind::Hybrid => {
                let prepared = hybrid::prepare_batch(self, data, &idx, &mut state.rng)?;
                hybrid::loss_on_tape(self, &mut tape, &prepared, Some(&mut state.rng))?
            }
            ModelKind::Diffuser => {
                let prepared = baselines::prepare_diffuser_batch(self, data, &idx, &mut state.rng)?;
                baselines::diffuser_loss_on_tape(self, &mut tape, &prepared, Some(&mut state.rng))?
            }
            ModelKind::Joint => {
                let prepared = baselines::prepare_joint_batch(self, data, &idx, &mut state.rng)?;
                baselines::joint_loss_on_tape(self, &mut tape, &prepared, Some(&mut state.rng))?
            }
            ModelKind::Separate => {
                let prepared =
                    baselines::prepare_separate_batch(self, data, &idx, &mut state.rng)?;
                baselines::separate_loss_on_tape(self, &mut tape, &prepared, Some(&mut state.rng))?
            }
        };
        if !report.l_total.is_finite() {
            return Err(HdpError::NonFiniteLoss {
                step: state.step,
                detail: format!(
                    "l_cont={}, l_disc={}, batch={idx:?}",
                    report.l_cont, report.l_disc
                ),
            });
        }
        tape.backward(loss_vars.total);
        let mut grads = collect_grads(&mut tape, &loss_vars.param_vars);
        let decay_flags = self.denoiser.decay_flags().to_vec();
        state
            .opt
            .apply(self.denoiser.params_mut(), &mut grads, &decay_flags)?;
        state.ema.update(self.denoiser.params(), state.step);
        state.step += 1;
        Ok(report)
    }

    /// Sample one plan open-loop from a raw observation.
    pub fn plan(&self, obs: &[f64], rng: &mut Stream) -> Result<SampledPlan> {
        let out = self.plan_batch(&[obs.to_vec()], std::slice::from_mut(rng), None)?;
        Ok(out.into_iter().next().unwrap())
    }

    /// Sample one plan under an inpainting condition.
    pub fn conditional_plan(
        &self,
        obs: &[f64],
        condition: &PlanCondition,
        rng: &mut Stream,
    ) -> Result<SampledPlan> {
        let conds = vec![condition.clone()];
        let out = self.plan_batch(&[obs.to_vec()], std::slice::from_mut(rng), Some(&conds))?;
        Ok(out.into_iter().next().unwrap())
    }

    /// Batched sampling: one independent rng per episode; results are
    /// identical to per-episode calls because every forward is row-exact.
    pub fn plan_batch(
        &self,
        obs: &[Vec<f64>],
        rngs: &mut [Stream],
        conditions: Option<&[PlanCondition]>,
    ) -> Result<Vec<SampledPlan>> {
        if obs.is_empty() || obs.len() != rngs.len() {
            return Err(HdpError::InvalidArgument(
                "need one rng per observation".into(),
            ));
        }
        if let Some(c) = conditions {
            if c.len() != obs.len() {
                return Err(HdpError::InvalidArgument(
                    "need one condition per observation".into(),
                ));
            }
            self.validate_conditions(c)?;
        }
        match self.kind {
            ModelKind::Hybrid => hybrid::plan_batch(self, obs, rngs, conditions),
            ModelKind::Diffuser => {
                if conditions.is_some_and(|c| c.iter().any(|x| !x.is_empty())) {
                    return Err(HdpError::InvalidArgument(
                        "the continuous-only baseline does not support symbolic conditioning"
                            .into(),
                    ));
                }
                baselines::diffuser_plan_batch(self, obs, rngs)
            }
            ModelKind::Joint => baselines::joint_plan_batch(self, obs, rngs, conditions),
            ModelKind::Separate => baselines::separate_plan_batch(self, obs, rngs, conditions),
        }
    }

    fn validate_conditions(&self, conds: &[PlanCondition]) -> Result<()> {
        for c in conds {
            for (pos, tok) in &c.tokens {
                if *pos >= self.h_d {
                    return Err(HdpError::InvalidArgument(format!(
                        "condition position {pos} outside horizon {}",
                        self.h_d
                    )));
                }
                if *tok >= self.vocab.mask_id() {
                    return Err(HdpError::InvalidArgument(
                        "mask id supplied as a known token".into(),
                    ));
                }
            }
            for (row, vals) in &c.continuous_rows {
                if *row >= self.h_c || vals.len() != self.act_dim {
                    return Err(HdpError::InvalidArgument(
                        "continuous condition row out of range".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Normalized observation matrix for a batch.
    pub(crate) fn obs_matrix(&self, obs: &[Vec<f64>]) -> Result<Array2<f32>> {
        let b = obs.len();
        let mut m = Array2::zeros((b, self.obs_dim));
        for (i, o) in obs.iter().enumerate() {
            if o.len() != self.obs_dim {
                return Err(HdpError::ShapeMismatch(format!(
                    "observation length {} vs {}",
                    o.len(),
                    self.obs_dim
                )));
            }
            let n = self.norm.normalize_obs(o);
            for (j, v) in n.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        Ok(m)
    }
}

/// Denoiser geometry per formulation.
pub fn shape_for(
    kind: ModelKind,
    h_c: usize,
    h_d: usize,
    act_dim: usize,
    obs_dim: usize,
    m: usize,
    k_steps: usize,
) -> DenoiserShape {
    match kind {
        ModelKind::Hybrid => DenoiserShape {
            cont_len: h_c,
            cont_dim: act_dim,
            disc: Some(DiscSpec {
                len: h_d,
                input: DiscInput::TokenTable { vocab_size: m + 1 },
                head_dim: m + 1,
            }),
            obs_dim,
            kd: Some(KdKind::Continuous {
                scale: k_steps as f64,
            }),
        },
        ModelKind::Diffuser => DenoiserShape {
            cont_len: h_c,
            cont_dim: act_dim,
            disc: None,
            obs_dim,
            kd: None,
        },
        ModelKind::Joint => DenoiserShape {
            cont_len: h_c + h_d,
            cont_dim: act_dim.max(m),
            disc: None,
            obs_dim,
            kd: None,
        },
        ModelKind::Separate => DenoiserShape {
            cont_len: h_c,
            cont_dim: act_dim,
            disc: Some(DiscSpec {
                len: h_d,
                input: DiscInput::Linear { width: m },
                head_dim: m,
            }),
            obs_dim,
            kd: Some(KdKind::StepIndex),
        },
    }
}

/// Loss graph handles produced by the per-kind loss builders.
pub struct LossVars {
    pub total: crate::autodiff::Var,
    pub param_vars: Vec<crate::autodiff::Var>,
}

/// Pull parameter gradients off the tape, canonicalizing negative zeros so
/// degenerate-weight comparisons are bitwise stable.
pub fn collect_grads(tape: &mut Tape<f32>, param_vars: &[crate::autodiff::Var]) -> Vec<Array2<f32>> {
    param_vars
        .iter()
        .map(|v| {
            let mut g = tape
                .take_grad(*v)
                .unwrap_or_else(|| Array2::zeros(tape.value(*v).raw_dim()));
            g.mapv_inplace(|x| x + 0.0);
            g
        })
        .collect()
}

/// Strip the PAD suffix convention: used by loss masking to keep padded
/// positions trainable (PAD is a real symbol the model must emit).
pub fn pad_id() -> u16 {
    PAD_ID
}

//! The three comparison planners sharing the denoiser substrate.
//!
//! * Diffuser: continuous trajectory only, one DDPM process.
//! * Joint Diffuser: tokens lifted to scaled one-hot rows and concatenated
//!   with the motion plan into a single DDPM variable with one step input.
//! * Separate Diffuser: lifted tokens as a second DDPM process with its own
//!   independently sampled step; two noise heads.
//!
//! Environment, dataset, normalization, optimizer, and evaluation paths are
//! identical to the hybrid model; only the denoising formulation differs.

use crate::autodiff::Tape;
use crate::ddpm::{ddpm_reverse_step, ContinuousPlan, NoiseSample};
use crate::denoiser::DenoiserInputs;
use crate::error::{HdpError, Result};
use crate::hybrid::PreparedBatch;
use crate::md4::DiscretePlan;
use crate::model::{LossReport, LossVars, PlanCondition, PlannerModel, SampledPlan, TrainData};
use crate::rngcore::{below, normal_f32, Stream};
use ndarray::{s, Array2};

/// Lift token ids to scaled one-hot rows: +1 on the token's column, -1
/// elsewhere, matching the normalized action range.
pub fn lift_tokens(tokens: &[u16], m: usize) -> Array2<f32> {
    let mut out = Array2::from_elem((tokens.len(), m), -1.0f32);
    for (r, &t) in tokens.iter().enumerate() {
        out[[r, t as usize]] = 1.0;
    }
    out
}

/// Decode lifted rows by nearest one-hot (argmax); ties break to the
/// lowest id, so decoding is total.
pub fn decode_lifted(rows: &Array2<f32>) -> Vec<u16> {
    rows.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Diffuser: continuous-only DDPM.
// ---------------------------------------------------------------------------

pub fn prepare_diffuser_batch(
    model: &PlannerModel,
    data: &TrainData,
    idx: &[usize],
    rng: &mut Stream,
) -> Result<PreparedBatch> {
    let b = idx.len();
    let (h_c, d_a) = (model.h_c, model.act_dim);
    let k_c: Vec<usize> = (0..b)
        .map(|_| below(rng, model.training.k_continuous))
        .collect();
    let sched = &model.cont_sched;
    let mut cont = Array2::zeros((b * h_c, d_a));
    let mut eps_target = Array2::zeros((b * h_c, d_a));
    let mut obs = Array2::zeros((b, model.obs_dim));
    for (i, &e) in idx.iter().enumerate() {
        let clean = &data.cont[e];
        let signal = sched.alpha_bar[k_c[i]].sqrt() as f32;
        let spread = (1.0 - sched.alpha_bar[k_c[i]]).sqrt() as f32;
        for r in 0..h_c {
            for c in 0..d_a {
                let eps = normal_f32(rng);
                eps_target[[i * h_c + r, c]] = eps;
                cont[[i * h_c + r, c]] = signal * clean[[r, c]] + spread * eps;
            }
        }
        for (j, v) in data.obs[e].iter().enumerate() {
            obs[[i, j]] = *v;
        }
    }
    Ok(PreparedBatch {
        inputs: DenoiserInputs {
            batch: b,
            cont,
            disc_tokens: None,
            disc_lifted: None,
            obs,
            k_c,
            k_d: None,
        },
        eps_target,
        disc_eps_target: None,
        ce_targets: None,
        ce_weights: None,
    })
}

/// Pure DDPM objective: noise MSE on the continuous head and nothing else.
///
/// This is the Diffuser training loss; it also runs on hybrid-prepared
/// inputs, which is how the degenerate-weight equivalence (`lambda = 0`)
/// is checked against the hybrid loss path.
pub fn diffuser_loss_on_tape(
    model: &PlannerModel,
    tape: &mut Tape<f32>,
    prepared: &PreparedBatch,
    dropout_rng: Option<&mut Stream>,
) -> Result<(LossVars, LossReport)> {
    let fwd = model.denoiser.forward(tape, &prepared.inputs, dropout_rng)?;
    let l_cont = tape.mse_loss(fwd.eps_hat, prepared.eps_target.clone());
    let report = LossReport {
        l_cont: tape.scalar_value(l_cont) as f64,
        l_disc: 0.0,
        l_total: tape.scalar_value(l_cont) as f64,
    };
    Ok((
        LossVars {
            total: l_cont,
            param_vars: fwd.param_vars,
        },
        report,
    ))
}

pub fn diffuser_plan_batch(
    model: &PlannerModel,
    obs: &[Vec<f64>],
    rngs: &mut [Stream],
) -> Result<Vec<SampledPlan>> {
    let b = obs.len();
    let (h_c, d_a) = (model.h_c, model.act_dim);
    let k_steps = model.training.k_continuous;
    let obs_m = model.obs_matrix(obs)?;
    let mut x: Vec<Array2<f32>> = rngs
        .iter_mut()
        .map(|rng| Array2::from_shape_fn((h_c, d_a), |_| normal_f32(rng)))
        .collect();
    for i in 0..k_steps {
        let k = k_steps - 1 - i;
        let mut cont = Array2::zeros((b * h_c, d_a));
        for e in 0..b {
            cont.slice_mut(s![e * h_c..(e + 1) * h_c, ..]).assign(&x[e]);
        }
        let inputs = DenoiserInputs {
            batch: b,
            cont,
            disc_tokens: None,
            disc_lifted: None,
            obs: obs_m.clone(),
            k_c: vec![k; b],
            k_d: None,
        };
        let mut tape = Tape::new();
        let fwd = model.denoiser.forward(&mut tape, &inputs, None)?;
        let eps_all = tape.value(fwd.eps_hat);
        for e in 0..b {
            let eps_hat = NoiseSample {
                epsilon: eps_all.slice(s![e * h_c..(e + 1) * h_c, ..]).to_owned(),
            };
            let cur = ContinuousPlan {
                values: x[e].clone(),
            };
            x[e] = ddpm_reverse_step(&cur, k, &eps_hat, &model.cont_sched, &mut rngs[e])?.values;
        }
    }
    Ok(x.into_iter()
        .map(|xe| SampledPlan {
            continuous: ContinuousPlan {
                values: model.norm.denormalize_actions(&xe),
            },
            discrete: None,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Joint Diffuser: one DDPM variable over the concatenated sequence.
// ---------------------------------------------------------------------------

/// Width of the joined feature axis.
pub fn joint_width(model: &PlannerModel) -> usize {
    model.act_dim.max(model.vocab.m())
}

/// Assemble the joined clean matrix for one episode: action rows (features
/// padded with zeros) followed by lifted token rows.
pub fn joint_clean_matrix(model: &PlannerModel, cont: &Array2<f32>, tokens: &[u16]) -> Array2<f32> {
    let w = joint_width(model);
    let (h_c, h_d) = (model.h_c, model.h_d);
    let mut out = Array2::zeros((h_c + h_d, w));
    for r in 0..h_c {
        for c in 0..model.act_dim {
            out[[r, c]] = cont[[r, c]];
        }
    }
    let lifted = lift_tokens(tokens, model.vocab.m());
    for r in 0..h_d {
        for c in 0..model.vocab.m() {
            out[[h_c + r, c]] = lifted[[r, c]];
        }
    }
    out
}

pub fn prepare_joint_batch(
    model: &PlannerModel,
    data: &TrainData,
    idx: &[usize],
    rng: &mut Stream,
) -> Result<PreparedBatch> {
    let b = idx.len();
    let w = joint_width(model);
    let rows = model.h_c + model.h_d;
    let k_c: Vec<usize> = (0..b)
        .map(|_| below(rng, model.training.k_continuous))
        .collect();
    let sched = &model.cont_sched;
    let mut cont = Array2::zeros((b * rows, w));
    let mut eps_target = Array2::zeros((b * rows, w));
    let mut obs = Array2::zeros((b, model.obs_dim));
    for (i, &e) in idx.iter().enumerate() {
        let clean = joint_clean_matrix(model, &data.cont[e], &data.tokens[e]);
        let signal = sched.alpha_bar[k_c[i]].sqrt() as f32;
        let spread = (1.0 - sched.alpha_bar[k_c[i]]).sqrt() as f32;
        for r in 0..rows {
            for c in 0..w {
                let eps = normal_f32(rng);
                eps_target[[i * rows + r, c]] = eps;
                cont[[i * rows + r, c]] = signal * clean[[r, c]] + spread * eps;
            }
        }
        for (j, v) in data.obs[e].iter().enumerate() {
            obs[[i, j]] = *v;
        }
    }
    Ok(PreparedBatch {
        inputs: DenoiserInputs {
            batch: b,
            cont,
            disc_tokens: None,
            disc_lifted: None,
            obs,
            k_c,
            k_d: None,
        },
        eps_target,
        disc_eps_target: None,
        ce_targets: None,
        ce_weights: None,
    })
}

/// Joint training is the pure DDPM objective over the joined variable.
pub fn joint_loss_on_tape(
    model: &PlannerModel,
    tape: &mut Tape<f32>,
    prepared: &PreparedBatch,
    dropout_rng: Option<&mut Stream>,
) -> Result<(LossVars, LossReport)> {
    diffuser_loss_on_tape(model, tape, prepared, dropout_rng)
}

pub fn joint_plan_batch(
    model: &PlannerModel,
    obs: &[Vec<f64>],
    rngs: &mut [Stream],
    conditions: Option<&[PlanCondition]>,
) -> Result<Vec<SampledPlan>> {
    let b = obs.len();
    let w = joint_width(model);
    let rows = model.h_c + model.h_d;
    let k_steps = model.training.k_continuous;
    let obs_m = model.obs_matrix(obs)?;
    let mut x: Vec<Array2<f32>> = rngs
        .iter_mut()
        .map(|rng| Array2::from_shape_fn((rows, w), |_| normal_f32(rng)))
        .collect();
    // Known token rows clamp to their clean lifted values at every step.
    let clamped: Vec<Vec<(usize, Array2<f32>)>> = match conditions {
        Some(conds) => conds
            .iter()
            .map(|c| {
                c.tokens
                    .iter()
                    .map(|(pos, tok)| {
                        let lifted = lift_tokens(&[*tok], model.vocab.m());
                        (model.h_c + pos, lifted)
                    })
                    .collect()
            })
            .collect(),
        None => vec![Vec::new(); b],
    };
    let apply_clamp = |x: &mut Array2<f32>, rows: &[(usize, Array2<f32>)]| {
        for (r, lifted) in rows {
            for c in 0..w {
                x[[*r, c]] = if c < lifted.ncols() { lifted[[0, c]] } else { 0.0 };
            }
        }
    };
    for i in 0..k_steps {
        let k = k_steps - 1 - i;
        let mut cont = Array2::zeros((b * rows, w));
        for e in 0..b {
            apply_clamp(&mut x[e], &clamped[e]);
            cont.slice_mut(s![e * rows..(e + 1) * rows, ..]).assign(&x[e]);
        }
        let inputs = DenoiserInputs {
            batch: b,
            cont,
            disc_tokens: None,
            disc_lifted: None,
            obs: obs_m.clone(),
            k_c: vec![k; b],
            k_d: None,
        };
        let mut tape = Tape::new();
        let fwd = model.denoiser.forward(&mut tape, &inputs, None)?;
        let eps_all = tape.value(fwd.eps_hat);
        for e in 0..b {
            let eps_hat = NoiseSample {
                epsilon: eps_all.slice(s![e * rows..(e + 1) * rows, ..]).to_owned(),
            };
            let cur = ContinuousPlan {
                values: x[e].clone(),
            };
            x[e] = ddpm_reverse_step(&cur, k, &eps_hat, &model.cont_sched, &mut rngs[e])?.values;
        }
    }
    let mut out = Vec::with_capacity(b);
    for e in 0..b {
        apply_clamp(&mut x[e], &clamped[e]);
        let cont = x[e].slice(s![0..model.h_c, 0..model.act_dim]).to_owned();
        let tokens = decode_lifted(&x[e].slice(s![model.h_c.., 0..model.vocab.m()]).to_owned());
        out.push(SampledPlan {
            continuous: ContinuousPlan {
                values: model.norm.denormalize_actions(&cont),
            },
            discrete: Some(DiscretePlan { tokens }),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Separate Diffuser: two DDPM processes with independent steps.
// ---------------------------------------------------------------------------

pub fn prepare_separate_batch(
    model: &PlannerModel,
    data: &TrainData,
    idx: &[usize],
    rng: &mut Stream,
) -> Result<PreparedBatch> {
    let b = idx.len();
    let (h_c, h_d, d_a) = (model.h_c, model.h_d, model.act_dim);
    let m = model.vocab.m();
    let k_steps = model.training.k_continuous;
    // Independent draws per process, per sample.
    let k_c: Vec<usize> = (0..b).map(|_| below(rng, k_steps)).collect();
    let k_d: Vec<usize> = (0..b).map(|_| below(rng, k_steps)).collect();
    let sched_c = &model.cont_sched;
    let sched_d = model
        .disc_cont_sched
        .as_ref()
        .ok_or_else(|| HdpError::Config("separate model lacks its token schedule".into()))?;
    let mut cont = Array2::zeros((b * h_c, d_a));
    let mut eps_target = Array2::zeros((b * h_c, d_a));
    let mut lifted = Array2::zeros((b * h_d, m));
    let mut disc_eps_target = Array2::zeros((b * h_d, m));
    let mut obs = Array2::zeros((b, model.obs_dim));
    for (i, &e) in idx.iter().enumerate() {
        let clean = &data.cont[e];
        let signal = sched_c.alpha_bar[k_c[i]].sqrt() as f32;
        let spread = (1.0 - sched_c.alpha_bar[k_c[i]]).sqrt() as f32;
        for r in 0..h_c {
            for c in 0..d_a {
                let eps = normal_f32(rng);
                eps_target[[i * h_c + r, c]] = eps;
                cont[[i * h_c + r, c]] = signal * clean[[r, c]] + spread * eps;
            }
        }
        let clean_lift = lift_tokens(&data.tokens[e], m);
        let signal_d = sched_d.alpha_bar[k_d[i]].sqrt() as f32;
        let spread_d = (1.0 - sched_d.alpha_bar[k_d[i]]).sqrt() as f32;
        for r in 0..h_d {
            for c in 0..m {
                let eps = normal_f32(rng);
                disc_eps_target[[i * h_d + r, c]] = eps;
                lifted[[i * h_d + r, c]] = signal_d * clean_lift[[r, c]] + spread_d * eps;
            }
        }
        for (j, v) in data.obs[e].iter().enumerate() {
            obs[[i, j]] = *v;
        }
    }
    Ok(PreparedBatch {
        inputs: DenoiserInputs {
            batch: b,
            cont,
            disc_tokens: None,
            disc_lifted: Some(lifted),
            obs,
            k_c,
            k_d: Some(k_d.iter().map(|k| *k as f64).collect()),
        },
        eps_target,
        disc_eps_target: Some(disc_eps_target),
        ce_targets: None,
        ce_weights: None,
    })
}

/// Two noise-prediction losses, one per modality.
pub fn separate_loss_on_tape(
    model: &PlannerModel,
    tape: &mut Tape<f32>,
    prepared: &PreparedBatch,
    dropout_rng: Option<&mut Stream>,
) -> Result<(LossVars, LossReport)> {
    let fwd = model.denoiser.forward(tape, &prepared.inputs, dropout_rng)?;
    let l_cont = tape.mse_loss(fwd.eps_hat, prepared.eps_target.clone());
    let disc_out = fwd
        .disc_out
        .ok_or_else(|| HdpError::Config("separate denoiser lacks the lifted head".into()))?;
    let l_disc = tape.mse_loss(disc_out, prepared.disc_eps_target.clone().unwrap());
    let total = tape.add_scaled(l_cont, l_disc, 1.0);
    let report = LossReport {
        l_cont: tape.scalar_value(l_cont) as f64,
        l_disc: tape.scalar_value(l_disc) as f64,
        l_total: tape.scalar_value(total) as f64,
    };
    Ok((
        LossVars {
            total,
            param_vars: fwd.param_vars,
        },
        report,
    ))
}

pub fn separate_plan_batch(
    model: &PlannerModel,
    obs: &[Vec<f64>],
    rngs: &mut [Stream],
    conditions: Option<&[PlanCondition]>,
) -> Result<Vec<SampledPlan>> {
    let b = obs.len();
    let (h_c, h_d, d_a) = (model.h_c, model.h_d, model.act_dim);
    let m = model.vocab.m();
    let k_steps = model.training.k_continuous;
    let sched_d = model
        .disc_cont_sched
        .as_ref()
        .ok_or_else(|| HdpError::Config("separate model lacks its token schedule".into()))?;
    let obs_m = model.obs_matrix(obs)?;
    let mut xc: Vec<Array2<f32>> = rngs
        .iter_mut()
        .map(|rng| Array2::from_shape_fn((h_c, d_a), |_| normal_f32(rng)))
        .collect();
    let mut xd: Vec<Array2<f32>> = rngs
        .iter_mut()
        .map(|rng| Array2::from_shape_fn((h_d, m), |_| normal_f32(rng)))
        .collect();
    let clamped: Vec<Vec<(usize, Array2<f32>)>> = match conditions {
        Some(conds) => conds
            .iter()
            .map(|c| {
                c.tokens
                    .iter()
                    .map(|(pos, tok)| (*pos, lift_tokens(&[*tok], m)))
                    .collect()
            })
            .collect(),
        None => vec![Vec::new(); b],
    };
    let apply_clamp = |x: &mut Array2<f32>, rows: &[(usize, Array2<f32>)]| {
        for (r, lifted) in rows {
            for c in 0..m {
                x[[*r, c]] = lifted[[0, c]];
            }
        }
    };
    for i in 0..k_steps {
        let k = k_steps - 1 - i;
        let mut cont = Array2::zeros((b * h_c, d_a));
        let mut lifted = Array2::zeros((b * h_d, m));
        for e in 0..b {
            apply_clamp(&mut xd[e], &clamped[e]);
            cont.slice_mut(s![e * h_c..(e + 1) * h_c, ..]).assign(&xc[e]);
            lifted
                .slice_mut(s![e * h_d..(e + 1) * h_d, ..])
                .assign(&xd[e]);
        }
        let inputs = DenoiserInputs {
            batch: b,
            cont,
            disc_tokens: None,
            disc_lifted: Some(lifted),
            obs: obs_m.clone(),
            k_c: vec![k; b],
            k_d: Some(vec![k as f64; b]),
        };
        let mut tape = Tape::new();
        let fwd = model.denoiser.forward(&mut tape, &inputs, None)?;
        let eps_c = tape.value(fwd.eps_hat);
        let eps_d = tape.value(fwd.disc_out.unwrap());
        for e in 0..b {
            let eps_hat = NoiseSample {
                epsilon: eps_c.slice(s![e * h_c..(e + 1) * h_c, ..]).to_owned(),
            };
            let cur = ContinuousPlan {
                values: xc[e].clone(),
            };
            xc[e] = ddpm_reverse_step(&cur, k, &eps_hat, &model.cont_sched, &mut rngs[e])?.values;
            let eps_hat_d = NoiseSample {
                epsilon: eps_d.slice(s![e * h_d..(e + 1) * h_d, ..]).to_owned(),
            };
            let cur_d = ContinuousPlan {
                values: xd[e].clone(),
            };
            xd[e] = ddpm_reverse_step(&cur_d, k, &eps_hat_d, sched_d, &mut rngs[e])?.values;
        }
    }
    let mut out = Vec::with_capacity(b);
    for e in 0..b {
        apply_clamp(&mut xd[e], &clamped[e]);
        let tokens = decode_lifted(&xd[e]);
        out.push(SampledPlan {
            continuous: ContinuousPlan {
                values: model.norm.denormalize_actions(&xc[e]),
            },
            discrete: Some(DiscretePlan { tokens }),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::denoiser::DenoiserConfig;
    use crate::model::{ModelKind, TrainerState, TrainingConfig};
    use crate::rngcore::SeedTree;
    use crate::sortworld::WorldConfig;

    fn tiny(kind: ModelKind) -> (PlannerModel, crate::dataset::Dataset) {
        let cfg = WorldConfig::for_blocks(2).unwrap();
        let ds = generate_dataset(&cfg, 10, 5).unwrap();
        let den = DenoiserConfig {
            layers: 1,
            heads: 2,
            emb_dim: 32,
            attn_dropout: 0.0,
            causal: false,
        };
        let train = TrainingConfig {
            k_continuous: 6,
            n_discrete: 6,
            batch_size: 3,
            ..Default::default()
        };
        let model = PlannerModel::new(kind, den, train, &ds, 1).unwrap();
        (model, ds)
    }

    #[test]
    fn lift_and_decode_round_trip() {
        let tokens = vec![0u16, 3, 7, 2];
        let lifted = lift_tokens(&tokens, 8);
        assert_eq!(decode_lifted(&lifted), tokens);
        for r in 0..4 {
            let s: f32 = lifted.row(r).sum();
            assert_eq!(s, 2.0 - 8.0); // one +1, seven -1
        }
    }

    #[test]
    fn decode_ties_break_to_lowest_id() {
        let rows = Array2::zeros((2, 4));
        assert_eq!(decode_lifted(&rows), vec![0, 0]);
    }

    #[test]
    fn diffuser_emits_continuous_only() {
        let (model, _) = tiny(ModelKind::Diffuser);
        let obs = vec![0.0f64; model.obs_dim];
        let mut rng = SeedTree::new(2).derive("p", 0).stream();
        let plan = model.plan(&obs, &mut rng).unwrap();
        assert!(plan.discrete.is_none());
        assert_eq!(plan.continuous.values.dim(), (model.h_c, model.act_dim));
    }

    #[test]
    fn diffuser_rejects_symbolic_conditioning() {
        let (model, _) = tiny(ModelKind::Diffuser);
        let obs = vec![0.0f64; model.obs_dim];
        let mut rng = SeedTree::new(2).stream();
        let cond = PlanCondition {
            tokens: vec![(0, 1)],
            continuous_rows: vec![],
        };
        assert!(model.conditional_plan(&obs, &cond, &mut rng).is_err());
    }

    #[test]
    fn joint_rejects_distinct_steps() {
        let (model, _) = tiny(ModelKind::Joint);
        // Supplying k_d to a single-step model is a config error.
        let inputs = DenoiserInputs::<f32> {
            batch: 1,
            cont: Array2::zeros(((model.h_c + model.h_d), joint_width(&model))),
            disc_tokens: None,
            disc_lifted: None,
            obs: Array2::zeros((1, model.obs_dim)),
            k_c: vec![0],
            k_d: Some(vec![0.5]),
        };
        let mut tape = Tape::new();
        assert!(model.denoiser.forward(&mut tape, &inputs, None).is_err());
    }

    #[test]
    fn joint_plan_decodes_every_position() {
        let (model, _) = tiny(ModelKind::Joint);
        let obs = vec![0.0f64; model.obs_dim];
        let mut rng = SeedTree::new(3).derive("p", 0).stream();
        let plan = model.plan(&obs, &mut rng).unwrap();
        let toks = plan.discrete.unwrap().tokens;
        assert_eq!(toks.len(), model.h_d);
        assert!(toks.iter().all(|&t| (t as usize) < model.vocab.m()));
    }

    #[test]
    fn joint_conditioning_clamps_rows() {
        let (model, _) = tiny(ModelKind::Joint);
        let obs = vec![0.0f64; model.obs_dim];
        let cond = PlanCondition {
            tokens: vec![(2, 4), (7, 1)],
            continuous_rows: vec![],
        };
        let mut rng = SeedTree::new(4).derive("p", 0).stream();
        let plan = model.conditional_plan(&obs, &cond, &mut rng).unwrap();
        let toks = plan.discrete.unwrap().tokens;
        assert_eq!(toks[2], 4);
        assert_eq!(toks[7], 1);
    }

    #[test]
    fn separate_draws_independent_levels() {
        let (model, ds) = tiny(ModelKind::Separate);
        let data = TrainData::from_dataset(&ds);
        let mut rng = SeedTree::new(5).derive("t", 0).stream();
        let mut pairs = Vec::new();
        for _ in 0..800 {
            let prepared = prepare_separate_batch(&model, &data, &[0, 1, 2], &mut rng).unwrap();
            let kd = prepared.inputs.k_d.unwrap();
            for i in 0..3 {
                pairs.push((prepared.inputs.k_c[i] as f64, kd[i]));
            }
        }
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (a, b) in &pairs {
            cov += (a - mx) * (b - my);
            vx += (a - mx).powi(2);
            vy += (b - my).powi(2);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn separate_plan_decodes_and_clamps() {
        let (model, _) = tiny(ModelKind::Separate);
        let obs = vec![0.0f64; model.obs_dim];
        let cond = PlanCondition {
            tokens: vec![(0, 2)],
            continuous_rows: vec![],
        };
        let mut rng = SeedTree::new(6).derive("p", 0).stream();
        let plan = model.conditional_plan(&obs, &cond, &mut rng).unwrap();
        let toks = plan.discrete.unwrap().tokens;
        assert_eq!(toks[0], 2);
        assert!(toks.iter().all(|&t| (t as usize) < model.vocab.m()));
    }

    #[test]
    fn all_baselines_take_training_steps() {
        for kind in [ModelKind::Diffuser, ModelKind::Joint, ModelKind::Separate] {
            let (mut model, ds) = tiny(kind);
            let data = TrainData::from_dataset(&ds);
            let mut state = TrainerState::new(&model, 9);
            let r1 = model.train_step(&data, &mut state).unwrap();
            let r2 = model.train_step(&data, &mut state).unwrap();
            assert!(r1.l_total.is_finite() && r2.l_total.is_finite(), "{kind}");
        }
    }
}

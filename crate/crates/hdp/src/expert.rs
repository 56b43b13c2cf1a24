//! Scripted cycle-sort demonstrator.
//!
//! Produces exactly corresponding symbolic and continuous plans: the
//! symbolic plan follows permutation cycles through the auxiliary slot with
//! minimal moves, and the continuous plan realizes each op as a fixed-length
//! primitive (approach, approach, approach, grip toggle). Cycle processing
//! order and the starting block within each cycle are randomized per
//! episode, so demonstrations are multimodal while every one of them solves
//! the task.

use crate::error::{HdpError, Result};
use crate::md4::{DiscretePlan, Vocabulary};
use crate::rngcore::{below, Stream};
use crate::sortworld::{observe, reset, step, Action, WorldConfig, WorldState};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// High-level primitive: pick a block up from a slot or place it into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpAction {
    PickUp,
    Place,
}

/// One symbolic op; `slot` may address the auxiliary slot (id = n_blocks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicOp {
    pub action: OpAction,
    pub block: usize,
    pub slot: usize,
}

/// Vocabulary layout: PAD, PickUp, Place, blocks A.., slots 1..n, SlotAux.
pub fn task_vocabulary(n_blocks: usize) -> Result<Vocabulary> {
    if !(2..=4).contains(&n_blocks) {
        return Err(HdpError::Config(format!(
            "supported block counts are 2..4, got {n_blocks}"
        )));
    }
    let mut symbols = vec!["PAD".to_string(), "PickUp".to_string(), "Place".to_string()];
    for i in 0..n_blocks {
        symbols.push(format!("Block{}", (b'A' + i as u8) as char));
    }
    for i in 0..n_blocks {
        symbols.push(format!("Slot{}", i + 1));
    }
    symbols.push("SlotAux".to_string());
    Vocabulary::new(symbols)
}

pub const PAD_ID: u16 = 0;
pub const PICKUP_ID: u16 = 1;
pub const PLACE_ID: u16 = 2;

pub fn block_token(block: usize) -> u16 {
    3 + block as u16
}

pub fn slot_token(n_blocks: usize, slot: usize) -> u16 {
    // The auxiliary slot (id = n_blocks) is the last slot symbol.
    3 + n_blocks as u16 + slot as u16
}

/// Decompose a block -> slot bijection into its nontrivial cycles.
fn cycles(permutation: &[usize]) -> Vec<Vec<usize>> {
    let n = permutation.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] || permutation[start] == start {
            seen[start] = true;
            continue;
        }
        let mut cycle = Vec::new();
        let mut b = start;
        while !seen[b] {
            seen[b] = true;
            cycle.push(b);
            b = permutation[b];
        }
        out.push(cycle);
    }
    out
}

/// Minimal op count for a permutation: each cycle of length L costs L + 1
/// moves (two ops per move).
pub fn op_count(permutation: &[usize]) -> usize {
    cycles(permutation).iter().map(|c| 2 * (c.len() + 1)).sum()
}

/// Cycle-sort plan with a randomized cycle order and per-cycle start block.
pub fn cycle_sort_plan(permutation: &[usize], rng: &mut Stream) -> Result<Vec<SymbolicOp>> {
    let mut cyc = cycles(permutation);
    // Uniform order over cycles.
    for i in (1..cyc.len()).rev() {
        cyc.swap(i, below(rng, i + 1));
    }
    let starts: Vec<usize> = cyc.iter().map(|c| below(rng, c.len())).collect();
    cycle_sort_plan_ordered(permutation, &cyc, &starts)
}

/// Deterministic core: resolve each cycle starting from `cycle[starts[i]]`.
pub fn cycle_sort_plan_ordered(
    permutation: &[usize],
    cycle_order: &[Vec<usize>],
    starts: &[usize],
) -> Result<Vec<SymbolicOp>> {
    let n = permutation.len();
    let mut check = vec![false; n];
    for &s in permutation {
        if s >= n || check[s] {
            return Err(HdpError::InvalidArgument(
                "permutation must be a bijection".into(),
            ));
        }
        check[s] = true;
    }
    let aux = n;
    let mut ops = Vec::new();
    for (cycle, &start_idx) in cycle_order.iter().zip(starts) {
        let s = cycle[start_idx];
        // Buffer the start block, rotate the cycle, then empty the buffer.
        ops.push(SymbolicOp {
            action: OpAction::PickUp,
            block: s,
            slot: permutation[s],
        });
        ops.push(SymbolicOp {
            action: OpAction::Place,
            block: s,
            slot: aux,
        });
        let mut slot_to_fill = permutation[s];
        loop {
            let mover = slot_to_fill;
            if mover == s {
                break;
            }
            ops.push(SymbolicOp {
                action: OpAction::PickUp,
                block: mover,
                slot: permutation[mover],
            });
            ops.push(SymbolicOp {
                action: OpAction::Place,
                block: mover,
                slot: mover,
            });
            slot_to_fill = permutation[mover];
        }
        ops.push(SymbolicOp {
            action: OpAction::PickUp,
            block: s,
            slot: aux,
        });
        ops.push(SymbolicOp {
            action: OpAction::Place,
            block: s,
            slot: s,
        });
    }
    Ok(ops)
}

/// Apply ops to the symbolic slot assignment; errors on infeasible ops.
pub fn simulate_symbolic(permutation: &[usize], ops: &[SymbolicOp]) -> Result<Vec<usize>> {
    let n = permutation.len();
    let aux = n;
    // position[b] = slot of block b (aux allowed); usize::MAX = held.
    let mut position: Vec<usize> = permutation.to_vec();
    let mut held: Option<usize> = None;
    for op in ops {
        match op.action {
            OpAction::PickUp => {
                if held.is_some() {
                    return Err(HdpError::Validation("pick while holding".into()));
                }
                if position[op.block] != op.slot {
                    return Err(HdpError::Validation(format!(
                        "block {} not at slot {}",
                        op.block, op.slot
                    )));
                }
                position[op.block] = usize::MAX;
                held = Some(op.block);
            }
            OpAction::Place => {
                if held != Some(op.block) {
                    return Err(HdpError::Validation("place of a block not held".into()));
                }
                if op.slot != aux && position.iter().any(|&p| p == op.slot) {
                    return Err(HdpError::Validation(format!("slot {} occupied", op.slot)));
                }
                position[op.block] = op.slot;
                held = None;
            }
        }
    }
    if held.is_some() {
        return Err(HdpError::Validation("plan ends while holding".into()));
    }
    Ok(position)
}

/// Worst-case horizons over all permutations for this world:
/// `(h_c, h_d) = (steps_per_primitive * max_ops, 3 * max_ops)`.
pub fn horizons(cfg: &WorldConfig) -> (usize, usize) {
    let max_ops = all_permutations(cfg.n_blocks)
        .iter()
        .map(|p| op_count(p))
        .max()
        .unwrap_or(0);
    (cfg.steps_per_primitive * max_ops, 3 * max_ops)
}

/// Enumerate all permutations of 0..n (n is at most 4 here).
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        let n = used.len();
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Uniform draw over all n! permutations (Fisher-Yates).
pub fn sample_permutation(n: usize, rng: &mut Stream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, below(rng, i + 1));
    }
    p
}

/// Serialize ops as (action, block, slot) token triples, right-padded with
/// PAD to `h_d`.
pub fn tokens_for_ops(ops: &[SymbolicOp], n_blocks: usize, h_d: usize) -> Result<DiscretePlan> {
    if 3 * ops.len() > h_d {
        return Err(HdpError::InvalidArgument(format!(
            "{} ops exceed symbolic horizon {h_d}",
            ops.len()
        )));
    }
    let mut tokens = Vec::with_capacity(h_d);
    for op in ops {
        tokens.push(match op.action {
            OpAction::PickUp => PICKUP_ID,
            OpAction::Place => PLACE_ID,
        });
        tokens.push(block_token(op.block));
        tokens.push(slot_token(n_blocks, op.slot));
    }
    tokens.resize(h_d, PAD_ID);
    Ok(DiscretePlan { tokens })
}

/// Realize ops as a continuous action sequence of
/// `steps_per_primitive` waypoints per op (approach the tracked block or
/// slot center, then toggle the grip), padded with hold-at-home actions.
///
/// Returns the action matrix in world units plus per-op step segments.
pub fn realize_continuous(
    ops: &[SymbolicOp],
    start: &WorldState,
    cfg: &WorldConfig,
    h_c: usize,
) -> Result<(Array2<f32>, Vec<(u32, u32)>)> {
    let sp = cfg.steps_per_primitive;
    if ops.len() * sp > h_c {
        return Err(HdpError::InvalidArgument(format!(
            "{} ops exceed continuous horizon {h_c}",
            ops.len()
        )));
    }
    let mut actions: Vec<Action> = Vec::with_capacity(h_c);
    let mut segments = Vec::with_capacity(ops.len());
    let mut state = start.clone();
    for op in ops {
        let seg_start = actions.len() as u32;
        let (target, carry_grip, final_grip) = match op.action {
            // Pick at the block's actual (jittered or tracked) position.
            OpAction::PickUp => (state.block_xy[op.block], -1.0, 1.0),
            OpAction::Place => (cfg.slot_center(op.slot), 1.0, -1.0),
        };
        for phase in 0..sp {
            let grip = if phase + 1 == sp { final_grip } else { carry_grip };
            let a = Action {
                x: target[0],
                y: target[1],
                grip,
            };
            state = step(cfg, &state, a);
            actions.push(a);
        }
        // The primitive must actually complete: after a pick the block is
        // held; after a place the gripper is empty.
        match op.action {
            OpAction::PickUp => {
                if state.held != Some(op.block) {
                    return Err(HdpError::Validation(format!(
                        "pick of block {} failed to attach",
                        op.block
                    )));
                }
            }
            OpAction::Place => {
                if state.held.is_some() {
                    return Err(HdpError::Validation("place failed to release".into()));
                }
            }
        }
        segments.push((seg_start, actions.len() as u32));
    }
    while actions.len() < h_c {
        let a = Action {
            x: cfg.home[0],
            y: cfg.home[1],
            grip: -1.0,
        };
        state = step(cfg, &state, a);
        actions.push(a);
    }
    let mut m = Array2::zeros((h_c, crate::sortworld::ACTION_DIM));
    for (i, a) in actions.iter().enumerate() {
        m[[i, 0]] = a.x as f32;
        m[[i, 1]] = a.y as f32;
        m[[i, 2]] = a.grip as f32;
    }
    Ok((m, segments))
}

/// One validated demonstration episode.
#[derive(Debug, Clone)]
pub struct Demonstration {
    /// Initial observation, world units.
    pub observation: Vec<f64>,
    /// Action sequence (h_c x 3), world units.
    pub continuous: Array2<f32>,
    /// Token plan, length h_d, PAD-suffixed.
    pub discrete: Vec<u16>,
    pub permutation: Vec<usize>,
    pub episode_index: u64,
    /// Per-op (start, end) step ranges into the continuous plan.
    pub segments: Vec<(u32, u32)>,
}

/// Generate one validated demonstration from its episode stream.
pub fn generate_demonstration(
    cfg: &WorldConfig,
    h_c: usize,
    h_d: usize,
    episode_index: u64,
    rng: &mut Stream,
) -> Result<Demonstration> {
    let permutation = sample_permutation(cfg.n_blocks, rng);
    let (state, observation) = reset(cfg, &permutation, rng)?;
    let ops = cycle_sort_plan(&permutation, rng)?;
    let (continuous, segments) = realize_continuous(&ops, &state, cfg, h_c)?;
    let discrete = tokens_for_ops(&ops, cfg.n_blocks, h_d)?.tokens;

    // Generation-time validation: symbolic effect sorts, rollout scores 1.
    let end = simulate_symbolic(&permutation, &ops)?;
    if end.iter().enumerate().any(|(b, &s)| s != b) {
        return Err(HdpError::Validation("symbolic plan does not sort".into()));
    }
    let actions = (0..h_c).map(|i| Action {
        x: continuous[[i, 0]] as f64,
        y: continuous[[i, 1]] as f64,
        grip: continuous[[i, 2]] as f64,
    });
    let (terminal, _) = crate::sortworld::rollout(cfg, &state, actions);
    let r = crate::sortworld::reward(cfg, &terminal);
    if r < 1.0 {
        return Err(HdpError::Validation(format!(
            "demonstration rollout reward {r} < 1.0 (episode {episode_index})"
        )));
    }
    debug_assert_eq!(observation, observe(&state));
    Ok(Demonstration {
        observation,
        continuous,
        discrete,
        permutation,
        episode_index,
        segments,
    })
}

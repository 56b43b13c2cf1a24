//! Forward masking, weighted cross-entropy loss, and reverse unmasking for
//! the symbolic plan.
//!
//! Tokens live in `{0..m}` where ids `0..m-1` are real symbols and id `m` is
//! the absorbing mask state. The forward process masks each token
//! independently with probability `1 - alpha(t)`; the reverse process reveals
//! masked positions by drawing from the predicted categorical and never
//! re-masks.

use crate::error::{HdpError, Result};
use crate::rngcore::{uniform_f64, Stream};
use crate::schedules::{unmask_fraction, MaskSchedule};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Ordered symbol table. `m` real symbols with ids `0..m-1`; id `m` is the
/// reserved mask state and never appears in a clean plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(HdpError::InvalidArgument("empty vocabulary".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.clone()) {
                return Err(HdpError::InvalidArgument(format!(
                    "duplicate symbol '{s}' in vocabulary"
                )));
            }
        }
        Ok(Vocabulary { symbols })
    }

    /// Count of real symbols.
    pub fn m(&self) -> usize {
        self.symbols.len()
    }

    /// Id of the absorbing mask state.
    pub fn mask_id(&self) -> u16 {
        self.symbols.len() as u16
    }

    pub fn id(&self, name: &str) -> Option<u16> {
        self.symbols.iter().position(|s| s == name).map(|i| i as u16)
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// One symbol name per line, line number = id.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        Vocabulary::new(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(|l| l.to_string())
                .collect(),
        )
    }
}

/// Length `T_d` sequence of token ids in `{0..m}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscretePlan {
    pub tokens: Vec<u16>,
}

impl DiscretePlan {
    pub fn new(tokens: Vec<u16>, vocab: &Vocabulary) -> Result<Self> {
        let mask = vocab.mask_id();
        if let Some(t) = tokens.iter().find(|t| **t > mask) {
            return Err(HdpError::InvalidArgument(format!(
                "token id {t} exceeds mask id {mask}"
            )));
        }
        Ok(DiscretePlan { tokens })
    }

    pub fn all_masked(len: usize, vocab: &Vocabulary) -> Self {
        DiscretePlan {
            tokens: vec![vocab.mask_id(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_count(&self, vocab: &Vocabulary) -> usize {
        let m = vocab.mask_id();
        self.tokens.iter().filter(|t| **t == m).count()
    }
}

/// Per-position unmasking scores, `T_d x (m + 1)`.
///
/// The mask column is forced to negative infinity so that after softmax the
/// mask-state probability is exactly zero.
#[derive(Debug, Clone)]
pub struct UnmaskLogits {
    logits: Array2<f32>,
}

impl UnmaskLogits {
    /// Wrap raw head output, pinning the mask column to -inf.
    pub fn from_raw(mut logits: Array2<f32>) -> Result<Self> {
        if logits.ncols() < 2 {
            return Err(HdpError::ShapeMismatch(
                "unmask logits need at least one real column plus the mask column".into(),
            ));
        }
        let mask_col = logits.ncols() - 1;
        for row in 0..logits.nrows() {
            logits[[row, mask_col]] = f32::NEG_INFINITY;
        }
        Ok(UnmaskLogits { logits })
    }

    pub fn rows(&self) -> usize {
        self.logits.nrows()
    }

    /// Real-symbol count covered by these logits.
    pub fn m(&self) -> usize {
        self.logits.ncols() - 1
    }

    pub fn raw(&self) -> &Array2<f32> {
        &self.logits
    }

    /// Softmax over the real symbols of one row; the mask state has
    /// probability zero by construction.
    pub fn probabilities(&self, row: usize) -> Vec<f64> {
        let m = self.m();
        let mut best = f64::NEG_INFINITY;
        for j in 0..m {
            best = best.max(self.logits[[row, j]] as f64);
        }
        let mut exps: Vec<f64> = (0..m)
            .map(|j| ((self.logits[[row, j]] as f64) - best).exp())
            .collect();
        let z: f64 = exps.iter().sum();
        for e in exps.iter_mut() {
            *e /= z;
        }
        exps
    }
}

/// Loss weighting for the masked cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MdWeight {
    /// ELBO-exact weight -alpha'(t) / (1 - alpha(t)).
    #[default]
    Elbo,
    /// Constant weight 1.
    Unit,
}

impl MdWeight {
    pub fn weight(&self, sched: &MaskSchedule, t: f64) -> f64 {
        match self {
            MdWeight::Elbo => sched.elbo_weight(t),
            MdWeight::Unit => 1.0,
        }
    }
}

/// Mask each token independently with probability `1 - alpha(t)`.
pub fn md4_forward(
    plan: &DiscretePlan,
    t: f64,
    sched: &MaskSchedule,
    vocab: &Vocabulary,
    rng: &mut Stream,
) -> Result<DiscretePlan> {
    if !(0.0..=1.0).contains(&t) {
        return Err(HdpError::InvalidArgument(format!(
            "diffusion time {t} outside [0, 1]"
        )));
    }
    let mask = vocab.mask_id();
    if plan.tokens.iter().any(|tok| *tok == mask) {
        return Err(HdpError::InvalidArgument(
            "clean plan already contains mask ids".into(),
        ));
    }
    let keep = sched.alpha(t);
    let tokens = plan
        .tokens
        .iter()
        .map(|tok| if uniform_f64(rng) < keep { *tok } else { mask })
        .collect();
    Ok(DiscretePlan { tokens })
}

/// Weighted cross-entropy over the masked positions:
/// `sum_{i: corrupted_i = mask} w(t) * CE(softmax(logits_i), clean_i)`.
pub fn md4_loss(
    clean: &DiscretePlan,
    corrupted: &DiscretePlan,
    logits: &UnmaskLogits,
    t: f64,
    sched: &MaskSchedule,
    weight: MdWeight,
) -> Result<f64> {
    if clean.len() != corrupted.len() || logits.rows() != clean.len() {
        return Err(HdpError::ShapeMismatch(format!(
            "md4_loss shapes disagree: clean {}, corrupted {}, logits {}",
            clean.len(),
            corrupted.len(),
            logits.rows()
        )));
    }
    let mask = logits.m() as u16;
    let any_masked = corrupted.tokens.iter().any(|tok| *tok == mask);
    if t <= 0.0 && any_masked {
        return Err(HdpError::InvalidArgument(
            "masked positions at t = 0 are inconsistent inputs".into(),
        ));
    }
    if !any_masked {
        return Ok(0.0);
    }
    let w = weight.weight(sched, t);
    let mut total = 0.0f64;
    for i in 0..clean.len() {
        if corrupted.tokens[i] != mask {
            continue;
        }
        let target = clean.tokens[i] as usize;
        if target >= logits.m() {
            return Err(HdpError::InvalidArgument(format!(
                "clean token {target} is not a real symbol"
            )));
        }
        let p = logits.probabilities(i);
        total += w * -(p[target].max(1e-300)).ln();
    }
    Ok(total)
}

/// One reverse step from time `t` down to `s`: each masked position is
/// revealed with probability `unmask_fraction(t, s)` by a draw from the
/// predicted categorical; revealed positions never change again.
pub fn md4_reverse_step(
    corrupted: &DiscretePlan,
    logits: &UnmaskLogits,
    t: f64,
    s: f64,
    sched: &MaskSchedule,
    rng: &mut Stream,
) -> Result<DiscretePlan> {
    let gamma = unmask_fraction(sched, t, s)?;
    md4_reverse_step_with_gamma(corrupted, logits, gamma, rng)
}

/// Reverse step with an explicit revealing probability.
pub fn md4_reverse_step_with_gamma(
    corrupted: &DiscretePlan,
    logits: &UnmaskLogits,
    gamma: f64,
    rng: &mut Stream,
) -> Result<DiscretePlan> {
    if logits.rows() != corrupted.len() {
        return Err(HdpError::ShapeMismatch(format!(
            "logits rows {} vs plan length {}",
            logits.rows(),
            corrupted.len()
        )));
    }
    let mask = logits.m() as u16;
    let mut tokens = corrupted.tokens.clone();
    for (i, tok) in tokens.iter_mut().enumerate() {
        if *tok != mask {
            continue;
        }
        if uniform_f64(rng) < gamma {
            *tok = sample_categorical(&logits.probabilities(i), rng);
        }
    }
    Ok(DiscretePlan { tokens })
}

fn sample_categorical(probs: &[f64], rng: &mut Stream) -> u16 {
    let u = uniform_f64(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u16;
        }
    }
    (probs.len() - 1) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngcore::SeedTree;
    use crate::schedules::MaskAlphaKind;

    fn vocab_m(m: usize) -> Vocabulary {
        Vocabulary::new((0..m).map(|i| format!("tok{i}")).collect()).unwrap()
    }

    fn uniform_logits(rows: usize, m: usize) -> UnmaskLogits {
        UnmaskLogits::from_raw(Array2::zeros((rows, m + 1))).unwrap()
    }

    fn one_hot_logits(rows: usize, m: usize, on: usize) -> UnmaskLogits {
        let mut raw = Array2::from_elem((rows, m + 1), -1e9f32);
        for r in 0..rows {
            raw[[r, on]] = 0.0;
        }
        UnmaskLogits::from_raw(raw).unwrap()
    }

    #[test]
    fn vocabulary_sidecar_round_trip() {
        let v = vocab_m(5);
        let v2 = Vocabulary::from_sidecar(&v.to_sidecar()).unwrap();
        assert_eq!(v, v2);
        assert_eq!(v.mask_id(), 5);
        assert_eq!(v.id("tok3"), Some(3));
        assert_eq!(v.name(4), Some("tok4"));
    }

    #[test]
    fn forward_identity_and_absorbing_extremes() {
        let vocab = vocab_m(4);
        let sched = MaskSchedule::new(8, MaskAlphaKind::Linear).unwrap();
        let plan = DiscretePlan::new(vec![0, 1, 2, 3, 1], &vocab).unwrap();
        let mut rng = SeedTree::new(0).stream();
        // alpha(0) = 1: identity.
        let out = md4_forward(&plan, 0.0, &sched, &vocab, &mut rng).unwrap();
        assert_eq!(out, plan);
        // alpha(1) = 0: fully absorbed.
        let out = md4_forward(&plan, 1.0, &sched, &vocab, &mut rng).unwrap();
        assert!(out.tokens.iter().all(|t| *t == vocab.mask_id()));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let vocab = vocab_m(4);
        let sched = MaskSchedule::new(8, MaskAlphaKind::Linear).unwrap();
        let plan = DiscretePlan::new(vec![0, 1], &vocab).unwrap();
        let mut rng = SeedTree::new(0).stream();
        assert!(md4_forward(&plan, 1.5, &sched, &vocab, &mut rng).is_err());
        let masked = DiscretePlan {
            tokens: vec![0, vocab.mask_id()],
        };
        assert!(md4_forward(&masked, 0.5, &sched, &vocab, &mut rng).is_err());
    }

    /// Statistical check against the binomial law implied by the absorbing
    /// transition matrix.
    #[test]
    fn forward_mask_count_is_binomial() {
        let vocab = vocab_m(3);
        let sched = MaskSchedule::new(8, MaskAlphaKind::Linear).unwrap();
        let len = 10_000usize;
        let plan = DiscretePlan::new(vec![1; len], &vocab).unwrap();
        let mut rng = SeedTree::new(99).derive("binomial", 0).stream();
        // alpha(0.5) = 0.5 for the linear schedule.
        let out = md4_forward(&plan, 0.5, &sched, &vocab, &mut rng).unwrap();
        let masked = out.mask_count(&vocab) as f64;
        let mean = len as f64 * 0.5;
        let sd = (len as f64 * 0.25).sqrt();
        assert!(
            (masked - mean).abs() < 3.0 * sd,
            "mask count {masked} not within 3 sigma of {mean}"
        );
    }

    #[test]
    fn loss_examples() {
        let vocab = vocab_m(4);
        let sched = MaskSchedule::new(8, MaskAlphaKind::Linear).unwrap();
        let clean = DiscretePlan::new(vec![2, 1, 3], &vocab).unwrap();
        // Nothing masked: zero loss.
        let loss = md4_loss(
            &clean,
            &clean,
            &uniform_logits(3, 4),
            0.5,
            &sched,
            MdWeight::Elbo,
        )
        .unwrap();
        assert_eq!(loss, 0.0);

        // One masked position with logits concentrated on the true token.
        let mut corrupted = clean.clone();
        corrupted.tokens[1] = vocab.mask_id();
        let loss = md4_loss(
            &clean,
            &corrupted,
            &one_hot_logits(3, 4, 1),
            0.5,
            &sched,
            MdWeight::Unit,
        )
        .unwrap();
        assert!(loss < 1e-6, "near-zero loss, got {loss}");

        // Uniform logits over m=4 with w = 2 (linear alpha at t = 0.5).
        let loss = md4_loss(
            &clean,
            &corrupted,
            &uniform_logits(3, 4),
            0.5,
            &sched,
            MdWeight::Elbo,
        )
        .unwrap();
        let expected = 2.0 * 4.0f64.ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");

        // t = 0 with masked positions is inconsistent.
        assert!(md4_loss(
            &clean,
            &corrupted,
            &uniform_logits(3, 4),
            0.0,
            &sched,
            MdWeight::Elbo
        )
        .is_err());
    }

    #[test]
    fn reverse_step_extremes() {
        let sched = MaskSchedule::new(8, MaskAlphaKind::Linear).unwrap();
        let mut rng = SeedTree::new(5).stream();
        let plan = DiscretePlan {
            tokens: vec![4, 0, 4],
        };
        // gamma = 0: no transition.
        let out =
            md4_reverse_step_with_gamma(&plan, &one_hot_logits(3, 4, 3), 0.0, &mut rng).unwrap();
        assert_eq!(out.tokens, plan.tokens);
        // gamma = 1 with one-hot logits: all masked positions become token 3.
        let out =
            md4_reverse_step(&plan, &one_hot_logits(3, 4, 3), 1.0, 0.0, &sched, &mut rng).unwrap();
        assert_eq!(out.tokens, vec![3, 0, 3]);
        // s >= t rejected.
        assert!(
            md4_reverse_step(&plan, &one_hot_logits(3, 4, 3), 0.5, 0.5, &sched, &mut rng).is_err()
        );
    }

    #[test]
    fn reverse_never_touches_real_tokens() {
        let vocab = vocab_m(2);
        let sched = MaskSchedule::new(16, MaskAlphaKind::Linear).unwrap();
        let mut rng = SeedTree::new(6).stream();
        let mut plan = DiscretePlan {
            tokens: vec![1, vocab.mask_id(), 0, vocab.mask_id()],
        };
        for (t, s) in sched.time_pairs() {
            let next =
                md4_reverse_step(&plan, &uniform_logits(4, 2), t, s, &sched, &mut rng).unwrap();
            // Never-remask: revealed positions stay fixed.
            for i in 0..4 {
                if plan.tokens[i] != vocab.mask_id() {
                    assert_eq!(next.tokens[i], plan.tokens[i]);
                }
            }
            plan = next;
        }
        // Full-grid completion: alpha(0) = 1 forces the last step to reveal.
        assert_eq!(plan.mask_count(&vocab), 0);
    }

    /// Frequencies of (still masked / token 0 / token 1) for a single
    /// masked position with gamma = 0.5 and uniform logits, against the
    /// exact law of the revealing transition.
    #[test]
    fn reverse_step_transition_frequencies() {
        let sched = MaskSchedule::new(4, MaskAlphaKind::Linear).unwrap();
        // Pick (t, s) with gamma = 0.5: alpha linear, t = 0.8, s = 0.4.
        let (t, s) = (0.8, 0.4);
        let mut rng = SeedTree::new(17).derive("freq", 0).stream();
        let trials = 10_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let plan = DiscretePlan { tokens: vec![2] };
            let out =
                md4_reverse_step(&plan, &uniform_logits(1, 2), t, s, &sched, &mut rng).unwrap();
            match out.tokens[0] {
                2 => counts[0] += 1,
                0 => counts[1] += 1,
                1 => counts[2] += 1,
                other => panic!("unexpected token {other}"),
            }
        }
        let expected = [0.5, 0.25, 0.25];
        for (i, e) in expected.iter().enumerate() {
            let freq = counts[i] as f64 / trials as f64;
            let sd = (e * (1.0 - e) / trials as f64).sqrt();
            assert!(
                (freq - e).abs() < 3.0 * sd,
                "outcome {i}: {freq} vs {e} (3sd = {})",
                3.0 * sd
            );
        }
    }

    /// Exact-posterior oracle: enumerate the full step-outcome tree of the
    /// sampler on a tiny instance and compare to empirical frequencies.
    #[test]
    fn sampler_matches_enumerated_posterior() {
        let vocab = vocab_m(2);
        let n_steps = 3usize;
        let sched = MaskSchedule::new(n_steps, MaskAlphaKind::Linear).unwrap();
        let t_d = 2usize;
        // Fixed, position-dependent logits table.
        let mut raw = Array2::zeros((t_d, 3));
        raw[[0, 0]] = 1.2f32;
        raw[[0, 1]] = -0.3;
        raw[[1, 0]] = -0.5;
        raw[[1, 1]] = 0.9;
        let logits = UnmaskLogits::from_raw(raw).unwrap();

        // Brute-force enumeration over all per-step outcomes. Positions are
        // independent, so enumerate one position at a time.
        let pairs = sched.time_pairs();
        let mut analytic = vec![vec![0.0f64; 2]; t_d];
        for (i, probs_row) in analytic.iter_mut().enumerate() {
            let probs = logits.probabilities(i);
            // Probability the position unmasks at step j (and not before).
            let mut still_masked = 1.0f64;
            for &(t, s) in &pairs {
                let gamma = unmask_fraction(&sched, t, s).unwrap();
                let reveal_now = still_masked * gamma;
                probs_row[0] += reveal_now * probs[0];
                probs_row[1] += reveal_now * probs[1];
                still_masked *= 1.0 - gamma;
            }
            assert!(still_masked < 1e-12, "grid must fully unmask");
        }

        // Joint distribution over final sequences = product over positions.
        let mut joint = [[0.0f64; 2]; 2];
        for (a, row) in joint.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = analytic[0][a] * analytic[1][b];
            }
        }

        let runs = 100_000usize;
        let mut rng = SeedTree::new(23).derive("posterior", 0).stream();
        let mut counts = [[0usize; 2]; 2];
        for _ in 0..runs {
            let mut plan = DiscretePlan::all_masked(t_d, &vocab);
            for &(t, s) in &pairs {
                plan = md4_reverse_step(&plan, &logits, t, s, &sched, &mut rng).unwrap();
            }
            counts[plan.tokens[0] as usize][plan.tokens[1] as usize] += 1;
        }
        let mut tv = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                let freq = counts[a][b] as f64 / runs as f64;
                tv += (freq - joint[a][b]).abs();
            }
        }
        tv *= 0.5;
        assert!(tv <= 0.02, "total variation {tv} exceeds 0.02");
    }
}

//! The shared two-headed denoiser.
//!
//! A non-causal transformer decoder consumes the embedded continuous plan
//! concatenated with the embedded discrete plan, cross-attends to a short
//! conditioning sequence (diffusion step embeddings plus the encoded
//! observation), and emits predicted noise for the continuous rows and
//! unmasking logits for the discrete rows. The same trunk serves all four
//! planner formulations; shape variants differ only in the input/output
//! adapters configured through [`DenoiserShape`].

use crate::autodiff::{Scalar, Tape, Var};
use crate::ddpm::NoiseSample;
use crate::error::{HdpError, Result};
use crate::md4::UnmaskLogits;
use crate::rngcore::{uniform_f64, Stream};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub emb_dim: usize,
    pub attn_dropout: f32,
    /// Must stay disabled; the planner attends bidirectionally.
    #[serde(default)]
    pub causal: bool,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.causal {
            return Err(HdpError::Config(
                "causal attention must be disabled".into(),
            ));
        }
        if self.emb_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(HdpError::Config("degenerate denoiser config".into()));
        }
        if self.emb_dim % self.heads != 0 {
            return Err(HdpError::Config(format!(
                "emb_dim {} not divisible by heads {}",
                self.emb_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(HdpError::Config(format!(
                "attention dropout {} outside [0, 1)",
                self.attn_dropout
            )));
        }
        Ok(())
    }
}

/// How the discrete stream enters the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscInput {
    /// Token ids looked up in a learned table of `vocab_size` rows
    /// (the mask state embeds like any other symbol).
    TokenTable { vocab_size: usize },
    /// Continuous-valued rows of `width` features through a linear layer.
    Linear { width: usize },
}

/// Discrete stream geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub len: usize,
    pub input: DiscInput,
    /// Output width of the discrete head (m + 1 logits, or m noise dims).
    pub head_dim: usize,
}

/// How the second corruption level enters the conditioning sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KdKind {
    /// Continuous time in [0, 1], scaled by `scale` before the sinusoidal
    /// embedding.
    Continuous { scale: f64 },
    /// Integer step index used directly.
    StepIndex,
}

/// Input/output geometry of one denoiser instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub cont_len: usize,
    pub cont_dim: usize,
    pub disc: Option<DiscSpec>,
    pub obs_dim: usize,
    pub kd: Option<KdKind>,
}

impl DenoiserShape {
    pub fn seq_len(&self) -> usize {
        self.cont_len + self.disc.map_or(0, |d| d.len)
    }

    pub fn cond_len(&self) -> usize {
        2 + usize::from(self.kd.is_some())
    }
}

/// Both heads of one denoiser call for a single sample.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub epsilon_hat: NoiseSample,
    pub logits: Option<UnmaskLogits>,
}

/// Batched inputs in sample-major layout.
#[derive(Debug, Clone)]
pub struct DenoiserInputs<F: Scalar> {
    pub batch: usize,
    /// (batch * cont_len, cont_dim)
    pub cont: Array2<F>,
    /// Token ids, length batch * disc_len.
    pub disc_tokens: Option<Vec<u16>>,
    /// Continuous-valued discrete rows, (batch * disc_len, width).
    pub disc_lifted: Option<Array2<F>>,
    /// (batch, obs_dim)
    pub obs: Array2<F>,
    /// Continuous-process step per sample.
    pub k_c: Vec<usize>,
    /// Second corruption level per sample (time in [0,1] or step index).
    pub k_d: Option<Vec<f64>>,
}

/// Result of one batched forward pass on a tape.
pub struct ForwardVars {
    pub eps_hat: Var,
    pub disc_out: Option<Var>,
    pub param_vars: Vec<Var>,
}

struct LayerIdx {
    ln1: (usize, usize),
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2: (usize, usize),
    cq_w: usize,
    cq_b: usize,
    ck_w: usize,
    ck_b: usize,
    cv_w: usize,
    cv_b: usize,
    co_w: usize,
    co_b: usize,
    ln3: (usize, usize),
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

struct ParamIdx {
    cont_in_w: usize,
    cont_in_b: usize,
    disc_table: Option<usize>,
    disc_in: Option<(usize, usize)>,
    pos_seq: usize,
    pos_cond: usize,
    kc_mlp: (usize, usize, usize, usize),
    kd_mlp: Option<(usize, usize, usize, usize)>,
    obs_w: usize,
    obs_b: usize,
    cond_enc: (usize, usize, usize, usize),
    layers: Vec<LayerIdx>,
    ln_f: (usize, usize),
    head_c_w: usize,
    head_c_b: usize,
    head_d: Option<(usize, usize)>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One denoiser instance: parameters plus the fixed wiring.
pub struct Denoiser<F: Scalar> {
    pub cfg: DenoiserConfig,
    pub shape: DenoiserShape,
    names: Vec<String>,
    values: Vec<Array2<F>>,
    decay: Vec<bool>,
    idx: ParamIdx,
}

struct ParamBuilder<F: Scalar> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    decay: Vec<bool>,
}

impl<F: Scalar> ParamBuilder<F> {
    fn add(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        init: Init,
        decay: bool,
        rng: &mut Stream,
    ) -> usize {
        let value = match init {
            Init::Normal => Array2::from_shape_fn((rows, cols), |_| {
                F::from_f64(crate::rngcore::normal_f64(rng) * 0.02)
            }),
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::from_elem((rows, cols), F::one()),
        };
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        self.values.len() - 1
    }

    fn linear(
        &mut self,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut Stream,
    ) -> (usize, usize) {
        let w = self.add(format!("{name}.w"), din, dout, Init::Normal, true, rng);
        let b = self.add(format!("{name}.b"), 1, dout, Init::Zeros, false, rng);
        (w, b)
    }

    fn layer_norm(&mut self, name: &str, dim: usize, rng: &mut Stream) -> (usize, usize) {
        let g = self.add(format!("{name}.g"), 1, dim, Init::Ones, false, rng);
        let b = self.add(format!("{name}.b"), 1, dim, Init::Zeros, false, rng);
        (g, b)
    }
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(cfg: DenoiserConfig, shape: DenoiserShape, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        if shape.cont_len == 0 || shape.cont_dim == 0 || shape.obs_dim == 0 {
            return Err(HdpError::Config("degenerate denoiser shape".into()));
        }
        let e = cfg.emb_dim;
        let hidden = 4 * e;
        let mut b = ParamBuilder {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
        };
        let (cont_in_w, cont_in_b) = b.linear("cont_in", shape.cont_dim, e, rng);
        let mut disc_table = None;
        let mut disc_in = None;
        if let Some(d) = shape.disc {
            match d.input {
                DiscInput::TokenTable { vocab_size } => {
                    disc_table = Some(b.add(
                        "disc_emb.table".into(),
                        vocab_size,
                        e,
                        Init::Normal,
                        false,
                        rng,
                    ));
                }
                DiscInput::Linear { width } => {
                    disc_in = Some(b.linear("disc_in", width, e, rng));
                }
            }
        }
        let pos_seq = b.add("pos.seq".into(), shape.seq_len(), e, Init::Normal, false, rng);
        let pos_cond = b.add(
            "pos.cond".into(),
            shape.cond_len(),
            e,
            Init::Normal,
            false,
            rng,
        );
        let kc1 = b.linear("kc_mlp.fc1", e, hidden, rng);
        let kc2 = b.linear("kc_mlp.fc2", hidden, e, rng);
        let kc_mlp = (kc1.0, kc1.1, kc2.0, kc2.1);
        let kd_mlp = if shape.kd.is_some() {
            let kd1 = b.linear("kd_mlp.fc1", e, hidden, rng);
            let kd2 = b.linear("kd_mlp.fc2", hidden, e, rng);
            Some((kd1.0, kd1.1, kd2.0, kd2.1))
        } else {
            None
        };
        let (obs_w, obs_b) = b.linear("obs_in", shape.obs_dim, e, rng);
        let ce1 = b.linear("cond_enc.fc1", e, hidden, rng);
        let ce2 = b.linear("cond_enc.fc2", hidden, e, rng);
        let cond_enc = (ce1.0, ce1.1, ce2.0, ce2.1);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("l{i}");
            let ln1 = b.layer_norm(&format!("{p}.ln1"), e, rng);
            let (wq, bq) = b.linear(&format!("{p}.attn.q"), e, e, rng);
            let (wk, bk) = b.linear(&format!("{p}.attn.k"), e, e, rng);
            let (wv, bv) = b.linear(&format!("{p}.attn.v"), e, e, rng);
            let (wo, bo) = b.linear(&format!("{p}.attn.o"), e, e, rng);
            let ln2 = b.layer_norm(&format!("{p}.ln2"), e, rng);
            let (cq_w, cq_b) = b.linear(&format!("{p}.cross.q"), e, e, rng);
            let (ck_w, ck_b) = b.linear(&format!("{p}.cross.k"), e, e, rng);
            let (cv_w, cv_b) = b.linear(&format!("{p}.cross.v"), e, e, rng);
            let (co_w, co_b) = b.linear(&format!("{p}.cross.o"), e, e, rng);
            let ln3 = b.layer_norm(&format!("{p}.ln3"), e, rng);
            let (mlp_w1, mlp_b1) = b.linear(&format!("{p}.mlp.fc1"), e, hidden, rng);
            let (mlp_w2, mlp_b2) = b.linear(&format!("{p}.mlp.fc2"), hidden, e, rng);
            layers.push(LayerIdx {
                ln1,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2,
                cq_w,
                cq_b,
                ck_w,
                ck_b,
                cv_w,
                cv_b,
                co_w,
                co_b,
                ln3,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let ln_f = b.layer_norm("ln_f", e, rng);
        let (head_c_w, head_c_b) = b.linear("head_c", e, shape.cont_dim, rng);
        let head_d = shape
            .disc
            .map(|d| b.linear("head_d", e, d.head_dim, rng));
        let idx = ParamIdx {
            cont_in_w,
            cont_in_b,
            disc_table,
            disc_in,
            pos_seq,
            pos_cond,
            kc_mlp,
            kd_mlp,
            obs_w,
            obs_b,
            cond_enc,
            layers,
            ln_f,
            head_c_w,
            head_c_b,
            head_d,
        };
        Ok(Denoiser {
            cfg,
            shape,
            names: b.names,
            values: b.values,
            decay: b.decay,
            idx,
        })
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn params(&self) -> &[Array2<F>] {
        &self.values
    }

    pub fn params_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.values
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn decay_flags(&self) -> &[bool] {
        &self.decay
    }

    pub fn set_params(&mut self, values: Vec<Array2<F>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(HdpError::ShapeMismatch(format!(
                "parameter count {} vs {}",
                values.len(),
                self.values.len()
            )));
        }
        for (slot, v) in self.values.iter_mut().zip(values) {
            if slot.dim() != v.dim() {
                return Err(HdpError::ShapeMismatch(
                    "parameter tensor shape mismatch".into(),
                ));
            }
            *slot = v;
        }
        Ok(())
    }

    fn validate_inputs(&self, inputs: &DenoiserInputs<F>) -> Result<()> {
        let b = inputs.batch;
        if b == 0 {
            return Err(HdpError::InvalidArgument("empty batch".into()));
        }
        if inputs.cont.dim() != (b * self.shape.cont_len, self.shape.cont_dim) {
            return Err(HdpError::ShapeMismatch(format!(
                "continuous input {:?}, expected {:?}",
                inputs.cont.dim(),
                (b * self.shape.cont_len, self.shape.cont_dim)
            )));
        }
        if inputs.obs.dim() != (b, self.shape.obs_dim) {
            return Err(HdpError::ShapeMismatch(format!(
                "observation {:?}, expected {:?}",
                inputs.obs.dim(),
                (b, self.shape.obs_dim)
            )));
        }
        if inputs.k_c.len() != b {
            return Err(HdpError::ShapeMismatch("k_c length".into()));
        }
        match (self.shape.kd, &inputs.k_d) {
            (Some(_), Some(kd)) if kd.len() == b => {}
            (None, None) => {}
            (Some(_), _) => {
                return Err(HdpError::InvalidArgument(
                    "model expects a k_d level per sample".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(HdpError::InvalidArgument(
                    "model accepts only a single diffusion step".into(),
                ))
            }
        }
        if let Some(kd) = &inputs.k_d {
            if let Some(KdKind::Continuous { .. }) = self.shape.kd {
                if kd.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(HdpError::InvalidArgument(
                        "k_d time outside [0, 1]".into(),
                    ));
                }
            }
        }
        match self.shape.disc.map(|d| d.input) {
            Some(DiscInput::TokenTable { vocab_size }) => {
                let toks = inputs.disc_tokens.as_ref().ok_or_else(|| {
                    HdpError::InvalidArgument("model expects discrete tokens".into())
                })?;
                let len = self.shape.disc.unwrap().len;
                if toks.len() != b * len {
                    return Err(HdpError::ShapeMismatch("token stream length".into()));
                }
                if toks.iter().any(|t| (*t as usize) >= vocab_size) {
                    return Err(HdpError::InvalidArgument(
                        "token id outside vocabulary".into(),
                    ));
                }
            }
            Some(DiscInput::Linear { width }) => {
                let lifted = inputs.disc_lifted.as_ref().ok_or_else(|| {
                    HdpError::InvalidArgument("model expects lifted discrete rows".into())
                })?;
                let len = self.shape.disc.unwrap().len;
                if lifted.dim() != (b * len, width) {
                    return Err(HdpError::ShapeMismatch("lifted stream shape".into()));
                }
            }
            None => {
                if inputs.disc_tokens.is_some() || inputs.disc_lifted.is_some() {
                    return Err(HdpError::InvalidArgument(
                        "model has no discrete stream".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn mlp2(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        p: (usize, usize, usize, usize),
        vars: &[Var],
        gelu: bool,
    ) -> Var {
        let h = tape.matmul(x, vars[p.0]);
        let h = tape.add_bias_row(h, vars[p.1]);
        let h = if gelu { tape.gelu(h) } else { tape.mish(h) };
        let h = tape.matmul(h, vars[p.2]);
        tape.add_bias_row(h, vars[p.3])
    }

    fn linear_at(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        w: usize,
        b: usize,
        vars: &[Var],
    ) -> Var {
        let h = tape.matmul(x, vars[w]);
        tape.add_bias_row(h, vars[b])
    }

    fn drop_masks(
        &self,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        rng: &mut Stream,
    ) -> Option<Vec<Array2<F>>> {
        let p = self.cfg.attn_dropout as f64;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 - p;
        let scale = F::from_f64(1.0 / keep);
        Some(
            (0..batch * self.cfg.heads)
                .map(|_| {
                    Array2::from_shape_fn((q_len, kv_len), |_| {
                        if uniform_f64(rng) < keep {
                            scale
                        } else {
                            F::zero()
                        }
                    })
                })
                .collect(),
        )
    }

    /// Embed the conditioning inputs into the cross-attention token
    /// sequence: `[emb(k_c), emb(k_d)?, emb(obs)]` plus positions, passed
    /// through the conditioning encoder MLP.
    pub fn embed_conditioning(
        &self,
        tape: &mut Tape<F>,
        inputs: &DenoiserInputs<F>,
        vars: &[Var],
    ) -> Var {
        let b = inputs.batch;
        let e = self.cfg.emb_dim;
        let kc_sin: Array2<F> = Array2::from_shape_fn((b, e), |(r, c)| {
            F::from_f64(sinusoidal_component(inputs.k_c[r] as f64, c, e))
        });
        let kc_in = tape.leaf(kc_sin);
        let kc_emb = self.mlp2(tape, kc_in, self.idx.kc_mlp, vars, false);
        let obs_in = tape.leaf(inputs.obs.clone());
        let obs_emb = self.linear_at(tape, obs_in, self.idx.obs_w, self.idx.obs_b, vars);
        let cond = match (self.shape.kd, &inputs.k_d) {
            (Some(kind), Some(kd)) => {
                let scale = match kind {
                    KdKind::Continuous { scale } => scale,
                    KdKind::StepIndex => 1.0,
                };
                let kd_sin: Array2<F> = Array2::from_shape_fn((b, e), |(r, c)| {
                    F::from_f64(sinusoidal_component(kd[r] * scale, c, e))
                });
                let kd_in = tape.leaf(kd_sin);
                let kd_emb = self.mlp2(tape, kd_in, self.idx.kd_mlp.unwrap(), vars, false);
                let c = tape.concat_seq(kc_emb, kd_emb, b);
                tape.concat_seq(c, obs_emb, b)
            }
            _ => tape.concat_seq(kc_emb, obs_emb, b),
        };
        let cond = tape.broadcast_seq_add(cond, vars[self.idx.pos_cond], b);
        self.mlp2(tape, cond, self.idx.cond_enc, vars, false)
    }

    /// Concatenate the embedded continuous and discrete streams along the
    /// sequence axis and add learned absolute positions.
    pub fn decode_joint_sequence(
        &self,
        tape: &mut Tape<F>,
        cont_emb: Var,
        disc_emb: Option<Var>,
        batch: usize,
        vars: &[Var],
    ) -> Var {
        let joined = match disc_emb {
            Some(d) => tape.concat_seq(cont_emb, d, batch),
            None => cont_emb,
        };
        tape.broadcast_seq_add(joined, vars[self.idx.pos_seq], batch)
    }

    /// Batched forward pass. `dropout_rng` enables attention dropout.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        inputs: &DenoiserInputs<F>,
        mut dropout_rng: Option<&mut Stream>,
    ) -> Result<ForwardVars> {
        self.validate_inputs(inputs)?;
        let b = inputs.batch;
        let vars: Vec<Var> = self.values.iter().map(|p| tape.leaf(p.clone())).collect();

        let cont_in = tape.leaf(inputs.cont.clone());
        let cont_emb = self.linear_at(tape, cont_in, self.idx.cont_in_w, self.idx.cont_in_b, &vars);
        let disc_emb = match self.shape.disc.map(|d| d.input) {
            Some(DiscInput::TokenTable { .. }) => {
                let ids: Vec<u32> = inputs
                    .disc_tokens
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|t| *t as u32)
                    .collect();
                Some(tape.embed_gather(vars[self.idx.disc_table.unwrap()], ids))
            }
            Some(DiscInput::Linear { .. }) => {
                let lifted = tape.leaf(inputs.disc_lifted.clone().unwrap());
                let (w, bia) = self.idx.disc_in.unwrap();
                Some(self.linear_at(tape, lifted, w, bia, &vars))
            }
            None => None,
        };
        let mut x = self.decode_joint_sequence(tape, cont_emb, disc_emb, b, &vars);
        let cond = self.embed_conditioning(tape, inputs, &vars);

        let seq = self.shape.seq_len();
        let cond_len = self.shape.cond_len();
        for layer in &self.idx.layers {
            let h = tape.layer_norm(x, vars[layer.ln1.0], vars[layer.ln1.1]);
            let q = self.linear_at(tape, h, layer.wq, layer.bq, &vars);
            let k = self.linear_at(tape, h, layer.wk, layer.bk, &vars);
            let v = self.linear_at(tape, h, layer.wv, layer.bv, &vars);
            let masks = dropout_rng
                .as_deref_mut()
                .and_then(|rng| self.drop_masks(b, seq, seq, rng));
            let attn = tape.attention(q, k, v, self.cfg.heads, b, masks);
            let attn = self.linear_at(tape, attn, layer.wo, layer.bo, &vars);
            x = tape.add(x, attn);

            let h = tape.layer_norm(x, vars[layer.ln2.0], vars[layer.ln2.1]);
            let q = self.linear_at(tape, h, layer.cq_w, layer.cq_b, &vars);
            let k = self.linear_at(tape, cond, layer.ck_w, layer.ck_b, &vars);
            let v = self.linear_at(tape, cond, layer.cv_w, layer.cv_b, &vars);
            let masks = dropout_rng
                .as_deref_mut()
                .and_then(|rng| self.drop_masks(b, seq, cond_len, rng));
            let cross = tape.attention(q, k, v, self.cfg.heads, b, masks);
            let cross = self.linear_at(tape, cross, layer.co_w, layer.co_b, &vars);
            x = tape.add(x, cross);

            let h = tape.layer_norm(x, vars[layer.ln3.0], vars[layer.ln3.1]);
            let m1 = tape.matmul(h, vars[layer.mlp_w1]);
            let m1 = tape.add_bias_row(m1, vars[layer.mlp_b1]);
            let m1 = tape.gelu(m1);
            let m2 = tape.matmul(m1, vars[layer.mlp_w2]);
            let m2 = tape.add_bias_row(m2, vars[layer.mlp_b2]);
            x = tape.add(x, m2);
        }
        let x = tape.layer_norm(x, vars[self.idx.ln_f.0], vars[self.idx.ln_f.1]);

        let cont_rows = tape.slice_seq(x, b, 0, self.shape.cont_len);
        let eps_hat = self.linear_at(tape, cont_rows, self.idx.head_c_w, self.idx.head_c_b, &vars);
        let disc_out = self.shape.disc.map(|d| {
            let rows = tape.slice_seq(x, b, self.shape.cont_len, d.len);
            let (w, bias) = self.idx.head_d.unwrap();
            self.linear_at(tape, rows, w, bias, &vars)
        });
        Ok(ForwardVars {
            eps_hat,
            disc_out,
            param_vars: vars,
        })
    }
}

impl Denoiser<f32> {
    /// Single-sample denoise with dropout off; assembles the public output
    /// types with the mask column pinned for token-head models.
    pub fn denoise(&self, inputs: &DenoiserInputs<f32>) -> Result<DenoiserOutput> {
        if inputs.batch != 1 {
            return Err(HdpError::InvalidArgument(
                "denoise() is the single-sample entry point".into(),
            ));
        }
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, inputs, None)?;
        let eps = tape.value(fwd.eps_hat).clone();
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(HdpError::Validation("non-finite denoiser output".into()));
        }
        let logits = match fwd.disc_out {
            Some(v) => {
                let raw = tape.value(v).clone();
                match self.shape.disc.unwrap().input {
                    DiscInput::TokenTable { .. } => Some(UnmaskLogits::from_raw(raw)?),
                    DiscInput::Linear { .. } => None,
                }
            }
            None => None,
        };
        Ok(DenoiserOutput {
            epsilon_hat: NoiseSample { epsilon: eps },
            logits,
        })
    }
}

/// Component `c` of the standard sinusoidal embedding of scalar `x` at
/// width `dim`: the first half holds sines, the second cosines.
pub fn sinusoidal_component(x: f64, c: usize, dim: usize) -> f64 {
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let scale = (10_000.0f64).ln() / denom;
    if c < half {
        (x * (-(c as f64) * scale).exp()).sin()
    } else {
        (x * (-((c - half) as f64) * scale).exp()).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngcore::SeedTree;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            heads: 2,
            emb_dim: 32,
            attn_dropout: 0.0,
            causal: false,
        }
    }

    fn hybrid_shape() -> DenoiserShape {
        DenoiserShape {
            cont_len: 5,
            cont_dim: 3,
            disc: Some(DiscSpec {
                len: 4,
                input: DiscInput::TokenTable { vocab_size: 7 },
                head_dim: 7,
            }),
            obs_dim: 4,
            kd: Some(KdKind::Continuous { scale: 10.0 }),
        }
    }

    fn sample_inputs(batch: usize, seed: u64) -> DenoiserInputs<f32> {
        let mut rng = SeedTree::new(seed).derive("inputs", 0).stream();
        DenoiserInputs {
            batch,
            cont: Array2::from_shape_fn((batch * 5, 3), |_| {
                crate::rngcore::normal_f32(&mut rng)
            }),
            disc_tokens: Some(
                (0..batch * 4)
                    .map(|_| crate::rngcore::below(&mut rng, 7) as u16)
                    .collect(),
            ),
            disc_lifted: None,
            obs: Array2::from_shape_fn((batch, 4), |_| crate::rngcore::normal_f32(&mut rng)),
            k_c: (0..batch)
                .map(|_| crate::rngcore::below(&mut rng, 10))
                .collect(),
            k_d: Some((0..batch).map(|_| crate::rngcore::uniform_f64(&mut rng)).collect()),
        }
    }

    #[test]
    fn rejects_causal_and_bad_dims() {
        let mut rng = SeedTree::new(0).stream();
        let mut cfg = tiny_cfg();
        cfg.causal = true;
        assert!(Denoiser::<f32>::new(cfg, hybrid_shape(), &mut rng).is_err());
        let mut cfg = tiny_cfg();
        cfg.emb_dim = 33;
        assert!(Denoiser::<f32>::new(cfg, hybrid_shape(), &mut rng).is_err());
    }

    #[test]
    fn forward_is_deterministic_with_dropout_off() {
        let mut rng = SeedTree::new(1).stream();
        let d = Denoiser::<f32>::new(tiny_cfg(), hybrid_shape(), &mut rng).unwrap();
        let inputs = sample_inputs(1, 3);
        let a = d.denoise(&inputs).unwrap();
        let b = d.denoise(&inputs).unwrap();
        assert_eq!(a.epsilon_hat.epsilon, b.epsilon_hat.epsilon);
        assert_eq!(
            a.logits.as_ref().unwrap().raw(),
            b.logits.as_ref().unwrap().raw()
        );
    }

    #[test]
    fn observation_perturbation_changes_outputs() {
        let mut rng = SeedTree::new(2).stream();
        let d = Denoiser::<f32>::new(tiny_cfg(), hybrid_shape(), &mut rng).unwrap();
        let inputs = sample_inputs(1, 4);
        let mut shifted = inputs.clone();
        shifted.obs.mapv_inplace(|v| v + 0.5);
        let a = d.denoise(&inputs).unwrap();
        let b = d.denoise(&shifted).unwrap();
        assert_ne!(a.epsilon_hat.epsilon, b.epsilon_hat.epsilon);
    }

    #[test]
    fn kd_extremes_embed_differently() {
        let mut rng = SeedTree::new(3).stream();
        let d = Denoiser::<f32>::new(tiny_cfg(), hybrid_shape(), &mut rng).unwrap();
        let mut a = sample_inputs(1, 5);
        a.k_d = Some(vec![0.0]);
        let mut b = a.clone();
        b.k_d = Some(vec![1.0]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = d.values.iter().map(|p| tape.leaf(p.clone())).collect();
        let ca = d.embed_conditioning(&mut tape, &a, &vars);
        let cb = d.embed_conditioning(&mut tape, &b, &vars);
        assert_ne!(tape.value(ca), tape.value(cb));
        // Three conditioning tokens for state observations.
        assert_eq!(tape.value(ca).nrows(), 3);
    }

    #[test]
    fn conditioning_step_embedding_matches_reference() {
        // Independent reimplementation of the sinusoidal + Mish MLP path for
        // k_c = 7 at emb_dim = 32.
        let mut rng = SeedTree::new(4).stream();
        let d = Denoiser::<f64>::new(tiny_cfg(), hybrid_shape(), &mut rng).unwrap();
        let e = 32usize;
        let sin: Vec<f64> = (0..e).map(|c| sinusoidal_component(7.0, c, e)).collect();
        // Reference MLP: fc1 -> mish -> fc2 using raw parameter tensors.
        let (w1, b1, w2, b2) = d.idx.kc_mlp;
        let hidden = 4 * e;
        let mut h = vec![0.0f64; hidden];
        for j in 0..hidden {
            let mut acc = d.values[b1][[0, j]];
            for i in 0..e {
                acc += sin[i] * d.values[w1][[i, j]];
            }
            h[j] = crate::autodiff::mish_scalar(acc);
        }
        let mut reference = vec![0.0f64; e];
        for j in 0..e {
            let mut acc = d.values[b2][[0, j]];
            for i in 0..hidden {
                acc += h[i] * d.values[w2][[i, j]];
            }
            reference[j] = acc;
        }
        // Library path.
        let inputs = DenoiserInputs::<f64> {
            batch: 1,
            cont: Array2::zeros((5, 3)),
            disc_tokens: Some(vec![0, 1, 2, 3]),
            disc_lifted: None,
            obs: Array2::zeros((1, 4)),
            k_c: vec![7],
            k_d: Some(vec![0.5]),
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = d.values.iter().map(|p| tape.leaf(p.clone())).collect();
        let kc_sin: Array2<f64> = Array2::from_shape_fn((1, e), |(_, c)| {
            sinusoidal_component(inputs.k_c[0] as f64, c, e)
        });
        let kc_in = tape.leaf(kc_sin);
        let kc_emb = d.mlp2(&mut tape, kc_in, d.idx.kc_mlp, &vars, false);
        for (c, r) in reference.iter().enumerate() {
            let got = tape.value(kc_emb)[[0, c]];
            assert!((got - r).abs() < 1e-12, "component {c}: {got} vs {r}");
        }
    }

    #[test]
    fn joint_sequence_length_and_order_sensitivity() {
        let mut rng = SeedTree::new(5).stream();
        let shape = DenoiserShape {
            cont_len: 4,
            cont_dim: 2,
            disc: Some(DiscSpec {
                len: 3,
                input: DiscInput::TokenTable { vocab_size: 5 },
                head_dim: 5,
            }),
            obs_dim: 2,
            kd: Some(KdKind::Continuous { scale: 4.0 }),
        };
        let d = Denoiser::<f32>::new(tiny_cfg(), shape, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = d.values.iter().map(|p| tape.leaf(p.clone())).collect();
        let cont = tape.leaf(Array2::from_elem((4, 32), 0.1f32));
        let disc = tape.leaf(Array2::from_elem((3, 32), -0.2f32));
        let joined = d.decode_joint_sequence(&mut tape, cont, Some(disc), 1, &vars);
        assert_eq!(tape.value(joined).nrows(), 7);
        // Swapping the concatenation order changes the result.
        let swapped = d.decode_joint_sequence(&mut tape, disc, Some(cont), 1, &vars);
        assert_ne!(tape.value(joined), tape.value(swapped));
    }

    #[test]
    fn batch_rows_match_single_sample_rows_bitwise() {
        let mut rng = SeedTree::new(6).stream();
        let d = Denoiser::<f32>::new(tiny_cfg(), hybrid_shape(), &mut rng).unwrap();
        let batch_inputs = sample_inputs(3, 7);
        let mut tape = Tape::new();
        let out = d.forward(&mut tape, &batch_inputs, None).unwrap();
        let eps_batch = tape.value(out.eps_hat).clone();
        let disc_batch = tape.value(out.disc_out.unwrap()).clone();
        for i in 0..3 {
            let single = DenoiserInputs {
                batch: 1,
                cont: batch_inputs
                    .cont
                    .slice(ndarray::s![i * 5..(i + 1) * 5, ..])
                    .to_owned(),
                disc_tokens: Some(batch_inputs.disc_tokens.as_ref().unwrap()[i * 4..(i + 1) * 4].to_vec()),
                disc_lifted: None,
                obs: batch_inputs.obs.slice(ndarray::s![i..i + 1, ..]).to_owned(),
                k_c: vec![batch_inputs.k_c[i]],
                k_d: Some(vec![batch_inputs.k_d.as_ref().unwrap()[i]]),
            };
            let mut tape1 = Tape::new();
            let out1 = d.forward(&mut tape1, &single, None).unwrap();
            let eps1 = tape1.value(out1.eps_hat);
            let disc1 = tape1.value(out1.disc_out.unwrap());
            for r in 0..5 {
                for c in 0..3 {
                    assert_eq!(
                        eps_batch[[i * 5 + r, c]].to_bits(),
                        eps1[[r, c]].to_bits(),
                        "eps row mismatch at sample {i}"
                    );
                }
            }
            for r in 0..4 {
                for c in 0..7 {
                    assert_eq!(
                        disc_batch[[i * 4 + r, c]].to_bits(),
                        disc1[[r, c]].to_bits(),
                        "logit row mismatch at sample {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn fully_masked_input_ignores_originating_clean_tokens() {
        let mut rng = SeedTree::new(8).stream();
        let d = Denoiser::<f32>::new(tiny_cfg(), hybrid_shape(), &mut rng).unwrap();
        let mut a = sample_inputs(1, 9);
        // Fully masked stream at k_d = 1 regardless of the clean plan that
        // generated it: identical inputs by construction.
        a.disc_tokens = Some(vec![6; 4]);
        a.k_d = Some(vec![1.0]);
        let b = a.clone();
        let oa = d.denoise(&a).unwrap();
        let ob = d.denoise(&b).unwrap();
        assert_eq!(oa.epsilon_hat.epsilon, ob.epsilon_hat.epsilon);
    }
}

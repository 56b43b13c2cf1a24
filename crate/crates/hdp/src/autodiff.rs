//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! Exactly the operations the denoiser needs: dense matmul, bias/residual
//! adds, GELU/Mish, layer norm, multi-head attention (with optional
//! probability dropout), embedding gather, per-sample sequence concat/slice,
//! and the two loss heads. Batched activations are stored sample-major as
//! `(batch * seq, dim)` matrices; every operation treats rows independently
//! or per sample, so results are bitwise identical across batch
//! compositions.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ScalarOperand};

/// Element type of a tape; training runs in f32, gradient checks in f64.
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + ScalarOperand + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBiasRow(Var, Var),
    Add(Var, Var),
    /// a + c * b
    AddScaled(Var, Var, F),
    Gelu(Var),
    Mish(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        /// Pre-dropout softmax probabilities, one (q_len, kv_len) per (b, head).
        probs: Vec<Array2<F>>,
        /// Dropout scale mask (0 or 1/keep), same layout as probs.
        drop: Option<Vec<Array2<F>>>,
    },
    EmbedGather {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatSeq {
        a: Var,
        b: Var,
        batch: usize,
        a_len: usize,
        b_len: usize,
    },
    SliceSeq {
        x: Var,
        batch: usize,
        seq_len: usize,
        start: usize,
        len: usize,
    },
    /// x (batch*seq, dim) + table (seq, dim) tiled over samples.
    BroadcastSeqAdd {
        x: Var,
        table: Var,
        batch: usize,
    },
    MseLoss {
        pred: Var,
        target: Array2<F>,
    },
    MaskedCeLoss {
        logits: Var,
        targets: Vec<u32>,
        row_weight: Vec<F>,
        real_cols: usize,
        scale: F,
        probs: Array2<F>,
    },
}

pub struct Tape<F: Scalar> {
    values: Vec<Array2<F>>,
    grads: Vec<Option<Array2<F>>>,
    ops: Vec<Op<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads[v.0].take()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.values[v.0][[0, 0]]
    }

    fn acc_grad(&mut self, v: Var, delta: Array2<F>) {
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.values[a.0].dim();
        let (kb, n) = self.values[b.0].dim();
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = Array2::zeros((m, n));
        general_mat_mul(
            F::one(),
            &self.values[a.0],
            &self.values[b.0],
            F::zero(),
            &mut out,
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// x (R, N) + bias (1, N) broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Var {
        assert_eq!(self.values[bias.0].nrows(), 1);
        assert_eq!(self.values[x.0].ncols(), self.values[bias.0].ncols());
        let out = &self.values[x.0] + &self.values[bias.0];
        self.push(out, Op::AddBiasRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim());
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(out, Op::Add(a, b))
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: F) -> Var {
        assert_eq!(self.values[a.0].dim(), self.values[b.0].dim());
        let out = &self.values[a.0] + &(&self.values[b.0] * c);
        self.push(out, Op::AddScaled(a, b, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(gelu_fwd);
        self.push(out, Op::Gelu(x))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(mish_fwd);
        self.push(out, Op::Mish(x))
    }

    /// Row-wise layer norm with learnable gain/bias (1, N).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = F::from_f64(1e-5);
        let xv = &self.values[x.0];
        let (rows, cols) = xv.dim();
        let n = F::from_f64(cols as f64);
        let mut out = Array2::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.sum() / n;
            let mut var = F::zero();
            for v in row.iter() {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let xhat = (row[c] - mean) * rs;
                out[[r, c]] = xhat * self.values[gain.0][[0, c]] + self.values[bias.0][[0, c]];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, rstd })
    }

    /// Multi-head attention over sample-major activations.
    ///
    /// `q` is `(batch * q_len, dim)`, `k`/`v` are `(batch * kv_len, dim)`;
    /// `dim` splits evenly into `heads`. `drop_mask`, when present, holds one
    /// pre-scaled (0 or 1/keep) mask per (sample, head).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        drop_mask: Option<Vec<Array2<F>>>,
    ) -> Var {
        let dim = self.values[q.0].ncols();
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
        let head_dim = dim / heads;
        let q_len = self.values[q.0].nrows() / batch;
        let kv_len = self.values[k.0].nrows() / batch;
        assert_eq!(self.values[q.0].nrows(), batch * q_len);
        assert_eq!(self.values[k.0].nrows(), batch * kv_len);
        assert_eq!(self.values[v.0].nrows(), batch * kv_len);
        if let Some(masks) = &drop_mask {
            assert_eq!(masks.len(), batch * heads);
        }
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut out = Array2::zeros((batch * q_len, dim));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let qs = self.values[q.0].slice(s![
                    b * q_len..(b + 1) * q_len,
                    h * head_dim..(h + 1) * head_dim
                ]);
                let ks = self.values[k.0].slice(s![
                    b * kv_len..(b + 1) * kv_len,
                    h * head_dim..(h + 1) * head_dim
                ]);
                let vs = self.values[v.0].slice(s![
                    b * kv_len..(b + 1) * kv_len,
                    h * head_dim..(h + 1) * head_dim
                ]);
                let mut scores: Array2<F> = Array2::zeros((q_len, kv_len));
                general_mat_mul(scale, &qs, &ks.t(), F::zero(), &mut scores);
                softmax_rows_inplace(&mut scores);
                let p_used = match &drop_mask {
                    Some(masks) => &scores * &masks[b * heads + h],
                    None => scores.clone(),
                };
                let mut o_slice = out.slice_mut(s![
                    b * q_len..(b + 1) * q_len,
                    h * head_dim..(h + 1) * head_dim
                ]);
                general_mat_mul(F::one(), &p_used, &vs, F::zero(), &mut o_slice);
                probs.push(scores);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                q_len,
                kv_len,
                probs,
                drop: drop_mask,
            },
        )
    }

    /// Gather rows of `table` by token id; one output row per id.
    pub fn embed_gather(&mut self, table: Var, ids: Vec<u32>) -> Var {
        let cols = self.values[table.0].ncols();
        let rows = self.values[table.0].nrows();
        let mut out = Array2::zeros((ids.len(), cols));
        for (r, id) in ids.iter().enumerate() {
            assert!((*id as usize) < rows, "token id {id} out of table");
            out.row_mut(r)
                .assign(&self.values[table.0].row(*id as usize));
        }
        self.push(out, Op::EmbedGather { table, ids })
    }

    /// Per-sample concatenation along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Var {
        let dim = self.values[a.0].ncols();
        assert_eq!(dim, self.values[b.0].ncols());
        let a_len = self.values[a.0].nrows() / batch;
        let b_len = self.values[b.0].nrows() / batch;
        assert_eq!(self.values[a.0].nrows(), batch * a_len);
        assert_eq!(self.values[b.0].nrows(), batch * b_len);
        let mut out = Array2::zeros((batch * (a_len + b_len), dim));
        for i in 0..batch {
            out.slice_mut(s![i * (a_len + b_len)..i * (a_len + b_len) + a_len, ..])
                .assign(&self.values[a.0].slice(s![i * a_len..(i + 1) * a_len, ..]));
            out.slice_mut(s![i * (a_len + b_len) + a_len..(i + 1) * (a_len + b_len), ..])
                .assign(&self.values[b.0].slice(s![i * b_len..(i + 1) * b_len, ..]));
        }
        self.push(
            out,
            Op::ConcatSeq {
                a,
                b,
                batch,
                a_len,
                b_len,
            },
        )
    }

    /// Per-sample slice of `len` rows starting at `start` within each
    /// sample's `seq_len` block.
    pub fn slice_seq(&mut self, x: Var, batch: usize, start: usize, len: usize) -> Var {
        let dim = self.values[x.0].ncols();
        let seq_len = self.values[x.0].nrows() / batch;
        assert!(start + len <= seq_len);
        let mut out = Array2::zeros((batch * len, dim));
        for i in 0..batch {
            out.slice_mut(s![i * len..(i + 1) * len, ..]).assign(
                &self.values[x.0].slice(s![i * seq_len + start..i * seq_len + start + len, ..]),
            );
        }
        self.push(
            out,
            Op::SliceSeq {
                x,
                batch,
                seq_len,
                start,
                len,
            },
        )
    }

    /// Add a `(seq, dim)` table to every sample block of x.
    pub fn broadcast_seq_add(&mut self, x: Var, table: Var, batch: usize) -> Var {
        let (rows, dim) = self.values[x.0].dim();
        let seq = self.values[table.0].nrows();
        assert_eq!(rows, batch * seq);
        assert_eq!(dim, self.values[table.0].ncols());
        let mut out = self.values[x.0].clone();
        for i in 0..batch {
            let mut blk = out.slice_mut(s![i * seq..(i + 1) * seq, ..]);
            blk += &self.values[table.0];
        }
        self.push(out, Op::BroadcastSeqAdd { x, table, batch })
    }

    /// Mean squared error against a constant target; returns a 1x1 scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Array2<F>) -> Var {
        assert_eq!(self.values[pred.0].dim(), target.dim());
        let n = F::from_f64(target.len() as f64);
        let mut total = F::zero();
        for (p, t) in self.values[pred.0].iter().zip(target.iter()) {
            let d = *p - *t;
            total = total + d * d;
        }
        let value = Array2::from_elem((1, 1), total / n);
        self.push(value, Op::MseLoss { pred, target })
    }

    /// Weighted cross-entropy over selected rows of `logits`, softmax taken
    /// over the first `real_cols` columns only. Row weights of zero skip the
    /// row; `scale` multiplies the total (used for the mean over batch).
    pub fn masked_ce_loss(
        &mut self,
        logits: Var,
        targets: Vec<u32>,
        row_weight: Vec<F>,
        real_cols: usize,
        scale: F,
    ) -> Var {
        let (rows, cols) = self.values[logits.0].dim();
        assert_eq!(targets.len(), rows);
        assert_eq!(row_weight.len(), rows);
        assert!(real_cols <= cols);
        let mut probs = Array2::zeros((rows, real_cols));
        let mut total = F::zero();
        for r in 0..rows {
            if row_weight[r] == F::zero() {
                continue;
            }
            let row = self.values[logits.0].row(r);
            let mut best = F::neg_infinity();
            for c in 0..real_cols {
                if row[c] > best {
                    best = row[c];
                }
            }
            let mut z = F::zero();
            for c in 0..real_cols {
                let e = (row[c] - best).exp();
                probs[[r, c]] = e;
                z = z + e;
            }
            let target = targets[r] as usize;
            assert!(target < real_cols, "target {target} not a real symbol");
            for c in 0..real_cols {
                probs[[r, c]] = probs[[r, c]] / z;
            }
            let logp = probs[[r, target]].max(F::from_f64(1e-300)).ln();
            total = total - row_weight[r] * logp;
        }
        let value = Array2::from_elem((1, 1), total * scale);
        self.push(
            value,
            Op::MaskedCeLoss {
                logits,
                targets,
                row_weight,
                real_cols,
                scale,
                probs,
            },
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "loss must be scalar");
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..self.ops.len()).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backward_op(&op, &g);
            self.ops[i] = op;
        }
    }

    fn backward_op(&mut self, op: &Op<F>, g: &Array2<F>) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let mut da = Array2::zeros(self.values[a.0].raw_dim());
                general_mat_mul(F::one(), g, &self.values[b.0].t(), F::zero(), &mut da);
                self.acc_grad(*a, da);
                let mut db = Array2::zeros(self.values[b.0].raw_dim());
                general_mat_mul(F::one(), &self.values[a.0].t(), g, F::zero(), &mut db);
                self.acc_grad(*b, db);
            }
            Op::AddBiasRow(x, bias) => {
                self.acc_grad(*x, g.clone());
                let mut db = Array2::zeros((1, g.ncols()));
                for r in 0..g.nrows() {
                    let mut row = db.row_mut(0);
                    row += &g.row(r);
                }
                self.acc_grad(*bias, db);
            }
            Op::Add(a, b) => {
                self.acc_grad(*a, g.clone());
                self.acc_grad(*b, g.clone());
            }
            Op::AddScaled(a, b, c) => {
                self.acc_grad(*a, g.clone());
                self.acc_grad(*b, g * *c);
            }
            Op::Gelu(x) => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.values[x.0])
                    .map_collect(|gv, xv| *gv * gelu_bwd(*xv));
                self.acc_grad(*x, dx);
            }
            Op::Mish(x) => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.values[x.0])
                    .map_collect(|gv, xv| *gv * mish_bwd(*xv));
                self.acc_grad(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = &self.values[x.0];
                let (rows, cols) = xv.dim();
                let n = F::from_f64(cols as f64);
                let gainv = self.values[gain.0].clone();
                let mut dx = Array2::zeros((rows, cols));
                let mut dgain = Array2::zeros((1, cols));
                let mut dbias = Array2::zeros((1, cols));
                for r in 0..rows {
                    let rs = rstd[r];
                    let row = xv.row(r);
                    let mean = row.sum() / n;
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * rs;
                        let dy = g[[r, c]];
                        dgain[[0, c]] = dgain[[0, c]] + dy * xhat;
                        dbias[[0, c]] = dbias[[0, c]] + dy;
                        let dxhat = dy * gainv[[0, c]];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    let m1 = sum_dxhat / n;
                    let m2 = sum_dxhat_xhat / n;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * rs;
                        let dxhat = g[[r, c]] * gainv[[0, c]];
                        dx[[r, c]] = rs * (dxhat - m1 - xhat * m2);
                    }
                }
                self.acc_grad(*x, dx);
                self.acc_grad(*gain, dgain);
                self.acc_grad(*bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                q_len,
                kv_len,
                probs,
                drop,
            } => {
                let dim = self.values[q.0].ncols();
                let head_dim = dim / heads;
                let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
                let mut dq = Array2::zeros((batch * q_len, dim));
                let mut dk = Array2::zeros((batch * kv_len, dim));
                let mut dv = Array2::zeros((batch * kv_len, dim));
                for b in 0..*batch {
                    for h in 0..*heads {
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![
                            b * q_len..(b + 1) * q_len,
                            h * head_dim..(h + 1) * head_dim
                        ]);
                        let vs = self.values[v.0].slice(s![
                            b * kv_len..(b + 1) * kv_len,
                            h * head_dim..(h + 1) * head_dim
                        ]);
                        let qs = self.values[q.0].slice(s![
                            b * q_len..(b + 1) * q_len,
                            h * head_dim..(h + 1) * head_dim
                        ]);
                        let ks = self.values[k.0].slice(s![
                            b * kv_len..(b + 1) * kv_len,
                            h * head_dim..(h + 1) * head_dim
                        ]);
                        let p_used = match drop {
                            Some(masks) => p * &masks[b * heads + h],
                            None => p.clone(),
                        };
                        {
                            let mut dvs = dv.slice_mut(s![
                                b * kv_len..(b + 1) * kv_len,
                                h * head_dim..(h + 1) * head_dim
                            ]);
                            general_mat_mul(F::one(), &p_used.t(), &go, F::one(), &mut dvs);
                        }
                        let mut dp: Array2<F> = Array2::zeros((*q_len, *kv_len));
                        general_mat_mul(F::one(), &go, &vs.t(), F::zero(), &mut dp);
                        if let Some(masks) = drop {
                            dp = &dp * &masks[b * heads + h];
                        }
                        // dS = P o (dP - rowsum(dP o P))
                        let mut ds = Array2::zeros((*q_len, *kv_len));
                        for r in 0..*q_len {
                            let mut dot = F::zero();
                            for c in 0..*kv_len {
                                dot = dot + dp[[r, c]] * p[[r, c]];
                            }
                            for c in 0..*kv_len {
                                ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot);
                            }
                        }
                        {
                            let mut dqs = dq.slice_mut(s![
                                b * q_len..(b + 1) * q_len,
                                h * head_dim..(h + 1) * head_dim
                            ]);
                            general_mat_mul(scale, &ds, &ks, F::one(), &mut dqs);
                        }
                        {
                            let mut dks = dk.slice_mut(s![
                                b * kv_len..(b + 1) * kv_len,
                                h * head_dim..(h + 1) * head_dim
                            ]);
                            general_mat_mul(scale, &ds.t(), &qs, F::one(), &mut dks);
                        }
                    }
                }
                self.acc_grad(*q, dq);
                self.acc_grad(*k, dk);
                self.acc_grad(*v, dv);
            }
            Op::EmbedGather { table, ids } => {
                let cols = g.ncols();
                let mut dt = Array2::zeros(self.values[table.0].raw_dim());
                for (r, id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(*id as usize);
                    for c in 0..cols {
                        row[c] = row[c] + g[[r, c]];
                    }
                }
                self.acc_grad(*table, dt);
            }
            Op::ConcatSeq {
                a,
                b,
                batch,
                a_len,
                b_len,
            } => {
                let dim = g.ncols();
                let total = a_len + b_len;
                let mut da = Array2::zeros((batch * a_len, dim));
                let mut db = Array2::zeros((batch * b_len, dim));
                for i in 0..*batch {
                    da.slice_mut(s![i * a_len..(i + 1) * a_len, ..])
                        .assign(&g.slice(s![i * total..i * total + a_len, ..]));
                    db.slice_mut(s![i * b_len..(i + 1) * b_len, ..])
                        .assign(&g.slice(s![i * total + a_len..(i + 1) * total, ..]));
                }
                self.acc_grad(*a, da);
                self.acc_grad(*b, db);
            }
            Op::SliceSeq {
                x,
                batch,
                seq_len,
                start,
                len,
            } => {
                let dim = g.ncols();
                let mut dx = Array2::zeros((batch * seq_len, dim));
                for i in 0..*batch {
                    dx.slice_mut(s![i * seq_len + start..i * seq_len + start + len, ..])
                        .assign(&g.slice(s![i * len..(i + 1) * len, ..]));
                }
                self.acc_grad(*x, dx);
            }
            Op::BroadcastSeqAdd { x, table, batch } => {
                self.acc_grad(*x, g.clone());
                let seq = self.values[table.0].nrows();
                let mut dt = Array2::zeros(self.values[table.0].raw_dim());
                for i in 0..*batch {
                    dt += &g.slice(s![i * seq..(i + 1) * seq, ..]);
                }
                self.acc_grad(*table, dt);
            }
            Op::MseLoss { pred, target } => {
                let n = F::from_f64(target.len() as f64);
                let gl = g[[0, 0]];
                let c = F::from_f64(2.0) * gl / n;
                let dp = ndarray::Zip::from(&self.values[pred.0])
                    .and(target)
                    .map_collect(|p, t| (*p - *t) * c);
                self.acc_grad(*pred, dp);
            }
            Op::MaskedCeLoss {
                logits,
                targets,
                row_weight,
                real_cols,
                scale,
                probs,
            } => {
                let gl = g[[0, 0]];
                let (rows, cols) = self.values[logits.0].dim();
                let mut dl = Array2::zeros((rows, cols));
                for r in 0..rows {
                    if row_weight[r] == F::zero() {
                        continue;
                    }
                    let coef = gl * *scale * row_weight[r];
                    let target = targets[r] as usize;
                    for c in 0..*real_cols {
                        let indicator = if c == target { F::one() } else { F::zero() };
                        dl[[r, c]] = coef * (probs[[r, c]] - indicator);
                    }
                }
                self.acc_grad(*logits, dl);
            }
        }
    }
}

fn softmax_rows_inplace<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let mut best = F::neg_infinity();
        for v in row.iter() {
            if *v > best {
                best = *v;
            }
        }
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - best).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn softplus<F: Scalar>(x: F) -> F {
    let twenty = F::from_f64(20.0);
    if x > twenty {
        x
    } else if x < -twenty {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

fn mish_fwd<F: Scalar>(x: F) -> F {
    x * softplus(x).tanh()
}

fn mish_bwd<F: Scalar>(x: F) -> F {
    let sp = softplus(x);
    let t = sp.tanh();
    let sigmoid = F::one() / (F::one() + (-x).exp());
    t + x * (F::one() - t * t) * sigmoid
}

/// Element-wise Mish used outside the tape (reference implementations).
pub fn mish_scalar(x: f64) -> f64 {
    mish_fwd(x)
}

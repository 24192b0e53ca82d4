//! Reverse-mode differentiation over a recorded value graph.
//!
//! Builder methods compute the forward value immediately and record the
//! operation; `backward_*` replays the recording in exact reverse order,
//! accumulating gradients per buffer. Nodes present f32 values; the op
//! chain and the backward sweep run in f64 underneath, so cancellation does
//! not poison small gradients. Network parameters are registered once per
//! tape
//! (`bind_net`), so repeated forwards of the same net — e.g. the drift net
//! applied along a sampling chain — accumulate into shared parameter
//! gradients.

use std::collections::HashMap;

use crate::diffcore::net::{Act, MlpNet};
use crate::diffcore::tensor::Tensor2;
use crate::error::{DvdError, Result};

pub type ValueId = usize;

#[derive(Debug, Clone)]
enum TapeOp {
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    MatmulNT { a: ValueId, b: ValueId, out: ValueId },
    AddRow { a: ValueId, bias: ValueId, out: ValueId },
    /// Broadcast-add an n x 1 column to every column of a.
    AddCol { a: ValueId, col: ValueId, out: ValueId },
    Relu { a: ValueId, out: ValueId },
    SoftmaxRows { a: ValueId, out: ValueId },
    ConcatCols { a: ValueId, b: ValueId, out: ValueId },
    /// out = a + s * b
    Axpy { a: ValueId, b: ValueId, s: f32, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Sub { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Scale { a: ValueId, s: f32, out: ValueId },
    Exp { a: ValueId, out: ValueId },
    Ln { a: ValueId, out: ValueId },
    /// Row-wise dot product, out is n x 1.
    DotRows { a: ValueId, b: ValueId, out: ValueId },
    SumRows { a: ValueId, out: ValueId },
    SumAll { a: ValueId, out: ValueId },
    /// Mean cross-entropy of softmax(logits) against integer labels.
    SoftmaxCe { logits: ValueId, labels: Vec<u32>, out: ValueId },
}

struct TapeBuf {
    /// f32 presentation of the node, rounded from the shadow.
    value: Tensor2,
    /// f64 computation values, row-major; ops chain through these.
    shadow: Vec<f64>,
    /// Same shape as `value`, row-major, f64 accumulation.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct GradTape {
    bufs: Vec<TapeBuf>,
    ops: Vec<TapeOp>,
    /// net id -> per-layer (weight, bias) value ids.
    bindings: HashMap<u64, Vec<(ValueId, ValueId)>>,
    ran_backward: bool,
}

/// Per-layer parameter gradients in the owning net's layer order.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<(Tensor2, Tensor2)>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn constant(&mut self, value: Tensor2) -> ValueId {
        let id = self.bufs.len();
        let shadow = value.data().iter().map(|&v| v as f64).collect();
        self.bufs.push(TapeBuf {
            value,
            shadow,
            grad: None,
        });
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor2 {
        &self.bufs[id].value
    }

    /// Accumulated gradient for a node, cast back to f32.
    pub fn grad(&self, id: ValueId) -> Option<Tensor2> {
        self.bufs[id].grad.as_ref().map(|g| {
            let v = &self.bufs[id].value;
            Tensor2::from_vec(v.rows(), v.cols(), g.iter().map(|&x| x as f32).collect())
                .expect("grad shape matches value")
        })
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push_shadow(
        &mut self,
        rows: usize,
        cols: usize,
        shadow: Vec<f64>,
        op: impl FnOnce(ValueId) -> TapeOp,
    ) -> ValueId {
        debug_assert_eq!(shadow.len(), rows * cols);
        let value =
            Tensor2::from_vec(rows, cols, shadow.iter().map(|&v| v as f32).collect())
                .expect("shadow shape");
        let out = self.bufs.len();
        self.bufs.push(TapeBuf {
            value,
            shadow,
            grad: None,
        });
        let op = op(out);
        self.ops.push(op);
        out
    }

    fn shadow(&self, id: ValueId) -> &[f64] {
        &self.bufs[id].shadow
    }

    fn shape_of(&self, id: ValueId) -> (usize, usize) {
        (self.bufs[id].value.rows(), self.bufs[id].value.cols())
    }

    fn same_shape(&self, a: ValueId, b: ValueId, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(DvdError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(())
    }

    // ── op builders ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (n, k) = self.shape_of(a);
        let (kb, m) = self.shape_of(b);
        if k != kb {
            return Err(DvdError::Shape(format!("matmul {n}x{k} @ {kb}x{m}")));
        }
        let mut shadow = vec![0.0f64; n * m];
        {
            let (sa, sb) = (self.shadow(a), self.shadow(b));
            for i in 0..n {
                for t in 0..k {
                    let av = sa[i * k + t];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        shadow[i * m + j] += av * sb[t * m + j];
                    }
                }
            }
        }
        Ok(self.push_shadow(n, m, shadow, |out| TapeOp::Matmul { a, b, out }))
    }

    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (n, k) = self.shape_of(a);
        let (m, kb) = self.shape_of(b);
        if k != kb {
            return Err(DvdError::Shape(format!(
                "matmul_nt {n}x{k} @ ({m}x{kb})^T"
            )));
        }
        let mut shadow = vec![0.0f64; n * m];
        {
            let (sa, sb) = (self.shadow(a), self.shadow(b));
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0f64;
                    for t in 0..k {
                        acc += sa[i * k + t] * sb[j * k + t];
                    }
                    shadow[i * m + j] = acc;
                }
            }
        }
        Ok(self.push_shadow(n, m, shadow, |out| TapeOp::MatmulNT { a, b, out }))
    }

    pub fn add_row(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (rows_b, cols_b) = self.shape_of(bias);
        if rows_b != 1 || cols_b != self.shape_of(a).1 {
            return Err(DvdError::Shape(format!(
                "bias {rows_b}x{cols_b} against {:?}",
                self.shape_of(a)
            )));
        }
        let (rows, cols) = self.shape_of(a);
        let mut shadow = self.bufs[a].shadow.clone();
        for r in 0..rows {
            for c in 0..cols {
                shadow[r * cols + c] += self.bufs[bias].shadow[c];
            }
        }
        Ok(self.push_shadow(rows, cols, shadow, |out| TapeOp::AddRow { a, bias, out }))
    }

    pub fn add_col(&mut self, a: ValueId, col: ValueId) -> Result<ValueId> {
        let (rows, _) = self.shape_of(a);
        let (rc, cc) = self.shape_of(col);
        if rc != rows || cc != 1 {
            return Err(DvdError::Shape(format!(
                "column {rc}x{cc} against {:?}",
                self.shape_of(a)
            )));
        }
        let cols = self.shape_of(a).1;
        let mut shadow = self.bufs[a].shadow.clone();
        for r in 0..rows {
            let add = self.bufs[col].shadow[r];
            for x in &mut shadow[r * cols..(r + 1) * cols] {
                *x += add;
            }
        }
        Ok(self.push_shadow(rows, cols, shadow, |out| TapeOp::AddCol { a, col, out }))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let (rows, cols) = self.shape_of(a);
        let shadow = self.bufs[a].shadow.iter().map(|&x| x.max(0.0)).collect();
        self.push_shadow(rows, cols, shadow, |out| TapeOp::Relu { a, out })
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let (rows, cols) = self.shape_of(a);
        let mut shadow = self.bufs[a].shadow.clone();
        for r in 0..rows {
            let row = &mut shadow[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push_shadow(rows, cols, shadow, |out| TapeOp::SoftmaxRows { a, out })
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ra, ca) = self.shape_of(a);
        let (rb, cb) = self.shape_of(b);
        if ra != rb {
            return Err(DvdError::Shape(format!(
                "concat row mismatch: {ra} vs {rb}"
            )));
        }
        let mut shadow = vec![0.0f64; ra * (ca + cb)];
        for r in 0..ra {
            let dst = &mut shadow[r * (ca + cb)..(r + 1) * (ca + cb)];
            dst[..ca].copy_from_slice(&self.bufs[a].shadow[r * ca..(r + 1) * ca]);
            dst[ca..].copy_from_slice(&self.bufs[b].shadow[r * cb..(r + 1) * cb]);
        }
        Ok(self.push_shadow(ra, ca + cb, shadow, |out| TapeOp::ConcatCols { a, b, out }))
    }

    pub fn axpy(&mut self, a: ValueId, s: f32, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "axpy")?;
        let (rows, cols) = self.shape_of(a);
        let mut shadow = self.bufs[a].shadow.clone();
        for (x, y) in shadow.iter_mut().zip(&self.bufs[b].shadow) {
            *x += s as f64 * y;
        }
        Ok(self.push_shadow(rows, cols, shadow, |out| TapeOp::Axpy { a, b, s, out }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let (rows, cols) = self.shape_of(a);
        let mut shadow = self.bufs[a].shadow.clone();
        for (x, y) in shadow.iter_mut().zip(&self.bufs[b].shadow) {
            *x += y;
        }
        Ok(self.push_shadow(rows, cols, shadow, |out| TapeOp::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "sub")?;
        let (rows, cols) = self.shape_of(a);
        let mut shadow = self.bufs[a].shadow.clone();
        for (x, y) in shadow.iter_mut().zip(&self.bufs[b].shadow) {
            *x -= y;
        }
        Ok(self.push_shadow(rows, cols, shadow, |out| TapeOp::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let (rows, cols) = self.shape_of(a);
        let mut shadow = self.bufs[a].shadow.clone();
        for (x, y) in shadow.iter_mut().zip(&self.bufs[b].shadow) {
            *x *= y;
        }
        Ok(self.push_shadow(rows, cols, shadow, |out| TapeOp::Mul { a, b, out }))
    }

    pub fn scale(&mut self, a: ValueId, s: f32) -> ValueId {
        let (rows, cols) = self.shape_of(a);
        let shadow = self.bufs[a].shadow.iter().map(|&x| x * s as f64).collect();
        self.push_shadow(rows, cols, shadow, |out| TapeOp::Scale { a, s, out })
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let (rows, cols) = self.shape_of(a);
        let shadow = self.bufs[a].shadow.iter().map(|&x| x.exp()).collect();
        self.push_shadow(rows, cols, shadow, |out| TapeOp::Exp { a, out })
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let (rows, cols) = self.shape_of(a);
        let shadow = self.bufs[a].shadow.iter().map(|&x| x.ln()).collect();
        self.push_shadow(rows, cols, shadow, |out| TapeOp::Ln { a, out })
    }

    pub fn dot_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "dot_rows")?;
        let (rows, cols) = self.shape_of(a);
        let mut shadow = vec![0.0f64; rows];
        for r in 0..rows {
            let mut acc = 0.0f64;
            for c in 0..cols {
                acc += self.bufs[a].shadow[r * cols + c] * self.bufs[b].shadow[r * cols + c];
            }
            shadow[r] = acc;
        }
        Ok(self.push_shadow(rows, 1, shadow, |out| TapeOp::DotRows { a, b, out }))
    }

    pub fn sum_rows(&mut self, a: ValueId) -> ValueId {
        let (rows, cols) = self.shape_of(a);
        let mut shadow = vec![0.0f64; rows];
        for r in 0..rows {
            shadow[r] = self.bufs[a].shadow[r * cols..(r + 1) * cols].iter().sum();
        }
        self.push_shadow(rows, 1, shadow, |out| TapeOp::SumRows { a, out })
    }

    /// Returns the scalar node and its f64-accumulated value.
    pub fn sum_all(&mut self, a: ValueId) -> (ValueId, f64) {
        let acc: f64 = self.bufs[a].shadow.iter().sum();
        let id = self.push_shadow(1, 1, vec![acc], |out| TapeOp::SumAll { a, out });
        (id, acc)
    }

    /// Mean cross-entropy of row-wise softmax(logits) against labels.
    /// Returns the scalar node and its f64 value.
    pub fn softmax_ce(&mut self, logits: ValueId, labels: &[u32]) -> Result<(ValueId, f64)> {
        let (rows, cols) = self.shape_of(logits);
        if labels.len() != rows {
            return Err(DvdError::Shape(format!(
                "{} labels for {} logit rows",
                labels.len(),
                rows
            )));
        }
        for &l in labels {
            if l as usize >= cols {
                return Err(DvdError::Data(format!(
                    "label {l} out of range for {cols} classes"
                )));
            }
        }
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &self.bufs[logits].shadow[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for &x in row {
                sum += (x - max).exp();
            }
            let l = labels[r] as usize;
            total += -(row[l] - max - sum.ln());
        }
        let mean = total / rows as f64;
        let labels = labels.to_vec();
        let id = self.push_shadow(1, 1, vec![mean], |out| TapeOp::SoftmaxCe {
            logits,
            labels,
            out,
        });
        Ok((id, mean))
    }

    // ── network forward ────────────────────────────────────────────

    /// Register `net`'s parameters on this tape (idempotent per net).
    fn bind_net(&mut self, net: &MlpNet) -> Vec<(ValueId, ValueId)> {
        if let Some(ids) = self.bindings.get(&net.id()) {
            return ids.clone();
        }
        let ids: Vec<(ValueId, ValueId)> = net
            .layers()
            .iter()
            .map(|l| {
                let w = self.constant(l.weight.clone());
                let b = self.constant(l.bias.clone());
                (w, b)
            })
            .collect();
        self.bindings.insert(net.id(), ids.clone());
        ids
    }

    /// Record a full forward pass of `net` over the batch node `batch`.
    /// Repeated calls with the same net reuse one parameter registration,
    /// so gradients accumulate across calls.
    pub fn forward(&mut self, net: &MlpNet, batch: ValueId) -> Result<ValueId> {
        if self.shape_of(batch).1 != net.input_width() {
            return Err(DvdError::Shape(format!(
                "batch width {} does not match net input {}",
                self.shape_of(batch).1,
                net.input_width()
            )));
        }
        let params = self.bind_net(net);
        let mut x = batch;
        for (layer, (w, b)) in net.layers().iter().zip(params) {
            x = self.matmul(x, w)?;
            x = self.add_row(x, b)?;
            x = match layer.act {
                Act::Relu => self.relu(x),
                Act::Identity => x,
                Act::Softmax => self.softmax_rows(x),
            };
        }
        Ok(x)
    }

    /// Gradients for `net`'s parameters after a backward pass. Parameters
    /// that no recorded op touched get exact zeros.
    pub fn net_grads(&self, net: &MlpNet) -> Result<NetGrads> {
        if !self.ran_backward {
            return Err(DvdError::State(
                "net_grads called before a backward pass".into(),
            ));
        }
        let zero_like = |wr: usize, wc: usize, bc: usize| {
            (Tensor2::zeros(wr, wc), Tensor2::zeros(1, bc))
        };
        let layers = match self.bindings.get(&net.id()) {
            Some(ids) => ids
                .iter()
                .zip(net.layers())
                .map(|(&(w, b), layer)| {
                    let (zw, zb) = zero_like(
                        layer.weight.rows(),
                        layer.weight.cols(),
                        layer.bias.cols(),
                    );
                    (
                        self.grad(w).unwrap_or(zw),
                        self.grad(b).unwrap_or(zb),
                    )
                })
                .collect(),
            None => net
                .layers()
                .iter()
                .map(|l| zero_like(l.weight.rows(), l.weight.cols(), l.bias.cols()))
                .collect(),
        };
        Ok(NetGrads { layers })
    }

    // ── backward ───────────────────────────────────────────────────

    /// Seed `d(loss)/d(out) = upstream` and run the reverse sweep.
    pub fn backward_from(&mut self, out: ValueId, upstream: Tensor2) -> Result<()> {
        if self.ops.is_empty() {
            return Err(DvdError::State("backward on an empty tape".into()));
        }
        if (upstream.rows(), upstream.cols()) != self.shape_of(out) {
            return Err(DvdError::Shape(format!(
                "upstream {:?} does not match output {:?}",
                (upstream.rows(), upstream.cols()),
                self.shape_of(out)
            )));
        }
        self.accumulate(out, upstream.data().iter().map(|&v| v as f64).collect());
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        self.ran_backward = true;
        Ok(())
    }

    /// Backward from a 1x1 loss node with upstream 1.
    pub fn backward_scalar(&mut self, loss: ValueId) -> Result<()> {
        if self.shape_of(loss) != (1, 1) {
            return Err(DvdError::Shape(format!(
                "backward_scalar needs a 1x1 node, got {:?}",
                self.shape_of(loss)
            )));
        }
        self.backward_from(loss, Tensor2::from_vec(1, 1, vec![1.0]).unwrap())
    }

    fn accumulate(&mut self, id: ValueId, g: Vec<f64>) {
        match &mut self.bufs[id].grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn take_out_grad(&self, out: ValueId) -> Option<Vec<f64>> {
        self.bufs[out].grad.clone()
    }

    fn backward_op(&mut self, op: &TapeOp) {
        match *op {
            TapeOp::Matmul { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (n, k) = self.shape_of(a);
                    let m = self.shape_of(b).1;
                    // dA = d @ B^T
                    let mut da = vec![0.0f64; n * k];
                    {
                        let bv = &self.bufs[b].shadow;
                        for i in 0..n {
                            for j in 0..k {
                                let mut acc = 0.0f64;
                                for t in 0..m {
                                    acc += d[i * m + t] * bv[j * m + t];
                                }
                                da[i * k + j] = acc;
                            }
                        }
                    }
                    // dB = A^T @ d
                    let mut db = vec![0.0f64; k * m];
                    {
                        let av = &self.bufs[a].shadow;
                        for i in 0..n {
                            for j in 0..k {
                                let x = av[i * k + j];
                                if x == 0.0 {
                                    continue;
                                }
                                for t in 0..m {
                                    db[j * m + t] += x * d[i * m + t];
                                }
                            }
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            TapeOp::MatmulNT { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    // out = A @ B^T : dA = d @ B, dB = d^T @ A
                    let (n, k) = self.shape_of(a);
                    let m = self.shape_of(b).0;
                    let mut da = vec![0.0f64; n * k];
                    {
                        let bv = &self.bufs[b].shadow;
                        for i in 0..n {
                            for t in 0..m {
                                let dv = d[i * m + t];
                                if dv == 0.0 {
                                    continue;
                                }
                                for j in 0..k {
                                    da[i * k + j] += dv * bv[t * k + j];
                                }
                            }
                        }
                    }
                    let mut db = vec![0.0f64; m * k];
                    {
                        let av = &self.bufs[a].shadow;
                        for i in 0..n {
                            for t in 0..m {
                                let dv = d[i * m + t];
                                if dv == 0.0 {
                                    continue;
                                }
                                for j in 0..k {
                                    db[t * k + j] += dv * av[i * k + j];
                                }
                            }
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            TapeOp::AddRow { a, bias, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, cols) = self.shape_of(a);
                    let mut dbias = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dbias[c] += d[r * cols + c];
                        }
                    }
                    self.accumulate(a, d);
                    self.accumulate(bias, dbias);
                }
            }
            TapeOp::AddCol { a, col, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, cols) = self.shape_of(a);
                    let mut dcol = vec![0.0f64; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            dcol[r] += d[r * cols + c];
                        }
                    }
                    self.accumulate(a, d);
                    self.accumulate(col, dcol);
                }
            }
            TapeOp::Relu { a, out } => {
                if let Some(mut d) = self.take_out_grad(out) {
                    for (g, &o) in d.iter_mut().zip(&self.bufs[out].shadow) {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.accumulate(a, d);
                }
            }
            TapeOp::SoftmaxRows { a, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, cols) = self.shape_of(out);
                    let sv = self.bufs[out].shadow.clone();
                    let mut da = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        let mut dot = 0.0f64;
                        for c in 0..cols {
                            dot += d[r * cols + c] * sv[r * cols + c];
                        }
                        for c in 0..cols {
                            da[r * cols + c] = sv[r * cols + c] * (d[r * cols + c] - dot);
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            TapeOp::ConcatCols { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, ca) = self.shape_of(a);
                    let cb = self.shape_of(b).1;
                    let mut da = vec![0.0f64; rows * ca];
                    let mut db = vec![0.0f64; rows * cb];
                    for r in 0..rows {
                        let drow = &d[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da[r * ca..(r + 1) * ca].copy_from_slice(&drow[..ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&drow[ca..]);
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            TapeOp::Axpy { a, b, s, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let db: Vec<f64> = d.iter().map(|&v| v * s as f64).collect();
                    self.accumulate(a, d);
                    self.accumulate(b, db);
                }
            }
            TapeOp::Add { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    self.accumulate(a, d.clone());
                    self.accumulate(b, d);
                }
            }
            TapeOp::Sub { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let neg: Vec<f64> = d.iter().map(|&v| -v).collect();
                    self.accumulate(a, d);
                    self.accumulate(b, neg);
                }
            }
            TapeOp::Mul { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let da: Vec<f64> = d
                        .iter()
                        .zip(&self.bufs[b].shadow)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    let db: Vec<f64> = d
                        .iter()
                        .zip(&self.bufs[a].shadow)
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            TapeOp::Scale { a, s, out } => {
                if let Some(mut d) = self.take_out_grad(out) {
                    for g in d.iter_mut() {
                        *g *= s as f64;
                    }
                    self.accumulate(a, d);
                }
            }
            TapeOp::Exp { a, out } => {
                if let Some(mut d) = self.take_out_grad(out) {
                    for (g, &o) in d.iter_mut().zip(&self.bufs[out].shadow) {
                        *g *= o;
                    }
                    self.accumulate(a, d);
                }
            }
            TapeOp::Ln { a, out } => {
                if let Some(mut d) = self.take_out_grad(out) {
                    for (g, &x) in d.iter_mut().zip(&self.bufs[a].shadow) {
                        *g /= x;
                    }
                    self.accumulate(a, d);
                }
            }
            TapeOp::DotRows { a, b, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, cols) = self.shape_of(a);
                    let mut da = vec![0.0f64; rows * cols];
                    let mut db = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        let g = d[r];
                        for c in 0..cols {
                            da[r * cols + c] = g * self.bufs[b].shadow[r * cols + c];
                            db[r * cols + c] = g * self.bufs[a].shadow[r * cols + c];
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            TapeOp::SumRows { a, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, cols) = self.shape_of(a);
                    let mut da = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = d[r];
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            TapeOp::SumAll { a, out } => {
                if let Some(d) = self.take_out_grad(out) {
                    let (rows, cols) = self.shape_of(a);
                    self.accumulate(a, vec![d[0]; rows * cols]);
                }
            }
            TapeOp::SoftmaxCe {
                logits,
                ref labels,
                out,
            } => {
                if let Some(d) = self.take_out_grad(out) {
                    let scale = d[0] / labels.len() as f64;
                    let cols = self.shape_of(logits).1;
                    let lv = self.bufs[logits].shadow.clone();
                    let mut dl = vec![0.0f64; labels.len() * cols];
                    for (r, &l) in labels.iter().enumerate() {
                        let row = &lv[r * cols..(r + 1) * cols];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0f64;
                        for &x in row {
                            sum += (x - max).exp();
                        }
                        for c in 0..cols {
                            let p = (row[c] - max).exp() / sum;
                            let onehot = if c == l as usize { 1.0 } else { 0.0 };
                            dl[r * cols + c] = scale * (p - onehot);
                        }
                    }
                    self.accumulate(logits, dl);
                }
            }
        }
    }
}

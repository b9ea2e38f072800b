//! Reverse-mode differentiation over a per-forward-pass operation record.
//!
//! A [`TapeOf`] is created for one forward pass, records every operation as a
//! node, and replays the record backwards to fill gradient slots. Nothing is
//! retained across iterations; the next forward pass starts a fresh tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParameterStoreOf;
use crate::scalar::Scalar;
use crate::tensor::TensorOf;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C1: f64 = 0.044_715;

enum Op<F: Scalar> {
    Leaf,
    Matmul,
    Transpose,
    Add,
    /// Row-broadcast bias add: [m,n] + [n].
    AddBias,
    MulElem,
    Scale(F),
    Reshape,
    ConcatRows {
        row_splits: Vec<usize>,
    },
    SliceRows {
        start: usize,
    },
    ConcatCols {
        col_splits: Vec<usize>,
    },
    SliceCols {
        start: usize,
    },
    SoftmaxRows,
    LayerNormRows,
    Gelu,
    /// Mean over rows: [m,n] -> [1,n].
    MeanRows,
    SumAll,
    SmoothL1 {
        target: Vec<F>,
        beta: F,
    },
    CrossEntropy {
        labels: Vec<usize>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<usize>,
    value: Vec<F>,
    shape: Vec<usize>,
    requires_grad: bool,
}

pub struct TapeOf<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_nodes: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
}

/// Gradients keyed by tape node, read back through the tensors that
/// produced them.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `t`, zero-filled when the loss
    /// does not depend on it.
    pub fn of(&self, t: &TensorOf<F>) -> Result<Vec<F>> {
        let node = t
            .node
            .ok_or_else(|| Error::Graph("tensor was not recorded on this tape".into()))?;
        Ok(self
            .grads
            .get(node)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![F::zero(); t.len()]))
    }
}

impl<F: Scalar> Default for TapeOf<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> TapeOf<F> {
    pub fn new() -> Self {
        TapeOf {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    fn push(&mut self, node: Node<F>) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn leaf(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> usize {
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: data,
            shape: shape.to_vec(),
            requires_grad,
        })
    }

    /// Tracked variable; gradients w.r.t. it can be read from [`Gradients::of`].
    pub fn var(&mut self, t: &TensorOf<F>) -> TensorOf<F> {
        let id = self.leaf(t.shape(), t.data().to_vec(), true);
        TensorOf::tracked(t.shape().to_vec(), t.data().to_vec(), id, true)
    }

    /// Untracked constant.
    pub fn constant(&mut self, t: &TensorOf<F>) -> TensorOf<F> {
        let id = self.leaf(t.shape(), t.data().to_vec(), false);
        TensorOf::tracked(t.shape().to_vec(), t.data().to_vec(), id, false)
    }

    /// Fetch a named parameter as a tracked leaf. Repeated fetches of the same
    /// name within one tape share a single leaf so gradients accumulate.
    pub fn param(&mut self, store: &ParameterStoreOf<F>, name: &str) -> Result<TensorOf<F>> {
        if let Some(&id) = self.param_index.get(name) {
            let node = &self.nodes[id];
            return Ok(TensorOf::tracked(
                node.shape.clone(),
                node.value.clone(),
                id,
                true,
            ));
        }
        let p = store.get(name)?;
        let id = self.leaf(p.shape(), p.data().to_vec(), true);
        self.param_index.insert(name.to_string(), id);
        self.param_nodes.push((name.to_string(), id));
        Ok(TensorOf::tracked(
            p.shape().to_vec(),
            p.data().to_vec(),
            id,
            true,
        ))
    }

    fn ensure_recorded(&mut self, t: &TensorOf<F>) -> usize {
        match t.node {
            Some(id) => id,
            None => self.leaf(t.shape(), t.data().to_vec(), false),
        }
    }

    fn record(
        &mut self,
        op: Op<F>,
        inputs: Vec<(usize, bool)>,
        shape: Vec<usize>,
        value: Vec<F>,
    ) -> TensorOf<F> {
        let requires = inputs.iter().any(|&(_, r)| r);
        let ids = inputs.into_iter().map(|(id, _)| id).collect();
        let id = self.push(Node {
            op,
            inputs: ids,
            value: value.clone(),
            shape: shape.clone(),
            requires_grad: requires,
        });
        TensorOf::tracked(shape, value, id, requires)
    }

    // ── forward operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: &TensorOf<F>, b: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dimension("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        let ad = a.data();
        let bd = b.data();
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let ia = self.ensure_recorded(a);
        let ib = self.ensure_recorded(b);
        Ok(self.record(
            Op::Matmul,
            vec![(ia, a.requires_grad()), (ib, b.requires_grad())],
            vec![m, n],
            out,
        ))
    }

    pub fn transpose(&mut self, a: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 {
            return Err(Error::dimension("transpose", a.shape(), &[]));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data()[i * n + j];
            }
        }
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::Transpose,
            vec![(ia, a.requires_grad())],
            vec![n, m],
            out,
        ))
    }

    pub fn add(&mut self, a: &TensorOf<F>, b: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape() != b.shape() {
            return Err(Error::dimension("add", a.shape(), b.shape()));
        }
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let ia = self.ensure_recorded(a);
        let ib = self.ensure_recorded(b);
        Ok(self.record(
            Op::Add,
            vec![(ia, a.requires_grad()), (ib, b.requires_grad())],
            a.shape().to_vec(),
            out,
        ))
    }

    pub fn add_bias(&mut self, a: &TensorOf<F>, bias: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || bias.shape().len() != 1 || a.shape()[1] != bias.shape()[0] {
            return Err(Error::dimension("add_bias", a.shape(), bias.shape()));
        }
        let n = a.shape()[1];
        let out = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias.data()[i % n])
            .collect();
        let ia = self.ensure_recorded(a);
        let ib = self.ensure_recorded(bias);
        Ok(self.record(
            Op::AddBias,
            vec![(ia, a.requires_grad()), (ib, bias.requires_grad())],
            a.shape().to_vec(),
            out,
        ))
    }

    pub fn mul_elem(&mut self, a: &TensorOf<F>, b: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape() != b.shape() {
            return Err(Error::dimension("mul_elem", a.shape(), b.shape()));
        }
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let ia = self.ensure_recorded(a);
        let ib = self.ensure_recorded(b);
        Ok(self.record(
            Op::MulElem,
            vec![(ia, a.requires_grad()), (ib, b.requires_grad())],
            a.shape().to_vec(),
            out,
        ))
    }

    pub fn scale(&mut self, a: &TensorOf<F>, c: F) -> TensorOf<F> {
        let out = a.data().iter().map(|&x| x * c).collect();
        let ia = self.ensure_recorded(a);
        self.record(
            Op::Scale(c),
            vec![(ia, a.requires_grad())],
            a.shape().to_vec(),
            out,
        )
    }

    pub fn reshape(&mut self, a: &TensorOf<F>, shape: &[usize]) -> Result<TensorOf<F>> {
        if shape.iter().product::<usize>() != a.len() || shape.len() > 3 {
            return Err(Error::dimension("reshape", a.shape(), shape));
        }
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::Reshape,
            vec![(ia, a.requires_grad())],
            shape.to_vec(),
            a.data().to_vec(),
        ))
    }

    /// Stack rank-2 tensors of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[&TensorOf<F>]) -> Result<TensorOf<F>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let n = parts[0].shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        let mut row_splits = Vec::new();
        for p in parts {
            if p.shape().len() != 2 || p.shape()[1] != n {
                return Err(Error::dimension("concat_rows", parts[0].shape(), p.shape()));
            }
            rows += p.shape()[0];
            row_splits.push(p.shape()[0]);
            out.extend_from_slice(p.data());
        }
        let inputs = parts
            .iter()
            .map(|p| (self.ensure_recorded(p), p.requires_grad()))
            .collect();
        Ok(self.record(Op::ConcatRows { row_splits }, inputs, vec![rows, n], out))
    }

    pub fn slice_rows(&mut self, a: &TensorOf<F>, start: usize, len: usize) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || start + len > a.shape()[0] {
            return Err(Error::dimension("slice_rows", a.shape(), &[start, len]));
        }
        let n = a.shape()[1];
        let out = a.data()[start * n..(start + len) * n].to_vec();
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::SliceRows { start },
            vec![(ia, a.requires_grad())],
            vec![len, n],
            out,
        ))
    }

    /// Stack rank-2 tensors of equal row count horizontally.
    pub fn concat_cols(&mut self, parts: &[&TensorOf<F>]) -> Result<TensorOf<F>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let m = parts[0].shape().first().copied().unwrap_or(0);
        let mut col_splits = Vec::new();
        let mut total = 0;
        for p in parts {
            if p.shape().len() != 2 || p.shape()[0] != m {
                return Err(Error::dimension("concat_cols", parts[0].shape(), p.shape()));
            }
            col_splits.push(p.shape()[1]);
            total += p.shape()[1];
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let w = p.shape()[1];
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let inputs = parts
            .iter()
            .map(|p| (self.ensure_recorded(p), p.requires_grad()))
            .collect();
        Ok(self.record(Op::ConcatCols { col_splits }, inputs, vec![m, total], out))
    }

    pub fn slice_cols(&mut self, a: &TensorOf<F>, start: usize, len: usize) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || start + len > a.shape()[1] {
            return Err(Error::dimension("slice_cols", a.shape(), &[start, len]));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&a.data()[i * n + start..i * n + start + len]);
        }
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::SliceCols { start },
            vec![(ia, a.requires_grad())],
            vec![m, len],
            out,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || a.shape()[1] == 0 {
            return Err(Error::dimension("softmax_rows", a.shape(), &[]));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &a.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / sum;
            }
        }
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::SoftmaxRows,
            vec![(ia, a.requires_grad())],
            a.shape().to_vec(),
            out,
        ))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine
    /// rescaling); bounds token scale so alignment targets cannot drift.
    pub fn layer_norm_rows(&mut self, a: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || a.shape()[1] == 0 {
            return Err(Error::dimension("layer_norm_rows", a.shape(), &[]));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let eps = F::of_f64(LAYER_NORM_EPS);
        let inv_n = F::one() / F::from_usize(n).unwrap();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &a.data()[i * n..(i + 1) * n];
            let mean: F = row.iter().cloned().sum::<F>() * inv_n;
            let var: F = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_n;
            let inv_std = F::one() / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std;
            }
        }
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::LayerNormRows,
            vec![(ia, a.requires_grad())],
            a.shape().to_vec(),
            out,
        ))
    }

    pub fn gelu(&mut self, a: &TensorOf<F>) -> TensorOf<F> {
        let out = a.data().iter().map(|&x| gelu_value(x)).collect();
        let ia = self.ensure_recorded(a);
        self.record(
            Op::Gelu,
            vec![(ia, a.requires_grad())],
            a.shape().to_vec(),
            out,
        )
    }

    pub fn mean_rows(&mut self, a: &TensorOf<F>) -> Result<TensorOf<F>> {
        if a.shape().len() != 2 || a.shape()[0] == 0 {
            return Err(Error::dimension("mean_rows", a.shape(), &[]));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let inv = F::one() / F::from_usize(m).unwrap();
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + a.data()[i * n + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let ia = self.ensure_recorded(a);
        Ok(self.record(
            Op::MeanRows,
            vec![(ia, a.requires_grad())],
            vec![1, n],
            out,
        ))
    }

    pub fn sum_all(&mut self, a: &TensorOf<F>) -> TensorOf<F> {
        let s: F = a.data().iter().cloned().sum();
        let ia = self.ensure_recorded(a);
        self.record(Op::SumAll, vec![(ia, a.requires_grad())], vec![1], vec![s])
    }

    /// Smooth L1 (Huber) loss, mean over elements. The target is taken by
    /// value: gradient flows into `pred` only.
    pub fn smooth_l1(
        &mut self,
        pred: &TensorOf<F>,
        target: &TensorOf<F>,
        beta: F,
    ) -> Result<TensorOf<F>> {
        if pred.shape() != target.shape() {
            return Err(Error::dimension("smooth_l1", pred.shape(), target.shape()));
        }
        if beta <= F::zero() {
            return Err(Error::Contract(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        let half = F::of_f64(0.5);
        let mut acc = F::zero();
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            let d = p - t;
            let ad = d.abs();
            acc = acc
                + if ad < beta {
                    half * d * d / beta
                } else {
                    ad - half * beta
                };
        }
        let mean = acc / F::from_usize(pred.len()).unwrap();
        let ip = self.ensure_recorded(pred);
        Ok(self.record(
            Op::SmoothL1 {
                target: target.data().to_vec(),
                beta,
            },
            vec![(ip, pred.requires_grad())],
            vec![1],
            vec![mean],
        ))
    }

    /// Mean negative log softmax probability of the true class.
    pub fn cross_entropy(&mut self, logits: &TensorOf<F>, labels: &[usize]) -> Result<TensorOf<F>> {
        if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
            return Err(Error::dimension(
                "cross_entropy",
                logits.shape(),
                &[labels.len()],
            ));
        }
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Validation(format!(
                    "label {l} at index {i} out of range for {c} classes"
                )));
            }
        }
        let mut acc = F::zero();
        for i in 0..b {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            acc = acc + (lse - row[labels[i]]);
        }
        let mean = acc / F::from_usize(b).unwrap();
        let il = self.ensure_recorded(logits);
        Ok(self.record(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![(il, logits.requires_grad())],
            vec![1],
            vec![mean],
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Gradients of a scalar loss with respect to every tracked leaf.
    pub fn gradients(&self, loss: &TensorOf<F>) -> Result<Gradients<F>> {
        let root = loss
            .node
            .ok_or_else(|| Error::Graph("loss tensor was not recorded on this tape".into()))?;
        if root >= self.nodes.len() {
            return Err(Error::Graph("loss tensor belongs to another tape".into()));
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![F::one()]);
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Fill the store's gradient slots with d(loss)/d(parameter). Slots are
    /// overwritten, never accumulated across calls.
    pub fn backward(&self, loss: &TensorOf<F>, store: &mut ParameterStoreOf<F>) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (name, id) in &self.param_nodes {
            if let Some(g) = grads.grads[*id].as_ref() {
                store.set_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let mut add_to = |target: usize, contrib: Vec<F>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let a = &self.nodes[node.inputs[0]];
                let b = &self.nodes[node.inputs[1]];
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                // dA = g · Bᵀ
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = F::zero();
                        for j in 0..n {
                            s = s + g[i * n + j] * b.value[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = Aᵀ · g
                let mut db = vec![F::zero(); k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = a.value[i * k + p];
                        for j in 0..n {
                            db[p * n + j] = db[p * n + j] + av * g[i * n + j];
                        }
                    }
                }
                add_to(node.inputs[0], da);
                add_to(node.inputs[1], db);
            }
            Op::Transpose => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let mut da = vec![F::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                add_to(node.inputs[0], da);
            }
            Op::Add => {
                add_to(node.inputs[0], g.to_vec());
                add_to(node.inputs[1], g.to_vec());
            }
            Op::AddBias => {
                let n = node.shape[1];
                add_to(node.inputs[0], g.to_vec());
                let mut db = vec![F::zero(); n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] = db[i % n] + gv;
                }
                add_to(node.inputs[1], db);
            }
            Op::MulElem => {
                let a = &self.nodes[node.inputs[0]];
                let b = &self.nodes[node.inputs[1]];
                let da = g.iter().zip(&b.value).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(&a.value).map(|(&gv, &av)| gv * av).collect();
                add_to(node.inputs[0], da);
                add_to(node.inputs[1], db);
            }
            Op::Scale(c) => {
                add_to(node.inputs[0], g.iter().map(|&gv| gv * *c).collect());
            }
            Op::Reshape => {
                add_to(node.inputs[0], g.to_vec());
            }
            Op::ConcatRows { row_splits } => {
                let n = node.shape[1];
                let mut offset = 0;
                for (idx, &rows) in row_splits.iter().enumerate() {
                    let part = g[offset * n..(offset + rows) * n].to_vec();
                    add_to(node.inputs[idx], part);
                    offset += rows;
                }
            }
            Op::SliceRows { start } => {
                let src = &self.nodes[node.inputs[0]];
                let n = src.shape[1];
                let mut da = vec![F::zero(); src.value.len()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                add_to(node.inputs[0], da);
            }
            Op::ConcatCols { col_splits } => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for (idx, &w) in col_splits.iter().enumerate() {
                    let mut part = Vec::with_capacity(m * w);
                    for i in 0..m {
                        part.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    add_to(node.inputs[idx], part);
                    offset += w;
                }
            }
            Op::SliceCols { start } => {
                let src = &self.nodes[node.inputs[0]];
                let (m, n) = (src.shape[0], src.shape[1]);
                let w = node.shape[1];
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_to(node.inputs[0], da);
            }
            Op::SoftmaxRows => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        da[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_to(node.inputs[0], da);
            }
            Op::LayerNormRows => {
                let x = &self.nodes[node.inputs[0]].value;
                let (m, n) = (node.shape[0], node.shape[1]);
                let eps = F::of_f64(LAYER_NORM_EPS);
                let inv_n = F::one() / F::from_usize(n).unwrap();
                let y = &node.value;
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    let xr = &x[i * n..(i + 1) * n];
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mean: F = xr.iter().cloned().sum::<F>() * inv_n;
                    let var: F = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
                    let inv_std = F::one() / (var + eps).sqrt();
                    let g_mean: F = gr.iter().cloned().sum::<F>() * inv_n;
                    let gy_mean: F = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<F>() * inv_n;
                    for j in 0..n {
                        da[i * n + j] = inv_std * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                add_to(node.inputs[0], da);
            }
            Op::Gelu => {
                let x = &self.nodes[node.inputs[0]].value;
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| gv * gelu_derivative(xv))
                    .collect();
                add_to(node.inputs[0], da);
            }
            Op::MeanRows => {
                let src = &self.nodes[node.inputs[0]];
                let (m, n) = (src.shape[0], src.shape[1]);
                let inv = F::one() / F::from_usize(m).unwrap();
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] * inv;
                    }
                }
                add_to(node.inputs[0], da);
            }
            Op::SumAll => {
                let len = self.nodes[node.inputs[0]].value.len();
                add_to(node.inputs[0], vec![g[0]; len]);
            }
            Op::SmoothL1 { target, beta } => {
                let pred = &self.nodes[node.inputs[0]].value;
                let inv = F::one() / F::from_usize(pred.len()).unwrap();
                let da = pred
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let local = if d.abs() < *beta {
                            d / *beta
                        } else if d > F::zero() {
                            F::one()
                        } else {
                            -F::one()
                        };
                        g[0] * local * inv
                    })
                    .collect();
                add_to(node.inputs[0], da);
            }
            Op::CrossEntropy { labels } => {
                let logits = &self.nodes[node.inputs[0]].value;
                let b = labels.len();
                let c = logits.len() / b;
                let invb = F::one() / F::from_usize(b).unwrap();
                let mut da = vec![F::zero(); logits.len()];
                for i in 0..b {
                    let row = &logits[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / sum;
                        let y = if labels[i] == j { F::one() } else { F::zero() };
                        da[i * c + j] = g[0] * (p - y) * invb;
                    }
                }
                add_to(node.inputs[0], da);
            }
        }
    }
}

fn gelu_value<F: Scalar>(x: F) -> F {
    let c0 = F::of_f64(GELU_C0);
    let c1 = F::of_f64(GELU_C1);
    let half = F::of_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c0 = F::of_f64(GELU_C0);
    let c1 = F::of_f64(GELU_C1);
    let half = F::of_f64(0.5);
    let three = F::of_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (F::one() + three * c1 * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

//! Multi-head cross-attention used by the aggregated-token update, the
//! cross-modal relation step, and the refinement step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStoreOf;
use crate::scalar::Scalar;
use crate::tape::TapeOf;
use crate::tensor::TensorOf;

/// One cross-attention block: query/key/value projections plus an output
/// merge, all d x d, with `heads` heads over width d.
///
/// W_q, W_k, W_v are drawn zero-mean with scale 1/sqrt(d); W_o starts as the
/// identity so a single head reproduces the unmerged form at initialization.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    prefix: String,
    heads: usize,
    width: usize,
}

impl AttentionParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width == 0 || width % heads != 0 {
            return Err(Error::Contract(format!(
                "attention width {width} must be a positive multiple of heads {heads}"
            )));
        }
        let scale = 1.0 / (width as f64).sqrt();
        for m in ["wq", "wk", "wv"] {
            store.register(
                &format!("{prefix}.{m}"),
                TensorOf::randn(&[width, width], scale, rng),
            )?;
        }
        store.register(&format!("{prefix}.wo"), TensorOf::eye(width))?;
        Ok(AttentionParams {
            prefix: prefix.to_string(),
            heads,
            width,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// softmax(Q W_q (C W_k)ᵀ / sqrt(d/H)) C W_v per head, heads concatenated
    /// and merged by W_o. Output has the query row count and width d.
    pub fn cross_attention<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        queries: &TensorOf<F>,
        context: &TensorOf<F>,
    ) -> Result<TensorOf<F>> {
        let d = self.width;
        if queries.shape().len() != 2 || queries.shape()[1] != d {
            return Err(Error::dimension("attention queries", queries.shape(), &[0, d]));
        }
        if context.shape().len() != 2 || context.shape()[1] != d {
            return Err(Error::dimension("attention context", context.shape(), &[0, d]));
        }
        if context.shape()[0] == 0 {
            return Err(Error::Contract(format!(
                "attention {} received an empty context",
                self.prefix
            )));
        }
        let wq = tape.param(store, &format!("{}.wq", self.prefix))?;
        let wk = tape.param(store, &format!("{}.wk", self.prefix))?;
        let wv = tape.param(store, &format!("{}.wv", self.prefix))?;
        let wo = tape.param(store, &format!("{}.wo", self.prefix))?;

        let q = tape.matmul(queries, &wq)?;
        let k = tape.matmul(context, &wk)?;
        let v = tape.matmul(context, &wv)?;

        let head_dim = d / self.heads;
        let inv_sqrt = F::of_f64(1.0 / (head_dim as f64).sqrt());
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(&q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(&k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(&v, h * head_dim, head_dim)?;
            let kt = tape.transpose(&kh)?;
            let logits = tape.matmul(&qh, &kt)?;
            let logits = tape.scale(&logits, inv_sqrt);
            let weights = tape.softmax_rows(&logits)?;
            head_outputs.push(tape.matmul(&weights, &vh)?);
        }
        let refs: Vec<&TensorOf<F>> = head_outputs.iter().collect();
        let merged = tape.concat_cols(&refs)?;
        tape.matmul(&merged, &wo)
    }
}

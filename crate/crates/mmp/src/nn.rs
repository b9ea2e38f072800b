use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStoreOf;
use crate::scalar::Scalar;
use crate::tape::TapeOf;
use crate::tensor::TensorOf;

/// How a weight matrix is filled at registration time.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean normal with std 1/sqrt(fan_in).
    ScaledNormal,
    Identity,
    Zero,
}

/// Affine map x -> x·W + b, with W and b living in a [`ParameterStoreOf`]
/// under `<prefix>.w` / `<prefix>.b`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    prefix: String,
    in_dim: usize,
    out_dim: usize,
}

impl LinearLayer {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = match init {
            Init::ScaledNormal => {
                TensorOf::randn(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), rng)
            }
            Init::Identity => {
                if in_dim != out_dim {
                    return Err(Error::Contract(format!(
                        "identity init needs square weight, got {in_dim}x{out_dim}"
                    )));
                }
                TensorOf::eye(in_dim)
            }
            Init::Zero => TensorOf::zeros(&[in_dim, out_dim]),
        };
        store.register(&format!("{prefix}.w"), weight)?;
        store.register(&format!("{prefix}.b"), TensorOf::zeros(&[out_dim]))?;
        Ok(LinearLayer {
            prefix: prefix.to_string(),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        x: &TensorOf<F>,
    ) -> Result<TensorOf<F>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::dimension(
                format!("linear {}", self.prefix),
                x.shape(),
                &[self.in_dim, self.out_dim],
            ));
        }
        let w = tape.param(store, &format!("{}.w", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;
        let y = tape.matmul(x, &w)?;
        tape.add_bias(&y, &b)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Two linear layers with a smooth (GELU) nonlinearity between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    first: LinearLayer,
    second: LinearLayer,
}

impl Mlp {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParameterStoreOf<F>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = LinearLayer::init(
            store,
            &format!("{prefix}.fc1"),
            in_dim,
            hidden,
            Init::ScaledNormal,
            rng,
        )?;
        let second = LinearLayer::init(
            store,
            &format!("{prefix}.fc2"),
            hidden,
            out_dim,
            Init::ScaledNormal,
            rng,
        )?;
        Ok(Mlp { first, second })
    }

    /// Row-count preserving: [n, in] -> [n, out].
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut TapeOf<F>,
        store: &ParameterStoreOf<F>,
        x: &TensorOf<F>,
    ) -> Result<TensorOf<F>> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.gelu(&h);
        self.second.forward(tape, store, &h)
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim()
    }
}

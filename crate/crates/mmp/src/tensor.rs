use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of rank at most 3.
///
/// A tensor is a plain value; it only participates in gradient computation
/// when it was produced by (or registered with) a [`crate::tape::TapeOf`],
/// in which case `node` points into that tape's record.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorOf<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    pub(crate) node: Option<usize>,
}

impl<F: Scalar> TensorOf<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::Contract(format!(
                "rank {} exceeds the supported maximum of 3",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(TensorOf {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        TensorOf {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(v: F) -> Self {
        TensorOf {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            node: None,
        }
    }

    /// d x d identity matrix.
    pub fn eye(d: usize) -> Self {
        let mut t = Self::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = F::one();
        }
        t
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std_dev: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, std_dev).expect("std_dev must be finite and nonnegative");
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| F::of_f64(normal.sample(rng)))
            .collect();
        TensorOf {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn with_grad(mut self, requires: bool) -> Self {
        self.requires_grad = requires;
        self
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Vec<F>, node: usize, requires_grad: bool) -> Self {
        TensorOf {
            shape,
            data,
            requires_grad,
            node: Some(node),
        }
    }

    /// Value copy with no tape association; gradients never flow through it.
    pub fn detach(&self) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> F {
        self.data[row * self.cols() + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> Result<F> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }
}

//! Dense row-major f64 tensors, rank <= 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Row-major f64 tensor. All training-time numerics run in 64-bit so the
/// finite-difference checks stay meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(shape.len() <= 4, "rank > 4 unsupported");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn from_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.to_vec())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Identity matrix as a [n, n] tensor.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }
}

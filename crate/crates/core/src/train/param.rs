use crate::linalg::Matrix;

/// A tensor with its gradient and AdamW moment buffers.
///
/// Vectors (diagonals, gains, biases) are held as 1×n matrices with
/// `vector = true` and serialize as rank-1 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub trainable: bool,
    pub vector: bool,
}

impl Param {
    pub fn new(value: Matrix, trainable: bool) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            trainable,
            vector: false,
        }
    }

    pub fn vector(values: &[f64], trainable: bool) -> Self {
        Param {
            vector: true,
            ..Param::new(Matrix::row_vector(values), trainable)
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        Param::new(value, false)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// The values as a flat slice (handy for vectors).
    pub fn values(&self) -> &[f64] {
        self.value.data()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Drops optimizer state, e.g. after loading values from disk.
    pub fn reset_state(&mut self) {
        let (r, c) = self.value.shape();
        self.grad = Matrix::zeros(r, c);
        self.adam_m = Matrix::zeros(r, c);
        self.adam_v = Matrix::zeros(r, c);
    }

    pub(crate) fn zeros_like(&self) -> Matrix {
        Matrix::zeros(self.value.rows(), self.value.cols())
    }
}

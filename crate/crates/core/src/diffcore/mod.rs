//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod check;
mod tape;
mod tensor;

pub use check::{
    check_gradients, finite_difference, relative_error, GradCheckReport, FD_STEP, REL_FLOOR,
};
pub use tape::{distance_matrix, Gradients, Tape, Var, NORM_EPS};
pub use tensor::{dot, matmul, matmul_nt, matmul_tn, norm, squared_distance, Tensor};

/// Trainable value with a gradient accumulator of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds the gradient recorded for `v`, if any, into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients, v: Var) {
        if let Some(g) = grads.get(v) {
            self.grad.add_assign(g);
        }
    }
}

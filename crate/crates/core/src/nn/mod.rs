//! Layers with hand-written forward and backward passes.
//!
//! Layers keep whatever they need for the backward pass in an internal
//! cache filled by [`forward`](conv::Conv2d::forward). The cache-free
//! `infer` methods take `&self` so a built model can be shared between
//! threads for inference.

pub mod batchnorm;
pub mod conv;
pub mod ops;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;

use crate::tensor::{Scalar, Tensor};

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Read-only view of a named model entry.
pub enum Entry<'a, T> {
    Param(&'a Param<T>),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a Tensor<T>),
}

pub enum EntryMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor<T>),
}

/// Hierarchical traversal of parameters and buffers.
///
/// Names are dot separated (`encoder.layer1.0.conv1.weight`), and the visit
/// order is fixed, which the optimizer relies on.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>));

    fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, e| {
            if let Entry::Param(p) = e {
                total += p.value.len();
            }
        });
        total
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, e| {
            if let EntryMut::Param(p) = e {
                p.zero_grad();
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Whether batch normalization uses batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

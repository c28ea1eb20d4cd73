use super::Tensor;

/// A named, trainable tensor owned by a model.
///
/// `id` is the parameter's position in the model's canonical visiting order and
/// indexes gradient vectors produced by [`Tape::param_grads`](super::Tape::param_grads).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub id: usize,
    pub tensor: Tensor<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, id: usize, mut tensor: Tensor<f32>) -> Self {
        tensor.requires_grad = true;
        Self {
            name: name.into(),
            id,
            tensor,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod model;
mod optim;

pub use graph::{Gradients, Graph, Labels, Var};
pub use model::{Architecture, BoundModel, Layer, Model, Param};
pub use optim::{AdamConfig, AdamState, SgdConfig, SgdState};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Runs a backward pass from `loss` and writes fresh gradients into every
/// tracked parameter of `model`. Existing gradients are discarded first.
pub fn backward_params(g: &Graph, loss: Var, model: &mut Model, bound: &BoundModel) -> Result<()> {
    let mut grads = g.backward(loss)?;
    model.zero_grads();
    let vars = bound.extractor.iter().chain(&bound.classifier);
    for (p, &v) in model.params_mut().zip(vars) {
        if !p.tensor.requires_grad {
            continue;
        }
        let grad = grads.take(v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        p.tensor.grad = Some(grad);
    }
    Ok(())
}

/// Gradient of `loss` with respect to a tracked input leaf.
pub fn backward_input(g: &Graph, loss: Var, input: Var) -> Result<Tensor> {
    if input.index() >= g.len() {
        return Err(Error::contract("input is not a node of this graph"));
    }
    if !g.requires_grad(input) {
        return Err(Error::contract("input does not track gradients"));
    }
    if input.index() > loss.index() {
        return Err(Error::contract("input was created after the loss node"));
    }
    let mut grads = g.backward(loss)?;
    let data = grads
        .take(input)
        .ok_or_else(|| Error::contract("loss does not depend on the input"))?;
    let shape = g.shape(input).to_vec();
    Tensor::new(shape, data)
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &Labels) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

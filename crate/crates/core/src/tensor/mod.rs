//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Tensors live as nodes on a [`Tape`]; user code holds [`TensorId`] handles.
//! Forward ops append nodes in program order; [`Tape::backward`] replays the
//! recorded operations in exact reverse order with a fixed accumulation
//! order, so two runs with the same inputs produce bitwise-identical
//! gradients. Training uses `f32`; gradient-check tests instantiate the same
//! code at `f64`.

mod checkpoint;
pub mod gradcheck;
mod kernels;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamInfo};
pub use ops::Op;
pub use optim::{cosine_lr, Optimizer, OptimizerKind};

use crate::{Error, Result};

/// Element type the tape is generic over. `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) struct Node<S: Scalar> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
    pub op: Op<S>,
}

/// Reverse-mode tape: an ordered record of operations plus the tensors they
/// produced. One tape covers one forward/backward pass; it is not shared
/// across threads.
pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. `requires_grad` marks it as a differentiation
    /// target.
    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "leaf",
                shape: shape.to_vec(),
                msg: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        check_finite("leaf", &data)?;
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: S, requires_grad: bool) -> Result<TensorId> {
        self.leaf(vec![v], &[1], requires_grad)
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<S>,
    ) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer of `id` after [`Tape::backward`]; `None` when the
    /// tensor does not require grad or backward has not run.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn item(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<S> {
        let n = &mut self.nodes[id.0];
        if n.grad.is_none() {
            n.grad = Some(vec![S::zero(); n.data.len()]);
        }
        n.grad.as_mut().unwrap()
    }

    /// Seed `d(loss)/d(loss) = 1` and replay the tape in reverse recording
    /// order, accumulating gradients into every `requires_grad` node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: node.shape.clone(),
                msg: "loss must be a scalar".into(),
            });
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        *self.grad_buf(loss) = vec![S::one()];

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            ops::backward_step(self, i)?;
        }

        for n in &self.nodes {
            if let Some(g) = &n.grad {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// A named parameter buffer that outlives any single tape.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub data: Vec<S>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, data: Vec<S>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Param {
            name: name.into(),
            data,
            shape,
        }
    }

    /// Copy the parameter onto a tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> Result<TensorId> {
        tape.leaf(self.data.clone(), &self.shape, requires_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch() {
        let mut tape: Tape<f32> = Tape::new();
        assert!(tape.leaf(vec![1.0, 2.0], &[3], false).is_err());
    }

    #[test]
    fn backward_square_sum() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_detached_is_error() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let s = tape.sum(x).unwrap();
        match tape.backward(s) {
            Err(Error::Detached) => {}
            other => panic!("expected detached error, got {other:?}"),
        }
    }

    #[test]
    fn leaf_rejects_nan() {
        let mut tape: Tape<f32> = Tape::new();
        assert!(tape.leaf(vec![f32::NAN], &[1], false).is_err());
    }
}

//! Reverse-mode tape.
//!
//! Every differentiable value lives on a [`Tape`] as a node holding its data,
//! its parents, and a backward closure. A [`Tensor`] is a cheap handle into
//! the tape. One tape per training step; the tape is dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use crate::TensorError;

/// Backward closure: given the gradient flowing into this node, return one
/// gradient buffer per parent (aligned with the recorded parent list).
/// `None` for parents that do not require a gradient.
pub type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub data: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub parents: Vec<usize>,
    pub backward: Option<BackFn>,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    /// Populated by `backward`, indexed by node id.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Recording tape for one forward/backward pass. Confined to a single thread.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let shape = node.shape.clone();
        inner.nodes.push(node);
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape"
        );
        self.push(Node {
            data: Rc::new(data),
            shape,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A leaf value; gradients accumulate here when `requires_grad`.
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape"
        );
        self.push(Node {
            data: Rc::new(data),
            shape,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Record an op with an explicit backward closure. The closure must return
    /// one `Option<Vec<f64>>` per parent, in order. Gradients are only
    /// accumulated into parents that require them, so the closure may return
    /// `None` for the rest.
    pub fn op(&self, parents: &[&Tensor], data: Vec<f64>, shape: Vec<usize>, back: BackFn) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape"
        );
        let requires = parents.iter().any(|p| p.requires_grad());
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        for p in parents {
            debug_assert!(Rc::ptr_eq(&p.tape.inner, &self.inner), "tensor from another tape");
        }
        self.push(Node {
            data: Rc::new(data),
            shape,
            requires_grad: requires,
            parents: parent_ids,
            backward: if requires { Some(back) } else { None },
        })
    }

    /// Run reverse-mode accumulation from a scalar loss. Gradients of all
    /// nodes (leaves included) are left on the tape for harvesting.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape.clone()));
        }
        let inner = &mut *self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads.clear();
        inner.grads.resize(n, None);
        inner.grads[loss.id] = Some(vec![1.0]);
        let TapeInner { nodes, grads } = inner;
        for id in (0..n).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let back = match &node.backward {
                Some(b) => b,
                None => continue,
            };
            let g = grads[id].as_ref().unwrap();
            let contributions = back(g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contributions) {
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                if !nodes[*pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.len(), nodes[*pid].data.len());
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient left on the tape for `t` by the last `backward` call.
    pub fn grad_of(&self, t: &Tensor) -> Option<Vec<f64>> {
        self.inner.borrow().grads.get(t.id).cloned().flatten()
    }

    /// Gradient by node id (see [`Tensor::node_id`]).
    pub fn grad_by_id(&self, id: usize) -> Option<Vec<f64>> {
        self.inner.borrow().grads.get(id).cloned().flatten()
    }

    /// Whether two handles refer to the same tape.
    pub fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Rebuild a handle for an existing node.
    pub fn tensor_by_id(&self, id: usize) -> Tensor {
        let shape = self.inner.borrow().nodes[id].shape.clone();
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }
}

/// Handle to a value on a tape. Cloning is cheap; data is shared.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Position of this value on its tape.
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a 2-D tensor (1-D tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Shared handle to the underlying buffer.
    pub fn data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().as_ref().clone()
    }

    /// Same values as a fresh constant: gradients stop here. The buffer is
    /// shared, not copied.
    pub fn detach(&self) -> Tensor {
        let (data, shape) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (Rc::clone(&node.data), node.shape.clone())
        };
        self.tape.push(Node {
            data,
            shape,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar() on non-scalar tensor");
        self.data()[0]
    }

    /// Gradient from the last backward pass, if any reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad_of(self)
    }

    /// Error if the value contains NaN or Inf.
    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(context.to_string()));
        }
        Ok(())
    }
}

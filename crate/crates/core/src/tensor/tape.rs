use std::cell::RefCell;
use std::sync::Arc;

use super::{ParamGrads, ParamId, ParamStore, Tensor, TensorError};

/// Receives the gradient of the node's output and returns one optional
/// gradient per parent, in parent order.
pub(crate) type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

/// Kind of a recorded node; used for diagnostics and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Concat,
    ReduceMax,
    ReduceMean,
    ReduceSum,
    Gather,
    Reshape,
    Square,
    Sqrt,
    Huber,
    BatchNorm,
    Custom(&'static str),
}

struct Node {
    kind: OpKind,
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of a forward computation.
///
/// Parents always precede their children, so a reverse sweep over the node
/// list is a valid topological order. A tape is single-threaded; run
/// independent samples on independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value. Gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(OpKind::Leaf, Arc::new(value), vec![], None, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a trainable parameter; its gradient is reported under `id`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let value = store.shared(id);
        let trainable = store.is_trainable(id);
        self.push(OpKind::Param, value, vec![], None, trainable, Some(id))
    }

    pub(crate) fn push(
        &self,
        kind: OpKind,
        value: Arc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        nodes.push(Node {
            kind,
            value,
            parents,
            backward,
            requires_grad,
            param,
        });
        Var { tape: self, id }
    }

    /// Appends an op node. The backward closure is kept only when some
    /// parent requires a gradient.
    pub(crate) fn record(
        &self,
        kind: OpKind,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(kind, Arc::new(value), ids, backward, requires_grad, None)
    }

    /// Records a caller-defined differentiable op.
    ///
    /// `backward` maps the output gradient to one optional gradient per
    /// input, each shaped like that input.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        self.record(OpKind::Custom(name), value, inputs, backward)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recorded backward
    /// closures, so a tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            let kind = node.kind;
            if let Some(backward) = node.backward.take() {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                let parents = node.parents.clone();
                for (pid, pg) in parents.into_iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if matches!(kind, OpKind::Leaf | OpKind::Param) {
                grads[id] = Some(grad);
            }
        }
        let params = nodes[..=loss.id]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("kind", &self.kind())
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn kind(&self) -> OpKind {
        self.tape.nodes.borrow()[self.id].kind
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape
            .push(OpKind::Leaf, self.value(), vec![], None, false, None)
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `var`, if it was reached.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradients for every parameter recorded on the tape, summed over
    /// repeated uses of the same parameter.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store.len());
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(pid, g);
            }
        }
        out
    }
}

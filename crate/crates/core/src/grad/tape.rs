use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{GradError, Tensor};

pub(crate) type Pullback = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    tracked: bool,
    pullback: Option<Pullback>,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and `backward` walks it once in reverse. A tape is
/// single-threaded; run independent samples on independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    branches: std::cell::Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fingerprint of the branch every piecewise op on this tape took (relu
    /// and abs signs, the normalisation floor, the BCE clamp). Evaluations
    /// with equal fingerprints lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    pub(crate) fn note_branches(&self, bits: impl Iterator<Item = bool>) {
        let mut h = self.branches.get();
        for b in bits {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(1 + b as u64);
        }
        self.branches.set(h);
    }

    fn push(&self, value: Rc<Tensor>, tracked: bool, pullback: Option<Pullback>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            tracked,
            pullback,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op. The pullback is only built, and the
    /// output only tracked, when at least one input is tracked.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        pullback: impl FnOnce() -> Pullback,
    ) -> Var<'t> {
        let tracked = inputs.iter().any(|v| v.is_tracked());
        let pullback = tracked.then(pullback);
        self.push(Rc::new(value), tracked, pullback)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, GradError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(GradError::NonScalarLoss { shape });
        }
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            tracked: nodes.iter().map(|n| n.tracked).collect(),
        };
        if !nodes[loss.id].tracked {
            return Ok(Gradients { grads: sink.grads });
        }
        sink.grads[loss.id] = Some(Tensor::ones(&shape));
        for id in (0..=loss.id).rev() {
            let Some(pullback) = nodes[id].pullback.as_ref() else {
                continue;
            };
            // Intermediate gradients are consumed; only leaves keep theirs.
            if let Some(g) = sink.grads[id].take() {
                pullback(&g, &mut sink);
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), false, None)
    }
}

/// Accumulator handed to pullbacks during the reverse pass.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
    tracked: Vec<bool>,
}

impl GradSink {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.tracked[id]
    }

    pub(crate) fn add(&mut self, id: usize, g: Tensor) {
        if !self.tracked[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` for constants and for leaves the
    /// loss does not depend on.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

//! Minimal reverse-mode automatic differentiation on dense `ndarray` tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; each node owns
//! its output value and (when gradients are enabled) a closure that maps the
//! upstream gradient to per-parent contributions. Values are kept in standard
//! (row-major, contiguous) layout throughout, which keeps reshapes cheap and
//! lets matrix products run on plain slices.
//!
//! Gradients are only propagated into nodes whose `needs_grad` flag is set, so
//! subgraphs that depend exclusively on frozen parameters or constants cost
//! nothing at backward time.

mod ops;

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Tape<T>, Var, &ArrayD<T>, &mut dyn FnMut(usize, ArrayD<T>))>;

struct Node<T: Scalar> {
    value: ArrayD<T>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

/// Records a single forward pass and replays it backwards.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward closures are never stored.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Value of a node. Always standard layout.
    pub fn val(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a leaf holding `value`. Gradients flow into it iff `needs_grad`
    /// and the tape has gradients enabled.
    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant (never receives gradients).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    /// Push an interior node. `make_back` is only invoked when some parent
    /// requires gradients, so op implementations can capture context freely.
    pub(crate) fn push_with(
        &mut self,
        value: ArrayD<T>,
        parents: &[Var],
        make_back: impl FnOnce() -> BackFn<T>,
    ) -> Var {
        debug_assert!(value.is_standard_layout());
        let needs = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            backward: if needs { Some(make_back()) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass seeded with ones at `root`. Returns per-node gradients;
    /// interior gradients are dropped once consumed, leaf gradients survive.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let mut by_node: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue; // leaf or constant: leave any accumulated gradient in place
            }
            let Some(g) = by_node[i].take() else {
                continue;
            };
            let back = self.nodes[i].backward.as_ref().unwrap();
            let mut sink = |p: usize, contrib: ArrayD<T>| {
                if !self.nodes[p].needs_grad {
                    return;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch for node {p}"
                );
                match &mut by_node[p] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            back(self, Var(i), &g, &mut sink);
        }
        Grads { by_node }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

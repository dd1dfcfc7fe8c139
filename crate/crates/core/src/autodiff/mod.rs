//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! recorded node keeps its value and, when any input requires a gradient, a
//! closure that maps the node's output gradient to gradients of its inputs.
//! [`Graph::backward`] walks the tape in reverse creation order, so the tape
//! is already a topological order.
//!
//! Nodes that do not depend on any gradient-requiring leaf carry no closure and
//! cost nothing on the backward pass. Frozen parameters are leaves that do not
//! require gradients.
//!
//! ```
//! use xmd_core::autodiff::Graph;
//! use xmd_core::tensor::Tensor;
//!
//! let g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
//! let y = g.sum(g.square(x));
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(&g, x).data(), &[2.0, 4.0]);
//! ```

mod image;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::optim::Parameter;
use crate::tensor::{Real, Tensor};

pub use image::conv2d_output_size;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> GradSink<T> {
    /// Whether `v` needs a gradient at all.
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulates into the gradient buffer of `v` in place.
    pub fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.requires[v.0] {
            return;
        }
        let shape = &self.shapes[v.0];
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }

    /// Adds a full gradient tensor into `v`.
    pub fn add(&mut self, v: Var, grad: Tensor<T>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

/// Recording tape. Single-threaded; build one per forward pass.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<Vec<(String, Var)>>,
    overrides: RefCell<HashMap<String, Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            overrides: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Frozen parameters behave like constants.
    pub fn param(&self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.overrides.borrow().get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value_rc(), p.trainable);
        if p.trainable {
            self.bindings.borrow_mut().push((p.name.clone(), v));
        }
        v
    }

    /// Routes every later `param` call for `name` to `var`. Used by gradient
    /// checks to differentiate with respect to a parameter's value.
    pub fn override_param(&self, name: &str, var: Var) {
        self.overrides.borrow_mut().insert(name.to_string(), var);
    }

    /// Parameter bindings recorded so far, in binding order.
    pub fn bindings(&self) -> Vec<(String, Var)> {
        self.bindings.borrow().clone()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a derived node. The closure receives the output gradient.
    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(nodes.len() - 1)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_len = nodes[output.0].value.len();
        ensure!(
            out_len == 1,
            Contract,
            "backward needs a scalar output, got {} values",
            out_len
        );
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        };
        if nodes[output.0].requires_grad {
            sink.grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape(), T::one()));
        }
        for idx in (0..=output.0).rev() {
            let Some(backward) = &nodes[idx].backward else {
                continue;
            };
            let Some(grad) = sink.grads[idx].take() else {
                continue;
            };
            // Interior gradients are dropped once propagated.
            backward(&grad, &mut sink);
        }
        Ok(Gradients { grads: sink.grads })
    }
}

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::ops::Op;
use crate::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Returns true when newly created nodes record their inputs.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous recording state on drop.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

fn set_grad_enabled(enabled: bool) -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    NoGradGuard { prev }
}

pub(crate) struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
    inputs: Vec<Var>,
}

/// A node in the computation graph. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
            inputs: Vec::new(),
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
            inputs: Vec::new(),
        }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let record = grad_enabled() && inputs.iter().any(|v| v.0.requires_grad);
        if record {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad: true,
                op: Some(op),
                inputs,
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Copy of the value cut loose from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub(crate) fn inputs(&self) -> &[Var] {
        &self.0.inputs
    }
}

/// Gradients of `output` (summed if not scalar) with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are themselves differentiable,
/// which is how gradient-matching objectives get their second-order terms.
/// Inputs that `output` does not depend on get a zero gradient.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    let order = topo_order(output);
    let _guard = set_grad_enabled(create_graph && grad_enabled());

    let mut cotangents: HashMap<u64, Var> = HashMap::new();
    cotangents.insert(
        output.id(),
        Var::constant(ArrayD::ones(IxDyn(output.shape()))),
    );

    for node in order.iter().rev() {
        let Some(gy) = cotangents.get(&node.id()).cloned() else {
            continue;
        };
        let Some(op) = node.op() else { continue };
        let grads = op.backward(node, &gy);
        for (input, g) in node.inputs().iter().zip(grads) {
            if !input.requires_grad() {
                continue;
            }
            let Some(g) = g else { continue };
            debug_assert_eq!(g.shape(), input.shape(), "gradient shape mismatch in {:?}", op);
            let acc = match cotangents.remove(&input.id()) {
                Some(prev) => &prev + &g,
                None => g,
            };
            cotangents.insert(input.id(), acc);
        }
    }

    inputs
        .iter()
        .map(|v| {
            cotangents
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(ArrayD::zeros(IxDyn(v.shape()))))
        })
        .collect()
}

/// Post-order over nodes that participate in differentiation.
fn topo_order(output: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    if !output.requires_grad() {
        return order;
    }
    // (node, expanded)
    let mut stack = vec![(output.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for input in node.inputs() {
            if input.requires_grad() && !visited.contains(&input.id()) {
                stack.push((input.clone(), false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn square_has_derivative_two_x() {
        let x = Var::param(arr1(&[1.5, -2.0]).into_dyn());
        let g = grad(&x.square().sum(), &[&x], false).remove(0);
        assert_eq!(g.value(), &arr1(&[3.0, -4.0]).into_dyn());
    }

    #[test]
    fn no_grad_suppresses_recording_and_restores() {
        let x = Var::param(arr1(&[1.0]).into_dyn());
        {
            let _g = no_grad();
            assert!(!grad_enabled());
            assert!(!x.square().requires_grad());
        }
        assert!(grad_enabled());
        assert!(x.square().requires_grad());
    }

    #[test]
    fn detach_and_constants_block_gradients() {
        let x = Var::param(arr1(&[2.0]).into_dyn());
        let y = x.detach().mul(&x);
        let g = grad(&y.sum(), &[&x], false).remove(0);
        assert_eq!(g.item(), 2.0);
        assert!(!Var::scalar(1.0).requires_grad());
    }
}

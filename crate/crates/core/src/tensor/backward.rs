use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradient buffers for every tensor reached during one backward pass.
pub(crate) struct GradMap<T: Scalar> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    /// The accumulation buffer for `t`, or `None` when `t` is constant.
    pub(crate) fn slot(&mut self, t: &Tensor<T>) -> Option<&mut [T]> {
        if !t.requires_grad() {
            return None;
        }
        let n = t.numel();
        Some(
            self.grads
                .entry(t.id())
                .or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }
}

/// Post-order over the gradient-requiring part of the record rooted at `root`.
fn topological_order<T: Scalar>(root: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        if node.0.consumed.get() {
            return Err(Error::contract(
                "computation record was already consumed by an earlier backward",
            ));
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.0.op.borrow().as_ref() {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    Ok(order)
}

impl<T: Scalar> Tensor<T> {
    /// Accumulates `∂self/∂leaf` into every gradient-requiring leaf and
    /// consumes the computation record. `self` must hold a single value.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract(
                "backward on a tensor that is detached from every learnable leaf",
            ));
        }
        let order = topological_order(self)?;
        let mut grads = GradMap {
            grads: HashMap::with_capacity(order.len()),
        };
        grads.grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.grads.remove(&node.id()) else {
                continue;
            };
            let op = node.0.op.borrow_mut().take();
            match op {
                Some(op) => {
                    node.0.consumed.set(true);
                    op.backward(node, &g, &mut grads);
                }
                None => node.add_to_grad(&g),
            }
        }
        Ok(())
    }
}

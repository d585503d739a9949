//! Tensor values, the computation graph, and the reverse-mode driver.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient function of one graph node.
///
/// Called with the node itself and the upstream gradient; returns one
/// gradient tensor per parent (`None` when a parent needs no gradient).
/// Implementations must build their result out of engine ops so that the
/// returned gradients are differentiable in turn.
pub type GradFn = Box<dyn Fn(&Tensor, &Tensor) -> Vec<Option<Tensor>>>;

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: RefCell<ArrayD<f64>>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) grad_fn: Option<GradFn>,
    pub(crate) requires_grad: bool,
}

/// A node in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl Tensor {
    fn new(value: ArrayD<f64>, parents: Vec<Tensor>, grad_fn: Option<GradFn>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            parents,
            grad_fn,
            requires_grad,
        }))
    }

    /// Leaf tensor that participates in differentiation (a parameter).
    pub fn var(value: ArrayD<f64>) -> Self {
        Tensor::new(value, Vec::new(), None, true)
    }

    /// Leaf tensor treated as a constant.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor::new(value, Vec::new(), None, false)
    }

    /// Interior node produced by an operation.
    pub(crate) fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, grad_fn: GradFn) -> Self {
        let requires = parents.iter().any(|p| p.requires_grad());
        Tensor::new(value, parents, Some(grad_fn), requires)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "data length {} does not match shape {:?}", data.len(), shape);
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch"))
    }

    /// Standard-normal samples scaled by `std`, drawn from the caller's RNG.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.borrow().ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the underlying array.
    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.0.value.borrow()
    }

    /// Copy the contents out as a flat vector in row-major order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().iter().copied().collect()
    }

    /// Extract the value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Overwrite the value of a leaf tensor. Panics on interior nodes:
    /// mutating those would silently invalidate recorded graphs.
    pub fn set_value(&self, value: ArrayD<f64>) {
        assert!(self.0.grad_fn.is_none(), "set_value on a non-leaf tensor");
        assert_eq!(
            self.0.value.borrow().shape(),
            value.shape(),
            "set_value shape mismatch"
        );
        *self.0.value.borrow_mut() = value;
    }

    /// Apply `f` elementwise to a leaf tensor's value in place.
    pub fn map_value_inplace(&self, f: impl Fn(f64) -> f64) {
        assert!(self.0.grad_fn.is_none(), "map_value_inplace on a non-leaf tensor");
        self.0.value.borrow_mut().mapv_inplace(f);
    }

    /// A constant leaf holding a copy of this tensor's current value.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.borrow().clone())
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(&self.shape())
    }

    pub fn ones_like(&self) -> Tensor {
        Tensor::ones(&self.shape())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.shape())
    }
}

/// Topological order of the subgraph below `root` that requires gradients.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // Iterative DFS; (node, child_index) emulates the recursion stack.
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, idx)) = stack.pop() {
        let parents = &node.0.parents;
        if idx < parents.len() {
            let next = parents[idx].clone();
            stack.push((node, idx + 1));
            if next.requires_grad() && !visited.contains(&next.id()) {
                visited.insert(next.id());
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Reverse-mode gradients of `output` with respect to each tensor in `wrt`.
///
/// The traversal is seeded with ones, so for a scalar output this is the
/// ordinary gradient; for non-scalar outputs it is the vector-Jacobian
/// product against an all-ones cotangent. Returned tensors are graph nodes,
/// so they can be differentiated again (used by the gradient penalty).
pub fn grad(output: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
    grad_accumulate(output, wrt, None)
}

/// Like [`grad`] but with an explicit seed cotangent (must match the output
/// shape) when `seed` is `Some`.
pub fn grad_accumulate(output: &Tensor, wrt: &[&Tensor], seed: Option<Tensor>) -> Vec<Tensor> {
    let order = topo_order(output);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    let seed = seed.unwrap_or_else(|| output.ones_like());
    assert_eq!(seed.shape(), output.shape(), "seed cotangent shape mismatch");
    grads.insert(output.id(), seed);

    for node in order.iter().rev() {
        let g = match grads.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        if let Some(grad_fn) = &node.0.grad_fn {
            let parent_grads = grad_fn(node, &g);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(
                        pg.shape(),
                        parent.shape(),
                        "gradient shape mismatch for parent {:?}",
                        parent
                    );
                    match grads.remove(&parent.id()) {
                        Some(acc) => {
                            grads.insert(parent.id(), acc.add(&pg));
                        }
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
    }

    wrt.iter()
        .map(|t| grads.get(&t.id()).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.shape(), vec![2, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn grad_of_simple_product() {
        let x = Tensor::var(ArrayD::from_elem(IxDyn(&[]), 3.0));
        let y = Tensor::var(ArrayD::from_elem(IxDyn(&[]), 4.0));
        let z = x.mul(&y).add(&x); // z = xy + x
        let grads = grad(&z, &[&x, &y]);
        assert_eq!(grads[0].item(), 5.0); // dz/dx = y + 1
        assert_eq!(grads[1].item(), 3.0); // dz/dy = x
    }

    #[test]
    fn second_order_gradient() {
        // f(x) = x^3, f' = 3x^2, f'' = 6x
        let x = Tensor::var(ArrayD::from_elem(IxDyn(&[]), 2.0));
        let f = x.mul(&x).mul(&x);
        let g1 = grad(&f, &[&x]).remove(0);
        assert_eq!(g1.item(), 12.0);
        let g2 = grad(&g1, &[&x]).remove(0);
        assert_eq!(g2.item(), 12.0);
    }

    #[test]
    fn grad_defaults_to_zero_for_unreached() {
        let x = Tensor::var(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let y = Tensor::var(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let z = x.mul_scalar(2.0);
        let grads = grad(&z, &[&x, &y]);
        assert_eq!(grads[0].item(), 2.0);
        assert_eq!(grads[1].item(), 0.0);
    }
}

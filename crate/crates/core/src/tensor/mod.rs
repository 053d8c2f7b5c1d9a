//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a backward function pointing at
//! their parents; [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into the leaves.
//!
//! Shapes are explicit: elementwise binary ops require identical shapes and
//! the only broadcast is scalar-by-tensor.

mod conv;
mod element;
mod ops;
mod sample;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

pub use element::Element;
pub use sample::pixel_grid;

use crate::error::{axis_name, Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Vector-Jacobian product of one recorded op: given the output gradient,
/// the parents and the op's output data, return one optional gradient per
/// parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[Tensor<T>], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Element> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    /// True for nodes created by a differentiable op (as opposed to leaves).
    interior: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Mutex<Option<GradFn<T>>>,
}

/// Dense N-dimensional array with optional gradient tracking.
///
/// Cloning is cheap (reference count bump); clones share data and gradient.
pub struct Tensor<T: Element = f64>(Arc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = lock(&self.0.grad_fn).as_ref().map(|g| g.name);
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

fn lock<X>(m: &Mutex<X>) -> MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl<T: Element> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            interior: false,
            grad: Mutex::new(None),
            grad_fn: Mutex::new(None),
        }))
    }

    /// Build a tensor from a shape and row-major data.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", "numel", numel, data.len()));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// A shape `[1]` tensor.
    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), (0..numel).map(&mut f).collect(), false)
    }

    /// Return a leaf tensor with the same data and the given gradient flag.
    /// A leaf that already has the flag is returned unchanged.
    pub fn requires_grad_(self, requires_grad: bool) -> Self {
        if self.is_leaf() && self.requires_grad() == requires_grad {
            return self;
        }
        match Arc::try_unwrap(self.0) {
            Ok(node) => Self::leaf(node.shape, node.data, requires_grad),
            Err(shared) => Self::leaf(shared.shape.clone(), shared.data.clone(), requires_grad),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Record the output of a differentiable op. The grad function is only
    /// kept when at least one parent requires gradients.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward,
        });
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            interior: requires_grad,
            grad: Mutex::new(None),
            grad_fn: Mutex::new(grad_fn),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        !self.0.interior
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", "numel", 1, self.numel()));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient, if a backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        lock(&self.0.grad).clone()
    }

    pub fn zero_grad(&self) {
        *lock(&self.0.grad) = None;
    }

    /// Dimensions of a rank-4 tensor as (batch, channel, height, width).
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(op, "rank", 4, self.rank())),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        check_shapes(self.shape(), other.shape(), op)
    }

    /// Run reverse-mode differentiation from this scalar, accumulating
    /// gradients into every reachable leaf that requires them. The graph is
    /// released afterwards; a second call on the same graph is an error.
    pub fn backward(&self) -> Result<()> {
        self.run_backward(false)
    }

    /// Like [`Tensor::backward`] but keeps the graph for further passes.
    pub fn backward_retain_graph(&self) -> Result<()> {
        self.run_backward(true)
    }

    fn run_backward(&self, retain: bool) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape("backward", "numel", 1, self.numel()));
        }
        if !self.requires_grad() {
            return Err(Error::Argument(
                "backward: loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let order = self.topological_order()?;

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if !node.0.interior {
                let mut slot = lock(&node.0.grad);
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let mut guard = lock(&node.0.grad_fn);
            let grad_fn = guard.as_ref().ok_or_else(released_error)?;
            let parent_grads = (grad_fn.backward)(&g, &grad_fn.parents, &node.0.data);
            debug_assert_eq!(parent_grads.len(), grad_fn.parents.len());
            for (parent, pg) in grad_fn.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "{} grad length", grad_fn.name);
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
            if !retain {
                guard.take();
            }
        }
        Ok(())
    }

    /// Nodes requiring grad reachable from `self`, parents before children.
    fn topological_order(&self) -> Result<Vec<Tensor<T>>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            let parents: Vec<Tensor<T>> = if node.0.interior {
                let guard = lock(&node.0.grad_fn);
                let grad_fn = guard.as_ref().ok_or_else(released_error)?;
                grad_fn
                    .parents
                    .iter()
                    .filter(|p| p.requires_grad())
                    .cloned()
                    .collect()
            } else {
                Vec::new()
            };
            stack.push((node, true));
            for p in parents {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        Ok(order)
    }
}

fn released_error() -> Error {
    Error::State(
        "backward: graph already released by a previous backward pass; use backward_retain_graph"
            .into(),
    )
}

pub(crate) fn check_shapes(a: &[usize], b: &[usize], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, "rank", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::shape(op, axis_name(a.len(), i), *x, *y));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f64>::new(vec![1.0; 5], &[2, 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let x = Tensor::<f64>::scalar(3.0).requires_grad_(true);
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let x = Tensor::<f64>::scalar(0.0).requires_grad_(true);
        x.tanh().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_shape_error() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad_(true);
        let err = x.square().backward().unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn second_backward_without_retention_is_a_state_error() {
        let x = Tensor::<f64>::scalar(2.0).requires_grad_(true);
        let y = x.square().exp().sum();
        y.backward().unwrap();
        assert!(matches!(y.backward().unwrap_err(), Error::State(_)));
    }

    #[test]
    fn retained_graph_accumulates_twice() {
        let x = Tensor::<f64>::scalar(2.0).requires_grad_(true);
        let y = x.square().sum();
        y.backward_retain_graph().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn unreachable_tensors_are_untouched() {
        let x = Tensor::<f64>::scalar(2.0).requires_grad_(true);
        let unused = Tensor::<f64>::scalar(5.0).requires_grad_(true);
        x.square().sum().backward().unwrap();
        assert!(unused.grad().is_none());
    }

    #[test]
    fn loss_without_grad_inputs_is_rejected() {
        let x = Tensor::<f64>::scalar(2.0);
        assert!(matches!(
            x.square().sum().backward().unwrap_err(),
            Error::Argument(_)
        ));
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // f(x) = x*x + exp(x) uses x three times.
        let x = Tensor::<f64>::scalar(0.5).requires_grad_(true);
        let y = x.mul(&x).unwrap().add(&x.exp()).unwrap().sum();
        y.backward().unwrap();
        let g = x.grad().unwrap()[0];
        assert!((g - (1.0 + 0.5f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn detach_stops_gradient() {
        let x = Tensor::<f64>::scalar(1.5).requires_grad_(true);
        let y = x.mul(&x.detach()).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.5]);
    }

    #[test]
    fn tensors_cross_threads() {
        let x = Tensor::<f32>::ones(&[4]).requires_grad_(true);
        let handle = std::thread::spawn(move || {
            x.mul_scalar(2.0).sum().backward().unwrap();
            x.grad().unwrap()
        });
        assert_eq!(handle.join().unwrap(), vec![2.0; 4]);
    }
}

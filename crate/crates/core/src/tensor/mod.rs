//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) onto a node of a dynamically built
//! computation graph. Every operation that has at least one input requiring a
//! gradient records a backward closure; [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into each node's grad
//! buffer.
//!
//! Gradients accumulate across repeated `backward` calls. Call
//! [`Tensor::zero_grad`] (or let the optimizer do it) between steps.
//!
//! Parameter data is mutable only through [`Tensor::update_data`], which the
//! optimizer uses between steps while no graph referencing the parameter is
//! being evaluated.

mod gumbel;
mod ops;
mod rng;

pub use gumbel::{gumbel_noise, gumbel_softmax_st, gumbel_softmax_st_with_noise};
pub use rng::RngState;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _reset = Reset(prev);
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Dense row-major `f64` tensor with an optional gradient record.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Creates a constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Creates a leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![value], false, None)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Format("ragged rows".into()));
        }
        Self::new(&[m, n], rows.concat())
    }

    /// Result of an operation: records `backward` if any parent needs a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        let needs = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if needs {
            let grad_fn = GradFn {
                parents,
                backward: Box::new(backward),
            };
            Self::build(shape, data, true, Some(grad_fn))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Dimension {
                op: "dims2",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Overwrites the values of a leaf tensor in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut d);
    }

    /// Same values, no gradient link.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Identity of the underlying graph node.
    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Back-propagates from a single-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Err(Error::Usage("loss does not depend on any parameter".into()));
        }

        // Iterative post-order DFS over nodes that carry gradients.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.0.id, ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.0.requires_grad && !visited.contains_key(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.get(&t.0.id) else {
                continue;
            };
            let Some(gf) = &t.0.grad_fn else { continue };
            let parent_grads = (gf.backward)(g);
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match grads.get_mut(&p.0.id) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.0.id, pg);
                    }
                }
            }
        }

        for t in &order {
            if let Some(g) = grads.remove(&t.0.id) {
                let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_is_analytic() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn intermediates_receive_grads() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(3.0);
        y.sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(x.scale(2.0).requires_grad());
    }

    #[test]
    fn shape_product_checked() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }
}

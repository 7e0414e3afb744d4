//! Define-by-run reverse-mode tape. Nodes are appended in topological
//! order during the forward pass; `backward` replays them in reverse.
//! A tape is confined to one thread and rebuilt per forward pass.

use std::cell::RefCell;

use super::ops;
use super::{Scalar, Tensor, TensorError};

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(usize, Tensor<T>)>>;

struct Node<T> {
    value: Tensor<T>,
    backward: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, backward: Option<BackFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Register a trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, None)
    }

    /// Register a value that participates in the forward pass but whose
    /// gradient is discarded (inputs, targets, frozen noise, priors).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, None)
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }
}

/// Gradients produced by one backward pass, keyed by tape node.
pub struct Gradients<T> {
    entries: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zero tensor if the loss does not
    /// depend on it.
    pub fn grad(&self, v: Var<'_, T>) -> Tensor<T> {
        match &self.entries[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        backward: BackFn<T>,
    ) -> Result<Var<'t, T>, TensorError> {
        value.check_finite(op)?;
        Ok(self.tape.push(value, Some(backward)))
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let out = x.map(f);
        let id = self.id;
        self.record(
            op,
            out,
            Box::new(move |g| {
                let gi = g
                    .zip(&x.map(&df), "unary_grad", |a, b| a * b)
                    .expect("unary grad shape");
                vec![(id, gi)]
            }),
        )
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = self.value().add(&other.value())?;
        let (a, b) = (self.id, other.id);
        self.record(
            "add",
            out,
            Box::new(move |g| vec![(a, g.clone()), (b, g.clone())]),
        )
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = self.value().sub(&other.value())?;
        let (a, b) = (self.id, other.id);
        self.record(
            "sub",
            out,
            Box::new(move |g| vec![(a, g.clone()), (b, g.scale(-T::one()))]),
        )
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let xa = self.value();
        let xb = other.value();
        let out = xa.mul(&xb)?;
        let (a, b) = (self.id, other.id);
        self.record(
            "mul",
            out,
            Box::new(move |g| {
                vec![
                    (a, g.mul(&xb).expect("mul grad")),
                    (b, g.mul(&xa).expect("mul grad")),
                ]
            }),
        )
    }

    pub fn square(&self) -> Result<Var<'t, T>, TensorError> {
        self.mul(*self)
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>, TensorError> {
        let out = self.value().scale(c);
        let id = self.id;
        self.record("scale", out, Box::new(move |g| vec![(id, g.scale(c))]))
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<'t, T>, TensorError> {
        let out = self.value().map(|v| v + c);
        let id = self.id;
        self.record("add_scalar", out, Box::new(move |g| vec![(id, g.clone())]))
    }

    pub fn neg(&self) -> Result<Var<'t, T>, TensorError> {
        self.scale(-T::one())
    }

    pub fn ln(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary("ln", |v| v.ln(), |v| T::one() / v)
    }

    pub fn abs(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(
            "abs",
            |v| v.abs(),
            |v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn softplus(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary("softplus", softplus_value, sigmoid)
    }

    /// Smooth ReLU-family activation: silu(x) = x * sigmoid(x).
    pub fn silu(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(
            "silu",
            |v| v * sigmoid(v),
            |v| {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let id = self.id;
        let shape = x.shape().to_vec();
        self.record(
            "sum",
            out,
            Box::new(move |g| {
                let gv = g.data()[0];
                vec![(id, Tensor::full(&shape, gv))]
            }),
        )
    }

    pub fn mean(&self) -> Result<Var<'t, T>, TensorError> {
        let n = self.value().len();
        self.sum()?.scale(T::one() / T::of_f64(n as f64))
    }

    pub fn conv2d(
        &self,
        kernel: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let k = kernel.value();
        let out = ops::conv2d(&x, &k, stride, padding)?;
        let (xi, ki) = (self.id, kernel.id);
        let in_shape = x.shape().to_vec();
        let k_shape = k.shape().to_vec();
        self.record(
            "conv2d",
            out,
            Box::new(move |g| {
                vec![
                    (xi, ops::conv2d_grad_input(g, &k, stride, padding, &in_shape)),
                    (ki, ops::conv2d_grad_kernel(g, &x, stride, padding, &k_shape)),
                ]
            }),
        )
    }

    pub fn bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let out = ops::bilinear_resize(&x, out_h, out_w)?;
        let id = self.id;
        let (ih, iw) = (x.shape()[1], x.shape()[2]);
        self.record(
            "bilinear",
            out,
            Box::new(move |g| vec![(id, ops::bilinear_grad(g, ih, iw))]),
        )
    }

    pub fn concat_channels(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let xa = self.value();
        let xb = other.value();
        let out = ops::concat_channels(&xa, &xb)?;
        let (a, b) = (self.id, other.id);
        let (ca, sa) = (xa.shape()[0], xa.shape().to_vec());
        let sb = xb.shape().to_vec();
        self.record(
            "concat_channels",
            out,
            Box::new(move |g| {
                let split = ca * sa[1] * sa[2];
                let ga = Tensor::new(sa.clone(), g.data()[..split].to_vec()).expect("split");
                let gb = Tensor::new(sb.clone(), g.data()[split..].to_vec()).expect("split");
                vec![(a, ga), (b, gb)]
            }),
        )
    }

    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let b = bias.value();
        let out = ops::add_channel_bias(&x, &b)?;
        let (xi, bi) = (self.id, bias.id);
        self.record(
            "add_bias",
            out,
            Box::new(move |g| vec![(xi, g.clone()), (bi, ops::channel_bias_grad(g))]),
        )
    }
}

/// Reverse sweep from a scalar loss. Leaves never touched by the loss
/// read back as zeros via `Gradients::grad`.
pub fn backward<T: Scalar>(loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
    let nodes = loss.tape.nodes.borrow();
    if !nodes[loss.id].value.is_scalar() {
        return Err(TensorError::NonScalarLoss {
            shape: nodes[loss.id].value.shape().to_vec(),
        });
    }
    let n = nodes.len();
    let mut entries: Vec<Option<Tensor<T>>> = vec![None; n];
    entries[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
    for id in (0..=loss.id).rev() {
        let Some(g) = entries[id].clone() else { continue };
        let Some(back) = nodes[id].backward.as_ref() else { continue };
        for (pid, contrib) in back(&g) {
            entries[pid] = Some(match entries[pid].take() {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
    }
    let shapes = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
    Ok(Gradients { entries, shapes })
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus_value<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

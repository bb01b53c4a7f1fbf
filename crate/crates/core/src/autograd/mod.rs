//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] is an append-only list of nodes; each node owns its forward
//! value and remembers which earlier nodes produced its inputs, so insertion
//! order is already a topological order. [`Tape::backward`] walks the nodes
//! once in reverse and returns the accumulated gradients.

mod gradcheck;
pub mod suite;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, Element, Tensor};

pub use gradcheck::{
    analytic_gradients, compare_gradients, gradcheck, numeric_gradients, GradcheckOptions,
    GradcheckReport, Stencil,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Var, spec: ConvSpec },
    ConvTranspose2d { x: Var, kernel: Var, bias: Var, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    Selu { x: Var },
    Prelu { x: Var, slopes: Var },
    GlobalAvgPool { x: Var },
    Dense { x: Var, weight: Var, bias: Var },
    Concat { xs: Vec<Var> },
    Softmax { x: Var },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Reshape { x: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, kernel, bias, .. } | Op::ConvTranspose2d { x, kernel, bias, .. } => {
                vec![*x, *kernel, *bias]
            }
            Op::Dense { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Prelu { x, slopes } => vec![*x, *slopes],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { xs } => xs.clone(),
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::MaxPool { x, .. }
            | Op::Selu { x }
            | Op::GlobalAvgPool { x }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::Reshape { x } => vec![*x],
        }
    }
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward computation.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    kinks: Option<u64>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: None,
        }
    }

    /// A tape that fingerprints which side of every activation kink and
    /// which pooling argmax each forward value landed on. Two evaluations
    /// with equal fingerprints are on the same smooth piece.
    pub fn with_kink_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: Some(FNV_OFFSET),
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not take gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &str, value: Tensor<E>, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs_finite = inputs.iter().all(|&v| self.nodes[v.0].value.all_finite());
            debug_assert!(
                !inputs_finite,
                "{op_name} produced non-finite values from finite inputs"
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn note_kinks(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(mut h) = self.kinks {
            for b in bits {
                h = fnv(h, b);
            }
            self.kinks = Some(h);
        }
    }

    fn note_signs(&mut self, x: Var) {
        if self.kinks.is_some() {
            let signs: Vec<u64> = self.nodes[x.0]
                .value
                .data()
                .chunks(64)
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &v)| acc | (((v > E::zero()) as u64) << i))
                })
                .collect();
            self.note_kinks(signs.into_iter());
        }
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let y = tensor::conv2d_forward(self.value(x), self.value(kernel), Some(self.value(bias)), spec)?;
        Ok(self.push("conv2d", y, Op::Conv2d { x, kernel, bias, spec }))
    }

    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let y = tensor::conv2d_transpose_forward(
            self.value(x),
            self.value(kernel),
            Some(self.value(bias)),
            spec,
        )?;
        Ok(self.push(
            "conv2d_transpose",
            y,
            Op::ConvTranspose2d { x, kernel, bias, spec },
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = tensor::maxpool2d_with_indices(self.value(x), window, stride)?;
        if self.kinks.is_some() {
            let bits: Vec<u64> = argmax.iter().map(|&i| i as u64).collect();
            self.note_kinks(bits.into_iter());
        }
        Ok(self.push("maxpool2d", y, Op::MaxPool { x, argmax }))
    }

    pub fn selu(&mut self, x: Var) -> Var {
        self.note_signs(x);
        let y = tensor::selu(self.value(x));
        self.push("selu", y, Op::Selu { x })
    }

    pub fn prelu(&mut self, x: Var, slopes: Var) -> Result<Var> {
        self.note_signs(x);
        let y = tensor::prelu(self.value(x), self.value(slopes))?;
        Ok(self.push("prelu", y, Op::Prelu { x, slopes }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push("global_avg_pool", y, Op::GlobalAvgPool { x }))
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = tensor::dense(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push("dense", y, Op::Dense { x, weight, bias }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<E>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = tensor::concat_channels(&values)?;
        Ok(self.push("concat_channels", y, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = tensor::softmax(self.value(x))?;
        Ok(self.push("softmax", y, Op::Softmax { x }))
    }

    /// Mean categorical cross-entropy of probability rows against class labels.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let loss = tensor::cross_entropy(self.value(probs), labels)?;
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::InvalidShape {
                shape: sb.to_vec(),
                reason: format!("{op}: expected shape {sa:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push("add", y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push("mul", y, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = E::from_f64(self.value(x).sum_f64());
        self.push("sum", Tensor::scalar(s), Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push("reshape", y, Op::Reshape { x }))
    }

    /// Back-propagates from a scalar node. Every node that requires a
    /// gradient and is reachable from `loss` gets an entry; contributions
    /// from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), E::one())?);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            visited += 1;
            for (input, g) in self.input_grads(node, &dy)? {
                accumulate(&mut grads[input.0], g)?;
            }
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node<E>, dy: &Tensor<E>) -> Result<Vec<(Var, Tensor<E>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, spec } => {
                let g = tensor::conv2d_backward(self.value(*x), self.value(*kernel), dy, *spec, self.wants(*x))?;
                if let Some(dx) = g.input {
                    out.push((*x, dx));
                }
                out.push((*kernel, g.kernel));
                out.push((*bias, g.bias));
            }
            Op::ConvTranspose2d { x, kernel, bias, spec } => {
                let g = tensor::conv2d_transpose_backward(
                    self.value(*x),
                    self.value(*kernel),
                    dy,
                    *spec,
                    self.wants(*x),
                )?;
                if let Some(dx) = g.input {
                    out.push((*x, dx));
                }
                out.push((*kernel, g.kernel));
                out.push((*bias, g.bias));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, tensor::maxpool2d_backward(self.value(*x).shape(), argmax, dy)?));
            }
            Op::Selu { x } => out.push((*x, tensor::selu_backward(self.value(*x), dy)?)),
            Op::Prelu { x, slopes } => {
                let g = tensor::prelu_backward(self.value(*x), self.value(*slopes), dy)?;
                out.push((*x, g.input));
                out.push((*slopes, g.slopes));
            }
            Op::GlobalAvgPool { x } => {
                out.push((*x, tensor::global_avg_pool_backward(self.value(*x).shape(), dy)?));
            }
            Op::Dense { x, weight, bias } => {
                let g = tensor::dense_backward(self.value(*x), self.value(*weight), dy)?;
                out.push((*x, g.input));
                out.push((*weight, g.weight));
                out.push((*bias, g.bias));
            }
            Op::Concat { xs } => {
                let channels: Vec<usize> = xs.iter().map(|&v| self.value(v).shape()[1]).collect();
                let parts = tensor::concat_channels_backward(&channels, dy)?;
                out.extend(xs.iter().copied().zip(parts));
            }
            Op::Softmax { x } => out.push((*x, tensor::softmax_backward(&node.value, dy)?)),
            Op::CrossEntropy { probs, labels } => {
                out.push((
                    *probs,
                    tensor::cross_entropy_backward(self.value(*probs), labels, dy.item()?)?,
                ));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let prod = |v: &Tensor<E>| -> Result<Tensor<E>> {
                    let d = dy.data().iter().zip(v.data()).map(|(&g, &x)| g * x).collect();
                    Tensor::new(v.shape().to_vec(), d)
                };
                out.push((*a, prod(vb)?));
                out.push((*b, prod(va)?));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), dy.item()?)?));
            }
            Op::Reshape { x } => {
                out.push((*x, dy.clone().reshape(self.value(*x).shape().to_vec())?));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::InvalidShape {
                    shape: g.shape().to_vec(),
                    reason: format!("gradient does not match {:?}", acc.shape()),
                });
            }
            acc.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b);
        }
    }
    Ok(())
}

/// Result of [`Tape::backward`].
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
    visited: usize,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of non-leaf nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

use rand::Rng;

use super::ops::{self, ConvShape, DiceTerms, NormStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: NormStats<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    NormalizedRelu {
        x: Var,
        argmax: Option<usize>,
    },
    Dropout {
        x: Var,
        scales: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    ScaleByMap {
        x: Var,
        alpha: Var,
    },
    Sum {
        x: Var,
    },
    SoftDice {
        pred: Var,
        target: Var,
        eps: f64,
        squared: bool,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } => vec![x, w, b],
            Op::InstanceNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::LeakyRelu { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Upsample2x { x }
            | Op::NormalizedRelu { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x } => vec![x],
            Op::Add { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => vec![a, b],
            Op::ScaleByMap { x, alpha } => vec![x, alpha],
            Op::SoftDice { pred, target, .. } => vec![pred, target],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// An append-only record of primitive applications.
///
/// Entries are in topological order by construction: an op can only refer to
/// `Var`s that already exist. Random decisions (dropout masks) and selections
/// (the normalized-ReLU maximum) are stored with the entry so the tape can be
/// replayed exactly.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every entry of a tape.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Default)]
struct BitPacker {
    words: Vec<u64>,
    len: usize,
}

impl BitPacker {
    fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        if bit {
            *self.words.last_mut().expect("word pushed above") |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    fn finish(mut self) -> Vec<u64> {
        self.words.push(self.len as u64);
        self.words
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Which piece of every piecewise-smooth primitive was taken: the sign
    /// test of each ReLU, LeakyReLU and normalized-ReLU input, then each
    /// normalized-ReLU selection. Two evaluations with equal patterns lie on the same smooth
    /// piece unless a boundary was crossed and re-crossed in between.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut bits = BitPacker::default();
        let mut selections = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .for_each(|&v| bits.push(v >= T::zero())),
                Op::Relu { x } => self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .for_each(|&v| bits.push(v > T::zero())),
                Op::NormalizedRelu { x, argmax } => {
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .for_each(|&v| bits.push(v > T::zero()));
                    selections.push(argmax.map_or(u64::MAX, |k| k as u64))
                }
                _ => {}
            }
        }
        let mut pattern = bits.finish();
        pattern.extend(selections);
        pattern
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let shape = ConvShape::new(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            stride,
            padding,
        )?;
        let y = ops::conv3d_with(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        Ok(self.push(y, Op::Conv3d { x, w, b, shape }))
    }

    pub fn instance_norm3d(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, stats) =
            ops::instance_norm3d_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                eps,
                stats,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = ops::leaky_relu(self.value(x), slope);
        self.push(y, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::nearest_upsample2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x { x }))
    }

    pub fn normalized_relu(&mut self, x: Var) -> Var {
        let (y, argmax) = ops::normalized_relu_argmax(self.value(x));
        self.push(y, Op::NormalizedRelu { x, argmax })
    }

    /// Channel-wise dropout. Records nothing and returns `x` when inactive.
    pub fn dropout3d<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        active: bool,
    ) -> Result<Var> {
        ops::check_dropout_p(p)?;
        let [b, c, ..] = self.value(x).dims5()?;
        if !active || p == 0.0 {
            return Ok(x);
        }
        let scales = ops::dropout_scales::<T, R>(b * c, p, rng);
        let y = Tensor::from_parts(
            self.value(x).shape().to_vec(),
            ops::scale_slices(self.value(x).data(), &scales),
        );
        Ok(self.push(y, Op::Dropout { x, scales }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    /// Multiplies `x` by a single-channel map broadcast over channels.
    pub fn scale_by_map(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let y = ops::scale_by_map(self.value(x), self.value(alpha))?;
        Ok(self.push(y, Op::ScaleByMap { x, alpha }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    pub fn soft_dice_loss(
        &mut self,
        pred: Var,
        target: Var,
        eps: f64,
        squared: bool,
    ) -> Result<Var> {
        let y = ops::soft_dice_loss_value(self.value(pred), self.value(target), eps, squared)?;
        Ok(self.push(
            Tensor::scalar(y),
            Op::SoftDice {
                pred,
                target,
                eps,
                squared,
            },
        ))
    }

    /// Recomputes every non-leaf entry from its recorded inputs and saved
    /// attributes, returning the recomputed values in tape order (leaves are
    /// copied through).
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |var: Var| &vals[var.0];
            let y = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Conv3d { x, w, b, shape } => {
                    ops::conv3d_with(shape, v(*x).data(), v(*w).data(), v(*b).data())
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                    ..
                } => ops::instance_norm3d(v(*x), v(*gamma), v(*beta), *eps)?,
                Op::LeakyRelu { x, slope } => ops::leaky_relu(v(*x), *slope),
                Op::Relu { x } => ops::relu(v(*x)),
                Op::Sigmoid { x } => ops::sigmoid(v(*x)),
                Op::Upsample2x { x } => ops::nearest_upsample2x(v(*x))?,
                Op::NormalizedRelu { x, .. } => ops::normalized_relu(v(*x)),
                Op::Dropout { x, scales } => Tensor::from_parts(
                    v(*x).shape().to_vec(),
                    ops::scale_slices(v(*x).data(), scales),
                ),
                Op::Add { a, b } => ops::add(v(*a), v(*b))?,
                Op::Mul { a, b } => ops::mul(v(*a), v(*b))?,
                Op::Concat { a, b } => ops::concat_channels(v(*a), v(*b))?,
                Op::ScaleByMap { x, alpha } => ops::scale_by_map(v(*x), v(*alpha))?,
                Op::Sum { x } => Tensor::scalar(v(*x).sum()),
                Op::SoftDice {
                    pred,
                    target,
                    eps,
                    squared,
                } => Tensor::scalar(ops::soft_dice_loss_value(
                    v(*pred),
                    v(*target),
                    *eps,
                    *squared,
                )?),
            };
            vals.push(y);
        }
        Ok(vals)
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv3d { x, w, b, shape } => {
                    let g = ops::conv3d_backward(
                        shape,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &gy,
                        needs(*x),
                    );
                    if let Some(dx) = g.input {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if needs(*w) {
                        accumulate(&mut grads[w.0], g.kernel);
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.bias);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                    ..
                } => {
                    let (dx, dg, db) = ops::instance_norm3d_backward(
                        self.value(*x),
                        self.value(*gamma).data(),
                        stats,
                        &gy,
                    );
                    if needs(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads[beta.0], db);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = ops::leaky_relu_backward(self.value(*x).data(), *slope, &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x).data(), &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid { x } => {
                    let dx = ops::sigmoid_backward(node.value.data(), &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Upsample2x { x } => {
                    let dx = ops::nearest_upsample2x_backward(self.value(*x).shape(), &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::NormalizedRelu { x, argmax } => {
                    let dx = ops::normalized_relu_backward(self.value(*x).data(), *argmax, &gy);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Dropout { x, scales } => {
                    accumulate(&mut grads[x.0], ops::scale_slices(&gy, scales));
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], gy.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], gy);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if needs(*a) {
                        accumulate(
                            &mut grads[a.0],
                            gy.iter().zip(vb).map(|(&g, &y)| g * y).collect(),
                        );
                    }
                    if needs(*b) {
                        accumulate(
                            &mut grads[b.0],
                            gy.iter().zip(va).map(|(&g, &x)| g * x).collect(),
                        );
                    }
                }
                Op::Concat { a, b } => {
                    let batch = node.value.shape()[0];
                    let na = self.value(*a).len() / batch;
                    let nb = self.value(*b).len() / batch;
                    let (ga, gb) = ops::split_channels(&gy, batch, na, nb);
                    if needs(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::ScaleByMap { x, alpha } => {
                    let (dx, da) =
                        ops::scale_by_map_backward(self.value(*x), self.value(*alpha), &gy);
                    if needs(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if needs(*alpha) {
                        accumulate(&mut grads[alpha.0], da);
                    }
                }
                Op::Sum { x } => {
                    accumulate(&mut grads[x.0], vec![gy[0]; self.value(*x).len()]);
                }
                Op::SoftDice {
                    pred,
                    target,
                    eps,
                    squared,
                } => {
                    let (p, g) = (self.value(*pred).data(), self.value(*target).data());
                    let terms = DiceTerms::new(p, g, *eps, *squared);
                    let up = gy[0].as_f64();
                    if needs(*pred) {
                        accumulate(&mut grads[pred.0], terms.grad(p, g, up));
                    }
                    if needs(*target) {
                        accumulate(&mut grads[target.0], terms.grad(g, p, up));
                    }
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

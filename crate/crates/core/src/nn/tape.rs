//! Reverse-mode differentiation over a linear tape.
//!
//! Each forward op appends a node holding its output and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse,
//! accumulating gradients; leaf gradients are returned in [`Gradients`].

use super::ops::{self, BnForward};
use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2 {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        istd: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-channel batch statistics produced by a train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn upsample2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::upsample2_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Upsample2 { x, w, b }))
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let BnForward {
            out,
            xhat,
            istd,
            mean,
            var,
        } = ops::batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                istd,
                train: true,
            },
        );
        Ok((v, BatchStats { mean, var }))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let f = ops::batchnorm_eval_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            f.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                istd: f.istd,
                train: false,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    /// Back-propagates `seed` (the gradient of a scalar loss w.r.t. `root`).
    pub fn backward(&self, root: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(root).len() {
            bail!(
                Shape,
                "seed gradient of length {} for node of shape {:?}",
                seed.len(),
                self.value(root).shape()
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.to_vec());

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        *stride,
                        *pad,
                        &dy,
                    )?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Upsample2 { x, w, b } => {
                    let (dx, dw, db) =
                        ops::upsample2_backward(self.value(*x), self.value(*w), self.value(*b), &dy)?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    istd,
                    train,
                } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let (dx, dg, db) = ops::batchnorm_backward(
                        (n, c, h * w),
                        self.value(*gamma).data(),
                        xhat,
                        istd,
                        *train,
                        &dy,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x).data(), &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &g) in argmax.iter().zip(&dy) {
                        dx[src] = dx[src] + g;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let (da, db) =
                        ops::concat_backward(self.value(*a).shape(), self.value(*b).shape(), &dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

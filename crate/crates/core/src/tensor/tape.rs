use crate::error::{Error, Result};
use crate::grkan::kernels;
use crate::scalar::Scalar;
use crate::tensor::ops::{self, Activation, AttentionProbs, NormStats};
use crate::tensor::Tensor;

/// The op set the transformer is written against.
///
/// Model code is generic over this trait so one forward definition serves
/// both plain inference ([`Eager`], nothing recorded) and training
/// ([`Tape`], adjoints recorded for [`Tape::backward`]).
pub trait Graph<T: Scalar> {
    type Var: Clone;

    /// A value that never receives a gradient (inputs, targets).
    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    /// A differentiable leaf.
    fn param(&mut self, t: &Tensor<T>) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var>;
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn transpose(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn reshape(&mut self, a: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        eps: T,
    ) -> Result<Self::Var>;
    fn attention(
        &mut self,
        q: &Self::Var,
        k: &Self::Var,
        v: &Self::Var,
        heads: usize,
    ) -> Result<Self::Var>;
    /// Group-wise safe Padé activation; `num` is `[g, m+1]`, `den` is `[1 | g, n]`.
    fn group_rational(
        &mut self,
        x: &Self::Var,
        num: &Self::Var,
        den: &Self::Var,
    ) -> Result<Self::Var>;
    fn activation(&mut self, x: &Self::Var, act: Activation) -> Result<Self::Var>;
    fn mean_tokens(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn mean(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn mse(&mut self, pred: &Self::Var, target: &Self::Var) -> Result<Self::Var>;
    fn cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var>;
}

/// Executes ops immediately and records nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Var = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }
    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
    fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        ops::linear(x, w, b)
    }
    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul(a, b)
    }
    fn transpose(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        ops::transpose(a)
    }
    fn reshape(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        a.reshape(shape)
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }
    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul(a, b)
    }
    fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        Ok(ops::layer_norm(x, gamma, beta, eps)?.0)
    }
    fn attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        heads: usize,
    ) -> Result<Tensor<T>> {
        Ok(ops::attention(q, k, v, heads)?.0)
    }
    fn group_rational(
        &mut self,
        x: &Tensor<T>,
        num: &Tensor<T>,
        den: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        kernels::group_rational(x, num, den)
    }
    fn activation(&mut self, x: &Tensor<T>, act: Activation) -> Result<Tensor<T>> {
        Ok(ops::activation(x, act))
    }
    fn mean_tokens(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mean_tokens(x)
    }
    fn mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::mean(x))
    }
    fn mse(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mse(pred, target)
    }
    fn cross_entropy(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        Ok(ops::cross_entropy(logits, labels)?.0)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: NormStats<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        saved: AttentionProbs<T>,
    },
    GroupRational {
        x: usize,
        num: usize,
        den: usize,
    },
    Activation {
        x: usize,
        act: Activation,
    },
    MeanTokens {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    CrossEntropy {
        labels: Vec<usize>,
        logits: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode recording of primitive ops with the inputs their adjoints need.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| {
            Tensor::from_parts(like.shape().to_vec(), vec![T::zero(); like.numel()])
        })
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: usize) -> &Tensor<T> {
        &self.nodes[v].value
    }

    /// Replays adjoints from `loss` back to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, grad: Vec<T>| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut pending[target] {
                    Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(grad),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.val(*x), self.val(*w), &g);
                    send(*x, gx);
                    send(*w, gw);
                    if let Some(b) = b {
                        send(*b, gb);
                    }
                }
                Op::MatMul { a, b } => {
                    let (ga, gb) = ops::matmul_backward(self.val(*a), self.val(*b), &g);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Transpose { a } => {
                    let s = self.val(*a).shape();
                    send(*a, ops::transpose_raw(&g, s[1], s[0]));
                }
                Op::Reshape { a } => send(*a, g),
                Op::Add { a, b } => {
                    let n = self.val(*b).numel();
                    send(*b, ops::reduce_to_suffix(&g, n));
                    send(*a, g);
                }
                Op::Mul { a, b } => {
                    let (ga, gb) = ops::mul_backward(self.val(*a), self.val(*b), &g);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (gx, gg, gb) =
                        ops::layer_norm_backward(self.val(*x), self.val(*gamma), stats, &g);
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    saved,
                } => {
                    let (gq, gk, gv) = ops::attention_backward(
                        self.val(*q),
                        self.val(*k),
                        self.val(*v),
                        *heads,
                        saved,
                        &g,
                    );
                    send(*q, gq);
                    send(*k, gk);
                    send(*v, gv);
                }
                Op::GroupRational { x, num, den } => {
                    let grads = kernels::group_rational_backward(
                        self.val(*x),
                        self.val(*num),
                        self.val(*den),
                        &g,
                    );
                    send(*x, grads.input);
                    send(*num, grads.numerators);
                    send(*den, grads.denominators);
                }
                Op::Activation { x, act } => {
                    send(*x, ops::activation_backward(self.val(*x), *act, &g))
                }
                Op::MeanTokens { x } => send(*x, ops::mean_tokens_backward(self.val(*x), &g)),
                Op::Mean { x } => {
                    let n = self.val(*x).numel();
                    let each = g[0] / T::lit(n as f64);
                    send(*x, vec![each; n]);
                }
                Op::Mse { pred, target } => {
                    send(
                        *pred,
                        ops::mse_backward(self.val(*pred), self.val(*target), g[0]),
                    );
                }
                Op::CrossEntropy {
                    labels,
                    logits,
                    probs,
                } => {
                    send(*logits, ops::cross_entropy_backward(probs, labels, g[0]));
                }
            }
        }
        Ok(Grads { grads: out })
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Var = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.clone(), Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = ops::linear(self.val(x.0), self.val(w.0), b.map(|b| self.val(b.0)))?;
        let parents: Vec<usize> = [Some(x.0), Some(w.0), b.map(|b| b.0)]
            .into_iter()
            .flatten()
            .collect();
        Ok(self.push(
            y,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &parents,
        ))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::matmul(self.val(a.0), self.val(b.0))?;
        Ok(self.push(y, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let y = ops::transpose(self.val(a.0))?;
        Ok(self.push(y, Op::Transpose { a: a.0 }, &[a.0]))
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(a.0).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { a: a.0 }, &[a.0]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(self.val(a.0), self.val(b.0))?;
        Ok(self.push(y, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::mul(self.val(a.0), self.val(b.0))?;
        Ok(self.push(y, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: T) -> Result<Var> {
        let (y, stats) = ops::layer_norm(self.val(x.0), self.val(gamma.0), self.val(beta.0), eps)?;
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            stats,
        };
        Ok(self.push(y, op, &[x.0, gamma.0, beta.0]))
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
        let (y, saved) = ops::attention(self.val(q.0), self.val(k.0), self.val(v.0), heads)?;
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            heads,
            saved,
        };
        Ok(self.push(y, op, &[q.0, k.0, v.0]))
    }

    fn group_rational(&mut self, x: &Var, num: &Var, den: &Var) -> Result<Var> {
        let y = kernels::group_rational(self.val(x.0), self.val(num.0), self.val(den.0))?;
        let op = Op::GroupRational {
            x: x.0,
            num: num.0,
            den: den.0,
        };
        Ok(self.push(y, op, &[x.0, num.0, den.0]))
    }

    fn activation(&mut self, x: &Var, act: Activation) -> Result<Var> {
        let y = ops::activation(self.val(x.0), act);
        Ok(self.push(y, Op::Activation { x: x.0, act }, &[x.0]))
    }

    fn mean_tokens(&mut self, x: &Var) -> Result<Var> {
        let y = ops::mean_tokens(self.val(x.0))?;
        Ok(self.push(y, Op::MeanTokens { x: x.0 }, &[x.0]))
    }

    fn mean(&mut self, x: &Var) -> Result<Var> {
        let y = ops::mean(self.val(x.0));
        Ok(self.push(y, Op::Mean { x: x.0 }, &[x.0]))
    }

    fn mse(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let y = ops::mse(self.val(pred.0), self.val(target.0))?;
        Ok(self.push(
            y,
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
            &[pred.0, target.0],
        ))
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (y, probs) = ops::cross_entropy(self.val(logits.0), labels)?;
        let op = Op::CrossEntropy {
            labels: labels.to_vec(),
            logits: logits.0,
            probs,
        };
        Ok(self.push(y, op, &[logits.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (gv, xv) in g.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((gv - 2.0 * xv / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let w = tape.param(&Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(&c, &w).unwrap();
        let loss = tape.mean(&y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[0.5, 1.0]);
    }
}

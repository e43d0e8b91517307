use super::{backward, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Abs(Var),
    SmoothL1 {
        x: Var,
        beta: T,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Upsample {
        x: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    BceWithLogits {
        x: Var,
        target: Vec<T>,
    },
    SigmoidFocal {
        x: Var,
        target: Vec<T>,
        alpha: T,
        gamma: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Define-by-run computation graph.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Pushes the result of an operation; it requires grad iff an input does.
    pub(crate) fn push_op(&mut self, shape: &[usize], data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        value.requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let op = if value.requires_grad { op } else { Op::Leaf };
        self.push(value, op)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "item() on a non-scalar node");
        d[0]
    }

    /// Back-propagates from a scalar `loss`, seeding d(loss)/d(loss) = 1.
    ///
    /// Every node that requires grad and lies upstream of `loss` ends up with
    /// its gradient populated; leaves that are unreachable keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(gout) = node.value.grad.take() else {
                continue;
            };
            backward::backprop(&node.op, &node.value, &gout, before);
            node.value.grad = Some(gout);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.value.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of node {i}"),
                        iteration: 0,
                    });
                }
            }
        }
        Ok(())
    }
}

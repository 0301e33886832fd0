//! Reverse-mode tape over the fixed op set used by the registration network.

use crate::error::Result;
use crate::nn::ops;
use crate::nn::params::ParameterStore;
use crate::nn::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

enum Op {
    Input,
    Conv {
        input: NodeId,
        kernel: ParamId,
        bias: ParamId,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward values; [`Tape::backward`] replays them in reverse.
pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<NodeId> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.nodes[id].value, Tensor::zeros([0; 5]))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Input, false, "network input")
    }

    pub fn conv(&mut self, x: NodeId, kernel: ParamId, bias: ParamId) -> Result<NodeId> {
        let p = self.params;
        let y = ops::conv3d(&self.nodes[x].value, &p.get(kernel).tensor, &p.get(bias).tensor)?;
        let what = format!("conv output {}", p.get(kernel).name);
        self.push(y, Op::Conv { input: x, kernel, bias }, true, &what)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let y = ops::leaky_relu(&self.nodes[x].value, slope);
        let rg = self.nodes[x].requires_grad;
        self.push(y, Op::LeakyRelu { input: x, slope }, rg, "leaky relu")
    }

    pub fn maxpool(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = ops::maxpool3d(&self.nodes[x].value)?;
        let rg = self.nodes[x].requires_grad;
        self.push(y, Op::MaxPool { input: x, argmax }, rg, "max pool")
    }

    pub fn upsample(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::upsample_nn(&self.nodes[x].value);
        let rg = self.nodes[x].requires_grad;
        self.push(y, Op::Upsample { input: x }, rg, "upsample")
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat(&self.nodes[a].value, &self.nodes[b].value)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(y, Op::Concat { a, b }, rg, "concat")
    }

    /// Back-propagates `seed` (the gradient of a scalar loss with respect to node
    /// `out`) and returns one gradient per parameter of the store. Frozen
    /// parameters get `None`.
    pub fn backward(&self, out: NodeId, seed: Vec<f64>) -> Vec<Option<Vec<f64>>> {
        let p = self.params;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Vec<f64>>> = vec![None; p.len()];
        grads[out] = Some(seed);

        fn add(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for id in (0..=out).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Conv { input, kernel, bias } => {
                    let x = &self.nodes[*input];
                    let kp = p.get(*kernel);
                    let train = kp.trainable || p.get(*bias).trainable;
                    let gyt = Tensor {
                        shape: node.value.shape,
                        data: gy,
                        grad: None,
                    };
                    let g = ops::conv3d_backward(&x.value, &kp.tensor, &gyt, x.requires_grad, train);
                    if let Some(gx) = g.input {
                        add(&mut grads[*input], gx.data);
                    }
                    if kp.trainable {
                        if let Some(gk) = g.kernel {
                            add(&mut pgrads[*kernel], gk);
                        }
                    }
                    if p.get(*bias).trainable {
                        if let Some(gb) = g.bias {
                            add(&mut pgrads[*bias], gb);
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let gx = ops::leaky_relu_backward(&self.nodes[*input].value, *slope, &gy);
                    add(&mut grads[*input], gx);
                }
                Op::MaxPool { input, argmax } => {
                    let gx = ops::maxpool3d_backward(self.nodes[*input].value.len(), argmax, &gy);
                    add(&mut grads[*input], gx);
                }
                Op::Upsample { input } => {
                    let gx = ops::upsample_nn_backward(self.nodes[*input].value.shape, &gy);
                    add(&mut grads[*input], gx);
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::concat_backward(self.nodes[*a].value.shape, self.nodes[*b].value.shape, &gy);
                    if self.nodes[*a].requires_grad {
                        add(&mut grads[*a], ga);
                    }
                    if self.nodes[*b].requires_grad {
                        add(&mut grads[*b], gb);
                    }
                }
            }
        }
        pgrads
    }
}

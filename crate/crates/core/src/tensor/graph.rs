use super::ops::{self, LayerNormSaved};
use super::Tensor;
use crate::error::{Error, Result};
use crate::spectral;
use crate::ssm::{self, ScanSaved, SsmParams};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var },
    Conv1d { x: Var, k: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: LayerNormSaved },
    Softmax { x: Var, axis: usize },
    Resize { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Hadamard { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Expm1 { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Sum { x: Var },
    L1 { pred: Var, target: Var },
    SelectiveScan { u: Var, params: SsmParams<Var>, saved: ScanSaved },
    PolarIdft { amp: Var, phase: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record-then-reverse tape. Nodes are appended in execution order, so every
/// node's inputs precede it and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.dims[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.dims[v.0].clone()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(k), self.value(b))?;
        Ok(self.push(y, Op::Conv2d { x, k, b }, &[x, k, b]))
    }

    pub fn conv1d_depthwise(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let y = ops::conv1d_depthwise(self.value(x), self.value(k), self.value(b))?;
        Ok(self.push(y, Op::Conv1d { x, k, b }, &[x, k, b]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, saved) =
            ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, saved }, &[x, gamma, beta]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Hadamard { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = ops::scale(self.value(x), factor);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    /// `e^x - 1`, elementwise.
    pub fn expm1(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp_m1);
        self.push(y, Op::Expm1 { x }, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(dims)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = ops::permute(self.value(x), perm)?;
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.dims() != t.dims() {
            return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", p.dims(), t.dims())));
        }
        let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum();
        let y = Tensor::scalar(total / p.numel() as f64);
        Ok(self.push(y, Op::L1 { pred, target }, &[pred, target]))
    }

    pub fn selective_scan(&mut self, u: Var, params: &SsmParams<Var>) -> Result<Var> {
        let (y, saved) = {
            let p = params.map_ref(|v| self.value(*v));
            ssm::scan_forward(self.value(u), &p)?
        };
        let mut inputs = vec![u];
        inputs.extend(params.iter().copied());
        Ok(self.push(y, Op::SelectiveScan { u, params: params.clone(), saved }, &inputs))
    }

    /// Real part of the normalized inverse 2-D DFT of `amp * e^{i phase}`, per plane.
    pub fn polar_inverse_fft(&mut self, amp: Var, phase: Var) -> Result<Var> {
        let y = spectral::polar_idft(self.value(amp), self.value(phase))?;
        Ok(self.push(y, Op::PolarIdft { amp, phase }, &[amp, phase]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dims()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).dims()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| g.filter(|_| matches!(node.op, Op::Leaf)))
                .collect(),
            dims: self.nodes.iter().map(|node| node.value.dims().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b } => {
                let (gx, gk, gb) = ops::conv2d_backward(self.value(*x), self.value(*k), g);
                acc(*x, gx);
                acc(*k, gk);
                acc(*b, gb);
            }
            Op::Conv1d { x, k, b } => {
                let (gx, gk, gb) = ops::conv1d_depthwise_backward(self.value(*x), self.value(*k), g);
                acc(*x, gx);
                acc(*k, gk);
                acc(*b, gb);
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (gx, gg, gb) = ops::layer_norm_backward(saved, self.value(*gamma), g);
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Softmax { x, axis } => acc(*x, ops::softmax_backward(&node.value, *axis, g)),
            Op::Resize { x } => acc(*x, ops::bilinear_resize_backward(self.value(*x).dims(), g)),
            Op::Relu { x } => {
                let xv = self.value(*x);
                let gx = g.data().iter().zip(xv.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 });
                acc(*x, Tensor::new(xv.dims(), gx.collect()).unwrap());
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Hadamard { a, b } => {
                acc(*a, ops::hadamard(g, self.value(*b)).unwrap());
                acc(*b, ops::hadamard(g, self.value(*a)).unwrap());
            }
            Op::Scale { x, factor } => acc(*x, ops::scale(g, *factor)),
            Op::Expm1 { x } => {
                // d/dx (e^x - 1) = y + 1
                let gx = g.data().iter().zip(node.value.data()).map(|(g, y)| g * (y + 1.0));
                acc(*x, Tensor::new(g.dims(), gx.collect()).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), g);
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Reshape { x } => acc(*x, g.clone().reshape(self.value(*x).dims()).unwrap()),
            Op::Permute { x, perm } => {
                acc(*x, ops::permute(g, &ops::inverse_permutation(perm)).unwrap())
            }
            Op::Sum { x } => acc(*x, Tensor::full(self.value(*x).dims(), g.data()[0])),
            Op::L1 { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let s = g.data()[0] / p.numel() as f64;
                let sign = |a: f64, b: f64| {
                    if a > b {
                        s
                    } else if a < b {
                        -s
                    } else {
                        0.0
                    }
                };
                let gp: Vec<f64> = p.data().iter().zip(t.data()).map(|(&a, &b)| sign(a, b)).collect();
                let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                acc(*pred, Tensor::new(p.dims(), gp).unwrap());
                acc(*target, Tensor::new(t.dims(), gt).unwrap());
            }
            Op::SelectiveScan { u, params, saved } => {
                let p = params.map_ref(|v| self.value(*v));
                let (gu, gp) = ssm::scan_backward(self.value(*u), &p, saved, g);
                acc(*u, gu);
                for (v, grad) in params.iter().zip(gp.into_array()) {
                    acc(*v, grad);
                }
            }
            Op::PolarIdft { amp, phase } => {
                let (ga, gp) = spectral::polar_idft_backward(self.value(*amp), self.value(*phase), g);
                acc(*amp, ga);
                acc(*phase, gp);
            }
        }
    }
}

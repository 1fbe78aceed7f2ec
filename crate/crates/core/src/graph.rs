//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse.
//! Data-dependent selections (the LMF keep-set, feature masks) are captured
//! when the op is recorded and stay frozen on [`Graph::replay`], which is what
//! finite-difference checking needs.

use std::sync::Arc;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::losses;
use crate::ops::{self, Padding, UpsampleMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    },
    Relu(NodeId),
    Upsample {
        input: NodeId,
        factor: usize,
        mode: UpsampleMode,
    },
    Concat(Vec<NodeId>),
    Blur {
        input: NodeId,
        taps: Vec<f64>,
    },
    Lmf {
        input: NodeId,
        keep: Vec<bool>,
    },
    AvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Mask {
        input: NodeId,
        mask: Vec<f64>,
    },
    SoftmaxXent {
        logits: NodeId,
        label: usize,
    },
    FilterDiversity(NodeId),
    ResponseDiversity(NodeId),
    MaskedL1 {
        a: NodeId,
        b: NodeId,
        mask: Vec<f64>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Relu(x) | Op::AvgPool(x) | Op::FilterDiversity(x) | Op::ResponseDiversity(x) => vec![*x],
            Op::Upsample { input, .. } | Op::Blur { input, .. } | Op::Lmf { input, .. } | Op::Mask { input, .. } => {
                vec![*input]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::MaskedL1 { a, b, .. } => vec![*a, *b],
            Op::WeightedSum(terms) => terms.iter().map(|(n, _)| *n).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Options for [`Graph::check_gradients_with`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor of the relative error, `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly strided entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

/// An operation tape plus a registry of named trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return arg_err(format!("node {} does not belong to this graph", id.0));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> &Arc<Tensor> {
        &self.nodes[id.0].value
    }

    /// A constant leaf that receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// A trainable leaf. Registering the same name twice returns the
    /// original node, so every consumer shares one parameter copy.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> NodeId {
        if let Some((_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return *id;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.record(Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(input))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize, mode: UpsampleMode) -> Result<NodeId> {
        self.record(Op::Upsample { input, factor, mode })
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.record(Op::Concat(inputs.to_vec()))
    }

    pub fn gaussian_blur(&mut self, input: NodeId, sigma: f64) -> Result<NodeId> {
        let taps = ops::gaussian_kernel(sigma)?;
        self.record(Op::Blur { input, taps })
    }

    /// Large magnitude filtering with the keep-set frozen at record time.
    pub fn lmf(&mut self, input: NodeId, d_percent: f64) -> Result<NodeId> {
        self.check(input)?;
        let keep = ops::lmf_mask(self.value(input), d_percent)?;
        self.record(Op::Lmf { input, keep })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::AvgPool(input))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.record(Op::Linear { input, weight, bias })
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, input: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.record(Op::Mask { input, mask })
    }

    pub fn softmax_xent(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.record(Op::SoftmaxXent { logits, label })
    }

    /// Filter-orthogonality penalty over a `[K, C, kh, kw]` bank.
    pub fn sad_filter(&mut self, bank: NodeId) -> Result<NodeId> {
        self.record(Op::FilterDiversity(bank))
    }

    /// Squared-cosine decorrelation penalty over the channels of a `[K, H, W]` map.
    pub fn sad_response(&mut self, maps: NodeId) -> Result<NodeId> {
        self.record(Op::ResponseDiversity(maps))
    }

    /// `sum_i |mask_i (a_i - b_i)|`.
    pub fn masked_l1(&mut self, a: NodeId, b: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.record(Op::MaskedL1 { a, b, mask })
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        self.record(Op::WeightedSum(terms.to_vec()))
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        for i in op.inputs() {
            self.check(i)?;
        }
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| -> &Tensor { &self.nodes[id.0].value };
        match op {
            Op::Input | Op::Param => unreachable!("leaves are never evaluated"),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => ops::conv2d(v(input), v(kernel), bias.as_ref().map(v), *stride, *padding),
            Op::Relu(x) => Ok(ops::relu(v(x))),
            Op::Upsample { input, factor, mode } => ops::upsample(v(input), *factor, *mode),
            Op::Concat(xs) => {
                let ts: Vec<&Tensor> = xs.iter().map(v).collect();
                ops::concat_channels(&ts)
            }
            Op::Blur { input, taps } => ops::gaussian_blur_with(v(input), taps),
            Op::Lmf { input, keep } => {
                if keep.len() != v(input).len() {
                    return shape_err("LMF keep-set does not match its input");
                }
                Ok(ops::apply_mask(v(input), keep))
            }
            Op::AvgPool(x) => ops::global_avg_pool(v(x)),
            Op::Linear { input, weight, bias } => ops::linear(v(input), v(weight), bias.as_ref().map(v)),
            Op::Mask { input, mask } => {
                let x = v(input);
                if mask.len() != x.len() {
                    return shape_err(format!("mask length {} vs input length {}", mask.len(), x.len()));
                }
                Tensor::new(
                    x.shape().to_vec(),
                    x.values().iter().zip(mask).map(|(a, m)| a * m).collect(),
                )
            }
            Op::SoftmaxXent { logits, label } => Ok(Tensor::scalar(ops::softmax_xent(v(logits).values(), *label)?)),
            Op::FilterDiversity(bank) => Ok(Tensor::scalar(losses::sad_filter_value(v(bank))?)),
            Op::ResponseDiversity(maps) => Ok(Tensor::scalar(losses::sad_response_value(v(maps))?)),
            Op::MaskedL1 { a, b, mask } => {
                let (a, b) = (v(a), v(b));
                if a.len() != b.len() || a.len() != mask.len() {
                    return shape_err(format!(
                        "masked L1 lengths differ: {}, {}, mask {}",
                        a.len(),
                        b.len(),
                        mask.len()
                    ));
                }
                Ok(Tensor::scalar(losses::masked_l1_value(a.values(), b.values(), mask)))
            }
            Op::WeightedSum(terms) => {
                let mut total = 0.0;
                for (id, w) in terms {
                    let t = v(id);
                    let x = t
                        .item()
                        .ok_or_else(|| Error::Shape(format!("weighted sum term has shape {:?}", t.shape())))?;
                    total += w * x;
                }
                Ok(Tensor::scalar(total))
            }
        }
    }

    /// Recompute every non-leaf value in recording order, keeping frozen selections.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = Arc::new(value);
        }
        Ok(())
    }

    /// Replace a leaf's value (inputs or parameters), e.g. to perturb it.
    pub fn set_leaf(&mut self, id: NodeId, value: Arc<Tensor>) -> Result<()> {
        self.check(id)?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input | Op::Param) {
            return arg_err("only leaves can be overwritten");
        }
        if node.value.shape() != value.shape() {
            return shape_err(format!("leaf shape {:?} vs {:?}", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every registered parameter, zero-filled where the loss
    /// does not depend on the parameter.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self
                    .grad(*id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(*id).len()]);
                (name.clone(), g)
            })
            .collect()
    }

    /// Reverse sweep from a scalar `loss`, visiting each op once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |id: &NodeId| nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, delta: Vec<f64>| {
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let v = |id: &NodeId| -> &Tensor { &nodes[id.0].value };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let cg = ops::conv2d_backward(v(input), v(kernel), *stride, *padding, g, needs(input))?;
                if let Some(gi) = cg.input {
                    acc(*input, gi);
                }
                if needs(kernel) {
                    acc(*kernel, cg.kernel);
                }
                if let Some(b) = bias {
                    if needs(b) {
                        acc(*b, cg.bias);
                    }
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    acc(*x, ops::relu_backward(v(x), g));
                }
            }
            Op::Upsample { input, factor, mode } => {
                if needs(input) {
                    acc(*input, ops::upsample_backward(v(input).shape(), *factor, *mode, g));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = v(x).len();
                    if needs(x) {
                        acc(*x, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Blur { input, taps } => {
                if needs(input) {
                    acc(*input, ops::gaussian_blur_backward(v(input).shape(), taps, g));
                }
            }
            Op::Lmf { input, keep } => {
                if needs(input) {
                    acc(
                        *input,
                        g.iter().zip(keep).map(|(&gv, &k)| if k { gv } else { 0.0 }).collect(),
                    );
                }
            }
            Op::AvgPool(x) => {
                if needs(x) {
                    acc(*x, ops::global_avg_pool_backward(v(x).shape(), g));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = v(input).values();
                let w = v(weight).values();
                let (out_dim, in_dim) = (g.len(), x.len());
                if needs(input) {
                    let mut gi = vec![0.0; in_dim];
                    for o in 0..out_dim {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        gi.iter_mut().zip(row).for_each(|(a, wv)| *a += g[o] * wv);
                    }
                    acc(*input, gi);
                }
                if needs(weight) {
                    let mut gw = vec![0.0; w.len()];
                    for o in 0..out_dim {
                        gw[o * in_dim..(o + 1) * in_dim]
                            .iter_mut()
                            .zip(x)
                            .for_each(|(a, xv)| *a = g[o] * xv);
                    }
                    acc(*weight, gw);
                }
                if let Some(b) = bias {
                    if needs(b) {
                        acc(*b, g.to_vec());
                    }
                }
            }
            Op::Mask { input, mask } => {
                if needs(input) {
                    acc(*input, g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
            }
            Op::SoftmaxXent { logits, label } => {
                if needs(logits) {
                    acc(*logits, ops::softmax_xent_backward(v(logits).values(), *label, g[0]));
                }
            }
            Op::FilterDiversity(bank) => {
                if needs(bank) {
                    let mut gb = losses::sad_filter_grad(v(bank))?;
                    gb.iter_mut().for_each(|x| *x *= g[0]);
                    acc(*bank, gb);
                }
            }
            Op::ResponseDiversity(maps) => {
                if needs(maps) {
                    let mut gm = losses::sad_response_grad(v(maps))?;
                    gm.iter_mut().for_each(|x| *x *= g[0]);
                    acc(*maps, gm);
                }
            }
            Op::MaskedL1 { a, b, mask } => {
                let (ga, gb) = losses::masked_l1_grad(v(a).values(), v(b).values(), mask);
                if needs(a) {
                    acc(*a, ga.iter().map(|x| x * g[0]).collect());
                }
                if needs(b) {
                    acc(*b, gb.iter().map(|x| x * g[0]).collect());
                }
            }
            Op::WeightedSum(terms) => {
                for (id, w) in terms {
                    if needs(id) {
                        acc(*id, vec![w * g[0]]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Worst relative error between recorded parameter gradients and central
    /// differences, over every parameter entry. `eps` must lie in `[1e-7, 1e-3]`.
    pub fn check_gradients(&mut self, loss: NodeId, eps: f64) -> Result<f64> {
        self.check_gradients_with(
            loss,
            GradCheck {
                eps,
                ..GradCheck::default()
            },
        )
    }

    pub fn check_gradients_with(&mut self, loss: NodeId, opts: GradCheck) -> Result<f64> {
        if !(1e-7..=1e-3).contains(&opts.eps) {
            return arg_err(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.eps));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return shape_err("gradient check needs a scalar loss");
        }
        for (name, id) in &self.params {
            if !self.value(*id).all_finite() {
                return arg_err(format!("parameter `{}` is not finite", name));
            }
        }
        self.backward(loss)?;
        let params = self.params.clone();
        let mut worst = 0.0f64;
        for (_, id) in params {
            let original = Arc::clone(self.value_arc(id));
            let analytic = self
                .grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; original.len()]);
            let n = original.len();
            let step = match opts.max_entries_per_param {
                Some(m) if m > 0 && m < n => n.div_ceil(m),
                _ => 1,
            };
            for idx in (0..n).step_by(step) {
                let mut plus = (*original).clone();
                plus.values_mut()[idx] += opts.eps;
                self.set_leaf(id, Arc::new(plus))?;
                self.replay()?;
                let f_plus = self.value(loss).values()[0];
                let mut minus = (*original).clone();
                minus.values_mut()[idx] -= opts.eps;
                self.set_leaf(id, Arc::new(minus))?;
                self.replay()?;
                let f_minus = self.value(loss).values()[0];
                let numeric = (f_plus - f_minus) / (2.0 * opts.eps);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
                worst = worst.max(rel);
            }
            self.set_leaf(id, original)?;
        }
        self.replay()?;
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_loss_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.input(random(&[5], &mut rng));
        let w = g.param("w", Arc::new(random(&[1, 5], &mut rng)));
        let y = g.linear(x, w, None).unwrap();
        let err = g.check_gradients(y, 1e-5).unwrap();
        assert!(err < 1e-9, "err {}", err);
        assert_eq!(g.grad(w).unwrap(), g.value(x).values());
    }

    #[test]
    fn eps_band_enforced() {
        let mut g = Graph::new();
        let w = g.param("w", Arc::new(Tensor::vector(vec![1.0])));
        let s = g.weighted_sum(&[(w, 2.0)]).unwrap();
        assert!(g.check_gradients(s, 1e-2).is_err());
        assert!(g.check_gradients(s, 1e-9).is_err());
        assert!(g.check_gradients(s, 1e-4).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Arc::new(Tensor::zeros(&[1, 2, 2])));
        let r = g.relu(w).unwrap();
        assert!(g.backward(r).is_err());
        assert!(g.check_gradients(r, 1e-5).is_err());
    }

    #[test]
    fn shared_param_registered_once() {
        let mut g = Graph::new();
        let t = Arc::new(Tensor::zeros(&[2]));
        let a = g.param("w", Arc::clone(&t));
        let b = g.param("w", Arc::clone(&t));
        assert_eq!(a, b);
        assert_eq!(g.params().len(), 1);
        assert!(Arc::ptr_eq(g.value_arc(a), &t));
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let mut g = Graph::new();
        let w = g.param("w", Arc::new(Tensor::vector(vec![3.0])));
        let s = g.weighted_sum(&[(w, 2.0), (w, 5.0)]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[7.0]);
    }

    #[test]
    fn concat_backward_slices() {
        let mut g = Graph::new();
        let a = g.param("a", Arc::new(Tensor::filled(&[1, 2, 2], 1.0)));
        let b = g.param("b", Arc::new(Tensor::filled(&[2, 2, 2], 2.0)));
        let c = g.concat_channels(&[a, b]).unwrap();
        let p = g.global_avg_pool(c).unwrap();
        let w = g.input(Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap());
        // 4 * mean over 4 cells = channel sum
        let s = g.linear(p, w, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn replay_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(random(&[2, 6, 6], &mut rng));
        let k = g.param("k", Arc::new(random(&[3, 2, 3, 3], &mut rng)));
        let y = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
        let z = g.lmf(y, 50.0).unwrap();
        let before = g.value(z).clone();
        g.replay().unwrap();
        assert_eq!(g.value(z), &before);
    }
}

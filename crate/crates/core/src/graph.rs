//! Small feed-forward graphs with hand-derived backward rules.
//!
//! The operator set is fixed: 2-d convolution (stride 1), dense, relu,
//! global average pooling, batch-add, scalar-scale, and softmax. That is
//! enough to express the toy CNNs this crate trains. Backward walks the
//! nodes in reverse construction order with a fixed accumulation order, so
//! gradients are bit-reproducible run to run.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Conv2d {
        weight: String,
        bias: String,
        padding: usize,
    },
    Dense {
        weight: String,
        bias: String,
    },
    Relu,
    GlobalAvgPool,
    BatchAdd {
        bias: String,
    },
    ScalarScale {
        factor: f32,
    },
    Softmax,
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    op: Op,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// Activations retained by one forward pass; consumed by backward.
#[derive(Debug, Clone)]
pub struct Execution {
    /// activations[0] is the input; activations[i+1] is node i's output.
    activations: Vec<Tensor>,
}

impl Execution {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("execution holds at least the input")
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct GradientSet {
    /// One tensor per parameter, keyed by parameter name.
    pub params: BTreeMap<String, Tensor>,
    /// Gradient with respect to the graph input.
    pub input: Tensor,
}

/// Scalar loss evaluated on the graph output, with its analytic gradient.
/// `value_f64` evaluates the same loss on a shadow output held in f64;
/// the finite-difference oracle needs it because f32 forward rounding
/// would otherwise drown the central-difference signal.
pub trait ScalarLoss {
    fn value(&self, output: &Tensor) -> f64;
    fn grad(&self, output: &Tensor) -> Tensor;
    fn value_f64(&self, shape: &[usize], data: &[f64]) -> f64;
}

/// L = sum of all output elements.
pub struct SumLoss;

impl ScalarLoss for SumLoss {
    fn value(&self, output: &Tensor) -> f64 {
        output.sum_f64()
    }

    fn grad(&self, output: &Tensor) -> Tensor {
        Tensor::filled(output.shape().to_vec(), 1.0)
    }

    fn value_f64(&self, _shape: &[usize], data: &[f64]) -> f64 {
        data.iter().sum()
    }
}

/// L = sum of squared output elements.
pub struct SquaredSumLoss;

impl ScalarLoss for SquaredSumLoss {
    fn value(&self, output: &Tensor) -> f64 {
        output.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    fn grad(&self, output: &Tensor) -> Tensor {
        let data = output.data().iter().map(|&v| 2.0 * v).collect();
        Tensor::new(output.shape().to_vec(), data).expect("shape preserved")
    }

    fn value_f64(&self, _shape: &[usize], data: &[f64]) -> f64 {
        data.iter().map(|&v| v * v).sum()
    }
}

/// Builds a [`Graph`] node by node, validating shapes as it goes.
#[derive(Debug)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    current_shape: Vec<usize>,
    nodes: Vec<Node>,
    params: BTreeMap<String, Tensor>,
    init_specs: Vec<(String, Vec<usize>, f32)>, // (name, shape, std); std 0 => zeros
}

impl GraphBuilder {
    /// `input_shape` excludes the batch dimension.
    pub fn new(input_shape: Vec<usize>) -> Self {
        GraphBuilder {
            current_shape: input_shape.clone(),
            input_shape,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            init_specs: Vec::new(),
        }
    }

    fn push_param(&mut self, name: String, shape: Vec<usize>, std: f32) {
        self.params.insert(name.clone(), Tensor::zeros(shape.clone()));
        self.init_specs.push((name, shape, std));
    }

    /// 3x3-style convolution, stride 1. `padding` pads all four edges.
    pub fn conv2d(
        &mut self,
        name: &str,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<&mut Self> {
        let [c, h, w] = match *self.current_shape.as_slice() {
            [c, h, w] => [c, h, w],
            _ => {
                return Err(Error::InvalidNode {
                    node: name.to_string(),
                    reason: format!("conv2d needs [C,H,W] input, got {:?}", self.current_shape),
                })
            }
        };
        if kernel == 0 || out_channels == 0 {
            return Err(Error::InvalidNode {
                node: name.to_string(),
                reason: "kernel and out_channels must be positive".into(),
            });
        }
        let h_out = (h + 2 * padding).checked_sub(kernel - 1).filter(|&v| v > 0);
        let w_out = (w + 2 * padding).checked_sub(kernel - 1).filter(|&v| v > 0);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidNode {
                    node: name.to_string(),
                    reason: format!("kernel {kernel} too large for {h}x{w} input with padding {padding}"),
                })
            }
        };
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = c * kernel * kernel;
        self.push_param(weight.clone(), vec![out_channels, c, kernel, kernel], (2.0 / fan_in as f32).sqrt());
        self.push_param(bias.clone(), vec![out_channels], 0.0);
        let in_shape = self.current_shape.clone();
        self.current_shape = vec![out_channels, h_out, w_out];
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::Conv2d { weight, bias, padding },
            in_shape,
            out_shape: self.current_shape.clone(),
        });
        Ok(self)
    }

    pub fn dense(&mut self, name: &str, out_features: usize) -> Result<&mut Self> {
        let f = match *self.current_shape.as_slice() {
            [f] => f,
            _ => {
                return Err(Error::InvalidNode {
                    node: name.to_string(),
                    reason: format!("dense needs [F] input, got {:?}", self.current_shape),
                })
            }
        };
        if out_features == 0 {
            return Err(Error::InvalidNode {
                node: name.to_string(),
                reason: "out_features must be positive".into(),
            });
        }
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        self.push_param(weight.clone(), vec![out_features, f], (2.0 / f as f32).sqrt());
        self.push_param(bias.clone(), vec![out_features], 0.0);
        let in_shape = self.current_shape.clone();
        self.current_shape = vec![out_features];
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::Dense { weight, bias },
            in_shape,
            out_shape: self.current_shape.clone(),
        });
        Ok(self)
    }

    pub fn relu(&mut self, name: &str) -> &mut Self {
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::Relu,
            in_shape: self.current_shape.clone(),
            out_shape: self.current_shape.clone(),
        });
        self
    }

    pub fn global_avg_pool(&mut self, name: &str) -> Result<&mut Self> {
        let c = match *self.current_shape.as_slice() {
            [c, _, _] => c,
            _ => {
                return Err(Error::InvalidNode {
                    node: name.to_string(),
                    reason: format!("global_avg_pool needs [C,H,W] input, got {:?}", self.current_shape),
                })
            }
        };
        let in_shape = self.current_shape.clone();
        self.current_shape = vec![c];
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::GlobalAvgPool,
            in_shape,
            out_shape: self.current_shape.clone(),
        });
        Ok(self)
    }

    /// Adds a learnable tensor (same shape as the activation) to every batch row.
    pub fn batch_add(&mut self, name: &str) -> &mut Self {
        let bias = format!("{name}.bias");
        self.push_param(bias.clone(), self.current_shape.clone(), 0.0);
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::BatchAdd { bias },
            in_shape: self.current_shape.clone(),
            out_shape: self.current_shape.clone(),
        });
        self
    }

    pub fn scalar_scale(&mut self, name: &str, factor: f32) -> &mut Self {
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::ScalarScale { factor },
            in_shape: self.current_shape.clone(),
            out_shape: self.current_shape.clone(),
        });
        self
    }

    pub fn softmax(&mut self, name: &str) -> Result<&mut Self> {
        if self.current_shape.len() != 1 {
            return Err(Error::InvalidNode {
                node: name.to_string(),
                reason: format!("softmax needs [K] input, got {:?}", self.current_shape),
            });
        }
        self.nodes.push(Node {
            name: name.to_string(),
            op: Op::Softmax,
            in_shape: self.current_shape.clone(),
            out_shape: self.current_shape.clone(),
        });
        Ok(self)
    }

    /// Finalizes the graph, drawing initial weights from the `init` stream of
    /// `seed` (He-style normal for weights, zeros for biases).
    pub fn build(mut self, seed: u64) -> Graph {
        let mut rng = rng::stream(seed, "graph-init");
        for (name, _, std) in &self.init_specs {
            if *std > 0.0 {
                let normal = Normal::new(0.0f32, *std).expect("std is finite");
                let t = self.params.get_mut(name).expect("param registered");
                for v in t.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Graph {
            input_shape: self.input_shape,
            output_shape: self.current_shape,
            nodes: self.nodes,
            params: self.params,
            trace: None,
        }
    }
}

/// A validated operator pipeline plus its named parameters.
///
/// Topology is immutable after construction; parameters change only through
/// [`Graph::params_mut`], which also drops any retained forward trace.
#[derive(Debug, Clone)]
pub struct Graph {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    nodes: Vec<Node>,
    params: BTreeMap<String, Tensor>,
    trace: Option<Execution>,
}

impl Graph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Mutable parameter access for optimizers. Invalidates the retained trace.
    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        self.trace = None;
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a parameter tensor; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("set_param `{name}`"),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        value.check_finite(&format!("set_param `{name}`"))?;
        *slot = value;
        self.trace = None;
        Ok(())
    }

    /// Forward pass retaining intermediates for a later [`Graph::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let exec = self.forward_traced(input)?;
        let out = exec.output().clone();
        self.trace = Some(exec);
        Ok(out)
    }

    /// Backward pass over the retained trace. Errors if no forward ran since
    /// construction or the last parameter update.
    pub fn backward(&self, upstream: &Tensor) -> Result<GradientSet> {
        let exec = self.trace.as_ref().ok_or(Error::BackwardBeforeForward)?;
        self.backward_traced(exec, upstream)
    }

    /// Pure forward pass returning the trace; lets callers hold several
    /// concurrent executions of the same graph.
    pub fn forward_traced(&self, input: &Tensor) -> Result<Execution> {
        let got = input.shape();
        let ok = got.len() == self.input_shape.len() + 1 && got[1..] == self.input_shape[..];
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "graph input".into(),
                expected: self.input_shape.clone(),
                got: got.to_vec(),
            });
        }
        input.check_finite("graph input")?;
        let mut activations = Vec::with_capacity(self.nodes.len() + 1);
        activations.push(input.clone());
        for node in &self.nodes {
            let out = self.node_forward(node, activations.last().expect("input pushed"))?;
            out.check_finite(&format!("node `{}` output", node.name))?;
            activations.push(out);
        }
        Ok(Execution { activations })
    }

    /// Backward over an explicit trace. `upstream` is dL/d(output).
    pub fn backward_traced(&self, exec: &Execution, upstream: &Tensor) -> Result<GradientSet> {
        let out = exec.output();
        if upstream.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                context: "backward upstream".into(),
                expected: out.shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        let mut param_grads: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.zeros_like()))
            .collect();
        let mut grad = upstream.clone();
        for (i, node) in self.nodes.iter().enumerate().rev() {
            grad = self.node_backward(node, &exec.activations[i], &grad, &mut param_grads)?;
        }
        Ok(GradientSet {
            params: param_grads,
            input: grad,
        })
    }

    fn node_forward(&self, node: &Node, input: &Tensor) -> Result<Tensor> {
        let batch = input.shape()[0];
        match &node.op {
            Op::Conv2d { weight, bias, padding } => {
                let w = self.param(weight)?;
                let b = self.param(bias)?;
                Ok(conv2d_forward(input, w, b, *padding, &node.out_shape))
            }
            Op::Dense { weight, bias } => {
                let w = self.param(weight)?;
                let b = self.param(bias)?;
                Ok(dense_forward(input, w, b))
            }
            Op::Relu => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                Ok(Tensor::new(input.shape().to_vec(), data).expect("shape preserved"))
            }
            Op::GlobalAvgPool => {
                let (c, h, w) = (node.in_shape[0], node.in_shape[1], node.in_shape[2]);
                let area = (h * w) as f32;
                let mut out = Tensor::zeros(vec![batch, c]);
                let src = input.data();
                let dst = out.data_mut();
                for bi in 0..batch {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let sum: f32 = src[base..base + h * w].iter().sum();
                        dst[bi * c + ci] = sum / area;
                    }
                }
                Ok(out)
            }
            Op::BatchAdd { bias } => {
                let b = self.param(bias)?;
                let stride = b.len();
                let mut out = input.clone();
                for row in out.data_mut().chunks_mut(stride) {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                Ok(out)
            }
            Op::ScalarScale { factor } => {
                let mut out = input.clone();
                out.scale_in_place(*factor);
                Ok(out)
            }
            Op::Softmax => Ok(softmax_rows(input)),
        }
    }

    fn node_backward(
        &self,
        node: &Node,
        input: &Tensor,
        grad_out: &Tensor,
        param_grads: &mut BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        match &node.op {
            Op::Conv2d { weight, bias, padding } => {
                let w = self.param(weight)?;
                let gw = param_grads.get_mut(weight).expect("grad slot exists");
                let (grad_in, grad_w, grad_b) = conv2d_backward(input, w, grad_out, *padding);
                gw.add_in_place(&grad_w)?;
                param_grads.get_mut(bias).expect("grad slot exists").add_in_place(&grad_b)?;
                Ok(grad_in)
            }
            Op::Dense { weight, bias } => {
                let w = self.param(weight)?;
                let (grad_in, grad_w, grad_b) = dense_backward(input, w, grad_out);
                param_grads.get_mut(weight).expect("grad slot exists").add_in_place(&grad_w)?;
                param_grads.get_mut(bias).expect("grad slot exists").add_in_place(&grad_b)?;
                Ok(grad_in)
            }
            Op::Relu => {
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok(Tensor::new(input.shape().to_vec(), data).expect("shape preserved"))
            }
            Op::GlobalAvgPool => {
                let batch = input.shape()[0];
                let (c, h, w) = (node.in_shape[0], node.in_shape[1], node.in_shape[2]);
                let area = (h * w) as f32;
                let mut grad_in = Tensor::zeros(input.shape().to_vec());
                let dst = grad_in.data_mut();
                let g = grad_out.data();
                for bi in 0..batch {
                    for ci in 0..c {
                        let gv = g[bi * c + ci] / area;
                        let base = (bi * c + ci) * h * w;
                        for v in &mut dst[base..base + h * w] {
                            *v = gv;
                        }
                    }
                }
                Ok(grad_in)
            }
            Op::BatchAdd { bias } => {
                let gb = param_grads.get_mut(bias).expect("grad slot exists");
                let stride = gb.len();
                for row in grad_out.data().chunks(stride) {
                    for (slot, &g) in gb.data_mut().iter_mut().zip(row) {
                        *slot += g;
                    }
                }
                Ok(grad_out.clone())
            }
            Op::ScalarScale { factor } => {
                let mut grad_in = grad_out.clone();
                grad_in.scale_in_place(*factor);
                Ok(grad_in)
            }
            Op::Softmax => {
                // input here is the node input; recompute probabilities.
                let probs = softmax_rows(input);
                let k = *node.in_shape.first().expect("softmax input is [K]");
                let mut grad_in = Tensor::zeros(grad_out.shape().to_vec());
                for ((gi, go), p) in grad_in
                    .data_mut()
                    .chunks_mut(k)
                    .zip(grad_out.data().chunks(k))
                    .zip(probs.data().chunks(k))
                {
                    let dot: f64 = go.iter().zip(p).map(|(&g, &pv)| g as f64 * pv as f64).sum();
                    for i in 0..k {
                        gi[i] = p[i] * (go[i] - dot as f32);
                    }
                }
                Ok(grad_in)
            }
        }
    }
}

/// f64 twin of [`Execution`], produced only for the finite-difference oracle.
struct ShadowExecution {
    activations: Vec<Vec<f64>>,
}

impl Graph {
    fn forward_shadow(&self, input: &Tensor) -> Result<ShadowExecution> {
        let batch = input.shape()[0];
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len() + 1);
        activations.push(input.data().iter().map(|&v| v as f64).collect());
        for node in &self.nodes {
            let src = activations.last().expect("input pushed");
            let out = match &node.op {
                Op::Conv2d { weight, bias, padding } => {
                    let in_shape = [batch, node.in_shape[0], node.in_shape[1], node.in_shape[2]];
                    let out_shape = [batch, node.out_shape[0], node.out_shape[1], node.out_shape[2]];
                    conv2d_shadow(src, &in_shape, self.param(weight)?, self.param(bias)?, *padding, &out_shape)
                }
                Op::Dense { weight, bias } => {
                    let w = self.param(weight)?;
                    let b = self.param(bias)?;
                    let (o_dim, f_dim) = (w.shape()[0], w.shape()[1]);
                    let mut out = vec![0.0f64; batch * o_dim];
                    for bi in 0..batch {
                        let row = &src[bi * f_dim..(bi + 1) * f_dim];
                        for o in 0..o_dim {
                            let wrow = &w.data()[o * f_dim..(o + 1) * f_dim];
                            let mut acc = b.data()[o] as f64;
                            for (xv, wv) in row.iter().zip(wrow) {
                                acc += xv * *wv as f64;
                            }
                            out[bi * o_dim + o] = acc;
                        }
                    }
                    out
                }
                Op::Relu => src.iter().map(|&v| v.max(0.0)).collect(),
                Op::GlobalAvgPool => {
                    let (c, h, w) = (node.in_shape[0], node.in_shape[1], node.in_shape[2]);
                    let area = (h * w) as f64;
                    let mut out = vec![0.0f64; batch * c];
                    for bi in 0..batch {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            out[bi * c + ci] = src[base..base + h * w].iter().sum::<f64>() / area;
                        }
                    }
                    out
                }
                Op::BatchAdd { bias } => {
                    let b = self.param(bias)?;
                    let stride = b.len();
                    let mut out = src.clone();
                    for row in out.chunks_mut(stride) {
                        for (v, &bv) in row.iter_mut().zip(b.data()) {
                            *v += bv as f64;
                        }
                    }
                    out
                }
                Op::ScalarScale { factor } => src.iter().map(|&v| v * *factor as f64).collect(),
                Op::Softmax => {
                    let k = node.in_shape[0];
                    let mut out = vec![0.0f64; src.len()];
                    for (dst, row) in out.chunks_mut(k).zip(src.chunks(k)) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0f64;
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d = (v - max).exp();
                            sum += *d;
                        }
                        for d in dst.iter_mut() {
                            *d /= sum;
                        }
                    }
                    out
                }
            };
            activations.push(out);
        }
        Ok(ShadowExecution { activations })
    }
}

fn conv2d_shadow(
    src: &[f64],
    in_shape: &[usize; 4],
    weight: &Tensor,
    bias: &Tensor,
    padding: usize,
    out_shape: &[usize; 4],
) -> Vec<f64> {
    let [batch, c_in, h, w] = *in_shape;
    let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
    let [_, c_out, h_out, w_out] = *out_shape;
    let mut out = vec![0.0f64; batch * c_out * h_out * w_out];
    let wd = weight.data();
    let bd = bias.data();
    let p = padding as isize;
    for bi in 0..batch {
        for o in 0..c_out {
            for y in 0..h_out {
                let i_lo = (p - y as isize).max(0) as usize;
                let i_hi = kh.min((h as isize + p - y as isize).max(0) as usize);
                for x in 0..w_out {
                    let j_lo = (p - x as isize).max(0) as usize;
                    let j_hi = kw.min((w as isize + p - x as isize).max(0) as usize);
                    let mut acc = bd[o] as f64;
                    for c in 0..c_in {
                        let in_base = ((bi * c_in + c) * h) * w;
                        let w_base = ((o * c_in + c) * kh) * kw;
                        for i in i_lo..i_hi {
                            let hy = (y as isize + i as isize - p) as usize;
                            let row = in_base + hy * w;
                            let wrow = w_base + i * kw;
                            for j in j_lo..j_hi {
                                let wx = (x as isize + j as isize - p) as usize;
                                acc += src[row + wx] * wd[wrow + j] as f64;
                            }
                        }
                    }
                    out[((bi * c_out + o) * h_out + y) * w_out + x] = acc;
                }
            }
        }
    }
    out
}

/// Row span of kernel tap `t` (offset along one axis under padding `p`):
/// output positions `lo..hi` whose matching input index stays in `0..n`,
/// and the input index paired with output position `lo`.
fn tap_span(t: usize, p: usize, n: usize, n_out: usize) -> (usize, usize, usize) {
    let lo = p.saturating_sub(t);
    let hi = (n + p).saturating_sub(t).min(n_out).max(lo);
    (lo, hi, lo + t - p)
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize, out_shape: &[usize]) -> Tensor {
    let batch = input.shape()[0];
    let (c_in, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let mut out = Tensor::zeros(vec![batch, c_out, h_out, w_out]);
    let src = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let dst = out.data_mut();
    let p = padding;
    for bi in 0..batch {
        for o in 0..c_out {
            let out_start = ((bi * c_out + o) * h_out) * w_out;
            let out_plane = &mut dst[out_start..out_start + h_out * w_out];
            out_plane.fill(bd[o]);
            for c in 0..c_in {
                let src_start = ((bi * c_in + c) * h) * w;
                let src_plane = &src[src_start..src_start + h * w];
                let w_base = (o * c_in + c) * kh * kw;
                for i in 0..kh {
                    let (y_lo, y_hi, hy0) = tap_span(i, p, h, h_out);
                    for j in 0..kw {
                        let wv = wd[w_base + i * kw + j];
                        let (x_lo, x_hi, sx0) = tap_span(j, p, w, w_out);
                        let len = x_hi - x_lo;
                        if len == 0 {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let hy = hy0 + (y - y_lo);
                            let srow = &src_plane[hy * w + sx0..hy * w + sx0 + len];
                            let orow = &mut out_plane[y * w_out + x_lo..y * w_out + x_lo + len];
                            for (ov, sv) in orow.iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, padding: usize) -> (Tensor, Tensor, Tensor) {
    let batch = input.shape()[0];
    let (c_in, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (h_out, w_out) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    let mut grad_w = Tensor::zeros(weight.shape().to_vec());
    let mut grad_b = Tensor::zeros(vec![c_out]);
    let src = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let gi = grad_in.data_mut();
    let gw = grad_w.data_mut();
    let gb = grad_b.data_mut();
    let p = padding;
    for bi in 0..batch {
        for o in 0..c_out {
            let g_start = ((bi * c_out + o) * h_out) * w_out;
            let g_plane = &g[g_start..g_start + h_out * w_out];
            gb[o] += g_plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for c in 0..c_in {
                let in_start = ((bi * c_in + c) * h) * w;
                let src_plane = &src[in_start..in_start + h * w];
                let gi_plane = &mut gi[in_start..in_start + h * w];
                let w_base = (o * c_in + c) * kh * kw;
                for i in 0..kh {
                    let (y_lo, y_hi, hy0) = tap_span(i, p, h, h_out);
                    for j in 0..kw {
                        let wv = wd[w_base + i * kw + j];
                        let (x_lo, x_hi, sx0) = tap_span(j, p, w, w_out);
                        let len = x_hi - x_lo;
                        if len == 0 {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for y in y_lo..y_hi {
                            let hy = hy0 + (y - y_lo);
                            let grow = &g_plane[y * w_out + x_lo..y * w_out + x_lo + len];
                            let srow = &src_plane[hy * w + sx0..hy * w + sx0 + len];
                            let girow = &mut gi_plane[hy * w + sx0..hy * w + sx0 + len];
                            for idx in 0..len {
                                acc += grow[idx] * srow[idx];
                                girow[idx] += wv * grow[idx];
                            }
                        }
                        gw[w_base + i * kw + j] += acc;
                    }
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let batch = input.shape()[0];
    let (o_dim, f_dim) = (weight.shape()[0], weight.shape()[1]);
    let mut out = Tensor::zeros(vec![batch, o_dim]);
    let src = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let dst = out.data_mut();
    for bi in 0..batch {
        let row = &src[bi * f_dim..(bi + 1) * f_dim];
        for o in 0..o_dim {
            let wrow = &wd[o * f_dim..(o + 1) * f_dim];
            let mut acc = bd[o];
            for (xv, wv) in row.iter().zip(wrow) {
                acc += xv * wv;
            }
            dst[bi * o_dim + o] = acc;
        }
    }
    out
}

fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let batch = input.shape()[0];
    let (o_dim, f_dim) = (weight.shape()[0], weight.shape()[1]);
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    let mut grad_w = Tensor::zeros(weight.shape().to_vec());
    let mut grad_b = Tensor::zeros(vec![o_dim]);
    let src = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let gi = grad_in.data_mut();
    let gw = grad_w.data_mut();
    let gb = grad_b.data_mut();
    for bi in 0..batch {
        let row = &src[bi * f_dim..(bi + 1) * f_dim];
        let gin = &mut gi[bi * f_dim..(bi + 1) * f_dim];
        for o in 0..o_dim {
            let gv = g[bi * o_dim + o];
            gb[o] += gv;
            let wrow = &wd[o * f_dim..(o + 1) * f_dim];
            let gwrow = &mut gw[o * f_dim..(o + 1) * f_dim];
            for f in 0..f_dim {
                gwrow[f] += gv * row[f];
                gin[f] += gv * wrow[f];
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Row-wise stable softmax over the last dimension of a [B, K] tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("non-empty shape");
    let mut out = Tensor::zeros(logits.shape().to_vec());
    for (dst, row) in out.data_mut().chunks_mut(k).zip(logits.data().chunks(k)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *d = e as f32;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = (*d as f64 / sum) as f32;
        }
    }
    out
}

/// Max relative error between the analytic gradient of `param_name` and a
/// central finite difference of `loss` over the graph output.
///
/// Coordinates where the perturbation flips any relu activation sign are
/// skipped (the loss is not differentiable there). At most `max_coords`
/// coordinates are probed, sampled without replacement from `seed`.
pub fn finite_difference_check<L: ScalarLoss>(
    graph: &Graph,
    input: &Tensor,
    loss: &L,
    param_name: &str,
    eps: f32,
    max_coords: usize,
    seed: u64,
) -> Result<f32> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("finite difference eps must be > 0".into()));
    }
    let exec = graph.forward_traced(input)?;
    let base = loss.value(exec.output());
    if !base.is_finite() {
        return Err(Error::NonFinite("finite_difference_check loss".into()));
    }
    let upstream = loss.grad(exec.output());
    let grads = graph.backward_traced(&exec, &upstream)?;
    let analytic = grads
        .params
        .get(param_name)
        .ok_or_else(|| Error::UnknownParameter(param_name.to_string()))?
        .clone();

    let n = analytic.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = rng::stream(seed, "fd-coords");
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max_coords {
            picked.insert(rng.gen_range(0..n));
        }
        picked.into_iter().collect()
    };

    let out_shape = exec.output().shape().to_vec();
    let mut probe = graph.clone();
    let mut max_rel = 0.0f32;
    for idx in coords {
        let orig = probe.param(param_name)?.data()[idx];
        let up = orig + eps;
        let down = orig - eps;

        set_coord(&mut probe, param_name, idx, up);
        let exec_up = probe.forward_shadow(input)?;
        set_coord(&mut probe, param_name, idx, down);
        let exec_down = probe.forward_shadow(input)?;
        set_coord(&mut probe, param_name, idx, orig);

        if relu_masks_differ(graph, &exec_up, &exec_down) {
            continue;
        }
        let l_up = loss.value_f64(&out_shape, exec_up.activations.last().expect("output"));
        let l_down = loss.value_f64(&out_shape, exec_down.activations.last().expect("output"));
        if !l_up.is_finite() || !l_down.is_finite() {
            return Err(Error::NonFinite("finite_difference_check loss".into()));
        }
        let numeric = (l_up - l_down) / (up as f64 - down as f64);
        let ana = analytic.data()[idx] as f64;
        let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel as f32);
    }
    Ok(max_rel)
}

fn set_coord(graph: &mut Graph, name: &str, idx: usize, value: f32) {
    graph.params_mut().get_mut(name).expect("param exists").data_mut()[idx] = value;
}

fn relu_masks_differ(graph: &Graph, a: &ShadowExecution, b: &ShadowExecution) -> bool {
    for (i, node) in graph.nodes.iter().enumerate() {
        if matches!(node.op, Op::Relu) {
            let xa = &a.activations[i];
            let xb = &b.activations[i];
            if xa.iter().zip(xb).any(|(&u, &v)| (u > 0.0) != (v > 0.0)) {
                return true;
            }
        }
    }
    false
}

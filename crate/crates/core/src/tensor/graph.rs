use super::kernels::{self, ConvGeometry};
use super::{ConvSpec, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BatchNormMode,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Upsample {
        input: Var,
        factor: [usize; 3],
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    ChannelMean(Var),
    ExpandChannels(Var),
    Sum(Var),
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
        floor: f64,
    },
    Dice {
        probs: Var,
        target: Vec<f64>,
        smooth: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// Nodes are appended only after their inputs exist, so index order is a
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn split_ncs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("expected a channel axis, got shape {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are kept only when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let [n, c, d, h, w] = self.value(input).dims5()?;
        if c != spec.in_channels {
            return Err(shape_err!("conv3d input has {c} channels, spec expects {}", spec.in_channels));
        }
        let ws = spec.weight_shape();
        if self.value(weight).shape() != ws {
            return Err(shape_err!(
                "conv3d weight shape {:?}, expected {:?}",
                self.value(weight).shape(),
                ws
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [spec.out_channels] {
                return Err(shape_err!(
                    "conv3d bias shape {:?}, expected [{}]",
                    self.value(b).shape(),
                    spec.out_channels
                ));
            }
        }
        let output = spec.output_extent([d, h, w])?;
        let geo = ConvGeometry {
            n,
            input: [d, h, w],
            output,
        };
        let data = kernels::conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &spec,
            &geo,
        );
        let t = Tensor::new(vec![n, spec.out_channels, output[0], output[1], output[2]], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            &inputs,
        ))
    }

    /// Per-channel spatial convolution followed by a 1x1x1 channel mix.
    pub fn depthwise_separable_conv3d(
        &mut self,
        input: Var,
        dw_weight: Var,
        dw_bias: Option<Var>,
        pw_weight: Var,
        pw_bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        let c = self.value(input).dims5()?[1];
        let dw_shape = self.value(dw_weight).shape().to_vec();
        if dw_shape.len() != 5 || dw_shape[0] != c || dw_shape[1] != 1 {
            return Err(shape_err!("depthwise weight shape {dw_shape:?} for {c} input channels"));
        }
        let cout = self.value(pw_weight).shape()[0];
        let dw = ConvSpec::depthwise(c, dw_shape[2]).with_dilation(dilation);
        let mid = self.conv3d(input, dw_weight, dw_bias, dw)?;
        self.conv3d(mid, pw_weight, pw_bias, ConvSpec::pointwise(c, cout))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BatchNormMode,
    ) -> Result<Var> {
        if state.epsilon <= 0.0 {
            return Err(invalid!("batch-norm epsilon must be positive"));
        }
        let x = self.value(input);
        let (n, c, s) = split_ncs(x.shape())?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err!(
                    "batch-norm {name} shape {:?} for {c} channels",
                    self.value(v).shape()
                ));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(shape_err!("batch-norm state has {} channels, input {c}", state.running_mean.len()));
        }
        let xd = x.data();
        let count = (n * s) as f64;
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += xd[(b * c + ch) * s..][..s].iter().sum::<f64>();
                    }
                    mean[ch] = acc / count;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xd[(b * c + ch) * s..][..s]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                    var[ch] = sq / count;
                }
                for ch in 0..c {
                    state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean[ch];
                    state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * var[ch];
                }
                (mean, var)
            }
            BatchNormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[input, gamma, beta],
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(input);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(t, op, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |v| v.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(input))
    }

    /// Softmax over axis 1 at every remaining position.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, s) = split_ncs(x.shape())?;
        let data = kernels::softmax_channels(x.data(), n, c, s);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(input), &[input]))
    }

    /// Trilinear upsampling by integer factors (half-pixel centres, edge clamp).
    pub fn upsample_trilinear(&mut self, input: Var, factor: [usize; 3]) -> Result<Var> {
        if factor.contains(&0) {
            return Err(invalid!("upsample factors must be >= 1, got {factor:?}"));
        }
        let [n, c, d, h, w] = self.value(input).dims5()?;
        let data = kernels::upsample_forward(self.value(input).data(), n * c, [d, h, w], factor);
        let t = Tensor::new(vec![n, c, d * factor[0], h * factor[1], w * factor[2]], data)?;
        Ok(self.push(t, Op::Upsample { input, factor }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(input).dims5()?;
        let s = d * h * w;
        let x = self.value(input).data();
        // shifted by the first sample; constant planes reproduce their value exactly
        let data = (0..n * c)
            .map(|p| {
                let plane = &x[p * s..][..s];
                plane[0] + plane.iter().map(|v| v - plane[0]).sum::<f64>() / s as f64
            })
            .collect();
        let t = Tensor::new(vec![n, c, 1, 1, 1], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
        let s0 = self.value(*first).shape().to_vec();
        let (n, _, s) = split_ncs(&s0)?;
        let mut total = 0;
        for v in inputs {
            let sh = self.value(*v).shape();
            if sh.len() != s0.len() || sh[0] != s0[0] || sh[2..] != s0[2..] {
                return Err(shape_err!("concat operands {s0:?} and {sh:?} differ outside the channel axis"));
            }
            total += sh[1];
        }
        let mut data = Vec::with_capacity(n * total * s);
        for b in 0..n {
            for v in inputs {
                let t = self.value(*v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * s..][..c * s]);
            }
        }
        let mut shape = s0;
        shape[1] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(inputs.to_vec()), inputs))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("elementwise operands {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[N, C, ...]` to `[N, 1, ...]` by averaging channels.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, s) = split_ncs(x.shape())?;
        let mut data = vec![0.0; n * s];
        for b in 0..n {
            let dst = &mut data[b * s..][..s];
            for ch in 0..c {
                for (d, v) in dst.iter_mut().zip(&x.data()[(b * c + ch) * s..][..s]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = 1;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ChannelMean(input), &[input]))
    }

    /// Broadcasts `[N, 1, ...]` to `[N, channels, ...]`.
    pub fn expand_channels(&mut self, input: Var, channels: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, s) = split_ncs(x.shape())?;
        if c != 1 {
            return Err(shape_err!("expand_channels needs a single channel, got {c}"));
        }
        let mut data = Vec::with_capacity(n * channels * s);
        for b in 0..n {
            for _ in 0..channels {
                data.extend_from_slice(&x.data()[b * s..][..s]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[1] = channels;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ExpandChannels(input), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(input), &[input]))
    }

    fn check_target(&self, probs: Var, target: &Tensor) -> Result<(usize, usize, usize)> {
        let q = self.value(probs);
        if q.shape() != target.shape() {
            return Err(shape_err!(
                "prediction {:?} and target {:?} shapes differ",
                q.shape(),
                target.shape()
            ));
        }
        split_ncs(q.shape())
    }

    /// `-(1 / (N C)) sum_i sum_c p log(max(q, floor))` with N the voxel count.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor, floor: f64) -> Result<Var> {
        let (n, c, s) = self.check_target(probs, target)?;
        let q = self.value(probs).data();
        let acc: f64 = q
            .iter()
            .zip(target.data())
            .filter(|(_, &p)| p != 0.0)
            .map(|(&qv, &p)| p * qv.max(floor).ln())
            .sum();
        let loss = -acc / ((n * s * c) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                target: target.data().to_vec(),
                floor,
            },
            &[probs],
        ))
    }

    /// `1 - (2 / C) sum_c [sum_i p q / (sum_i p^2 + q^2 + smooth)]`.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        let (n, c, s) = self.check_target(probs, target)?;
        let (inter, denom) = dice_terms(self.value(probs).data(), target.data(), n, c, s, smooth);
        let ratio: f64 = inter.iter().zip(&denom).map(|(i, d)| i / d).sum();
        let loss = 1.0 - 2.0 / c as f64 * ratio;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                probs,
                target: target.data().to_vec(),
                smooth,
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaves created with
    /// `requires_grad` receive `d loss / d leaf` in their grad slot; such
    /// leaves that do not feed the loss receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            for (var, contribution) in self.node_backward(i, &g) {
                accumulate(&mut grads[var.0], contribution);
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && node.value.grad().is_none() {
                let zeros = vec![0.0; node.value.numel()];
                node.value.set_grad(zeros)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let xt = self.value(*input);
                let [n, _, d, h, w] = xt.shape()[..] else { unreachable!() };
                let shape = node.value.shape();
                let geo = ConvGeometry {
                    n,
                    input: [d, h, w],
                    output: [shape[2], shape[3], shape[4]],
                };
                let want_b = bias.is_some_and(|b| self.wants(b));
                let (gx, gw, gb) = kernels::conv3d_backward(
                    xt.data(),
                    self.value(*weight).data(),
                    g,
                    spec,
                    &geo,
                    self.wants(*input),
                    self.wants(*weight),
                    want_b,
                );
                out.extend(gx.map(|v| (*input, v)));
                out.extend(gw.map(|v| (*weight, v)));
                if let (Some(b), Some(v)) = (bias, gb) {
                    out.push((*b, v));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (n, c, s) = split_ncs(node.value.shape()).expect("validated in forward");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for k in off..off + s {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; g.len()];
                    let m = (n * s) as f64;
                    for ch in 0..c {
                        // d xhat = g * gamma, so its sums are gamma * dbeta and gamma * dgamma
                        let k = gam[ch] * inv_std[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * s;
                            for idx in off..off + s {
                                dx[idx] = match mode {
                                    BatchNormMode::Train => {
                                        k * (g[idx] - dbeta[ch] / m - xhat[idx] * dgamma[ch] / m)
                                    }
                                    BatchNormMode::Eval => k * g[idx],
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                out.push((*x, g.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect()));
            }
            Op::Softmax(x) => {
                let (n, c, s) = split_ncs(node.value.shape()).expect("validated in forward");
                out.push((*x, kernels::softmax_channels_backward(y, g, n, c, s)));
            }
            Op::Upsample { input, factor } => {
                let [n, c, d, h, w] = self.value(*input).shape()[..] else { unreachable!() };
                out.push((*input, kernels::upsample_backward(g, n * c, [d, h, w], *factor)));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let s: usize = xs[2..].iter().product();
                let mut dx = Vec::with_capacity(s * g.len());
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / s as f64, s));
                }
                out.push((*x, dx));
            }
            Op::Concat(inputs) => {
                let (n, total, s) = split_ncs(node.value.shape()).expect("validated in forward");
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(*v).shape()[1];
                    if self.wants(*v) {
                        let mut dx = Vec::with_capacity(n * c * s);
                        for b in 0..n {
                            dx.extend_from_slice(&g[(b * total + offset) * s..][..c * s]);
                        }
                        out.push((*v, dx));
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(bd).map(|(g, v)| g * v).collect()));
                out.push((*b, g.iter().zip(ad).map(|(g, v)| g * v).collect()));
            }
            Op::ChannelMean(x) => {
                let (n, c, s) = split_ncs(self.value(*x).shape()).expect("validated in forward");
                let mut dx = Vec::with_capacity(n * c * s);
                for b in 0..n {
                    for _ in 0..c {
                        dx.extend(g[b * s..][..s].iter().map(|v| v / c as f64));
                    }
                }
                out.push((*x, dx));
            }
            Op::ExpandChannels(x) => {
                let (n, c, s) = split_ncs(node.value.shape()).expect("validated in forward");
                let mut dx = vec![0.0; n * s];
                for b in 0..n {
                    for ch in 0..c {
                        for (d, v) in dx[b * s..][..s].iter_mut().zip(&g[(b * c + ch) * s..][..s]) {
                            *d += v;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
            Op::CrossEntropy { probs, target, floor } => {
                let q = self.value(*probs);
                let (n, c, s) = split_ncs(q.shape()).expect("validated in forward");
                let scale = -g[0] / ((n * s * c) as f64);
                let dq = q
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&qv, &p)| if p != 0.0 && qv > *floor { scale * p / qv } else { 0.0 })
                    .collect();
                out.push((*probs, dq));
            }
            Op::Dice { probs, target, smooth } => {
                let q = self.value(*probs);
                let (n, c, s) = split_ncs(q.shape()).expect("validated in forward");
                let (inter, denom) = dice_terms(q.data(), target, n, c, s, *smooth);
                let scale = -2.0 / c as f64 * g[0];
                let mut dq = vec![0.0; q.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        let (i_c, u_c) = (inter[ch], denom[ch]);
                        for k in off..off + s {
                            dq[k] = scale * (target[k] / u_c - i_c * 2.0 * q.data()[k] / (u_c * u_c));
                        }
                    }
                }
                out.push((*probs, dq));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}

fn dice_terms(q: &[f64], p: &[f64], n: usize, c: usize, s: usize, smooth: f64) -> (Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; c];
    let mut denom = vec![smooth; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for k in off..off + s {
                inter[ch] += p[k] * q[k];
                denom[ch] += p[k] * p[k] + q[k] * q[k];
            }
        }
    }
    (inter, denom)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

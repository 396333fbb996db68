use super::Model;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{BatchNormMode, BatchNormState, ConvSpec, Graph, Tensor, Var};

/// Total downsampling of the encoder; input extents must be multiples.
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Debug)]
pub struct SegmentationOutput {
    /// `[N, 3, D, H, W]` softmax probabilities.
    pub main_probs: Tensor,
    /// Deep-supervision heads at 1/8 and 1/4 resolution.
    pub aux_probs: Vec<Tensor>,
    /// One `[N, 1, ...]` map per decoder stage, coarse to fine.
    pub attention_maps: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// 1/16 resolution.
    pub deep: Tensor,
    /// 1/8, 1/4 and 1/2 resolution, in that order.
    pub skips: [Tensor; 3],
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub attended: Tensor,
    pub map: Tensor,
    pub aux_logits: Option<Tensor>,
}

fn check_input(t: &Tensor) -> Result<[usize; 5]> {
    let dims = t.dims5()?;
    if dims[1] != 1 {
        return Err(shape_err!("network input must have one channel, got {}", dims[1]));
    }
    let ext = [dims[2], dims[3], dims[4]];
    if ext.iter().any(|e| e % DOWNSAMPLE != 0) {
        let padded = ext.map(|e| e.div_ceil(DOWNSAMPLE) * DOWNSAMPLE);
        return Err(shape_err!(
            "extents {ext:?} must be divisible by {DOWNSAMPLE}; pad the volume to {padded:?}"
        ));
    }
    Ok(dims)
}

/// Graph builder over one model's parameters.
struct Net<'m> {
    g: Graph,
    model: &'m Model,
    params: Vec<Var>,
    norms: Vec<BatchNormState>,
    mode: BatchNormMode,
}

impl<'m> Net<'m> {
    fn new(model: &'m Model, mode: BatchNormMode, track_grads: bool) -> Self {
        let mut g = Graph::new();
        let params = model
            .params()
            .iter()
            .map(|p| g.leaf(p.value.clone().with_requires_grad(track_grads)))
            .collect();
        Net {
            g,
            model,
            params,
            norms: model.norms().iter().map(|n| n.state.clone()).collect(),
            mode,
        }
    }

    fn p(&self, name: &str) -> Var {
        self.params[self.model.param_position(name)]
    }

    fn conv(&mut self, x: Var, name: &str, spec: ConvSpec, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = bias.then(|| self.p(&format!("{name}.b")));
        self.g.conv3d(x, w, b, spec)
    }

    fn dwsep(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let dw_w = self.p(&format!("{name}.dw.w"));
        let dw_b = self.p(&format!("{name}.dw.b"));
        let pw_w = self.p(&format!("{name}.pw.w"));
        let pw_b = self.p(&format!("{name}.pw.b"));
        self.g
            .depthwise_separable_conv3d(x, dw_w, Some(dw_b), pw_w, Some(pw_b), dilation)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let idx = self.model.norm_position(name);
        self.g.batch_norm(x, gamma, beta, &mut self.norms[idx], self.mode)
    }

    fn conv_norm_relu(&mut self, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
        let h = self.conv(x, name, spec, false)?;
        let h = self.norm(h, &format!("{name}.bn"))?;
        self.g.relu(h)
    }

    fn res_block(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let h = self.dwsep(x, &format!("{name}.sep1"), dilation)?;
        let h = self.norm(h, &format!("{name}.sep1.bn"))?;
        let h = self.g.relu(h)?;
        let h = self.dwsep(h, &format!("{name}.sep2"), dilation)?;
        let h = self.norm(h, &format!("{name}.sep2.bn"))?;
        let h = self.g.add(h, x)?;
        self.g.relu(h)
    }

    fn channels(&self, v: Var) -> usize {
        self.g.value(v).shape()[1]
    }

    /// Returns (deep, [skip 1/8, skip 1/4, skip 1/2]).
    fn encoder(&mut self, x: Var) -> Result<(Var, [Var; 3])> {
        let stages = self.model.plan().stages;
        let mut h = self.conv_norm_relu(x, "enc.stem", ConvSpec::dense(1, stages[0], 3))?;
        let mut skips = Vec::with_capacity(3);
        for (k, &c) in stages.iter().enumerate() {
            let dilation = if k == 3 { 2 } else { 1 };
            h = self.res_block(h, &format!("enc.stage{}", k + 1), dilation)?;
            if k >= 1 {
                skips.push(h);
            }
            let next = stages.get(k + 1).copied().unwrap_or(c);
            h = self.conv_norm_relu(h, &format!("enc.down{}", k + 1), ConvSpec::dense(c, next, 3).with_stride(2))?;
        }
        Ok((h, [skips[2], skips[1], skips[0]]))
    }

    fn aspp(&mut self, x: Var) -> Result<Var> {
        let c = self.channels(x);
        let a = self.model.plan().aspp_branch;
        let mut branches = vec![self.conv_norm_relu(x, "aspp.b0", ConvSpec::pointwise(c, a))?];
        for (k, &r) in self.model.config().aspp_dilation_rates.clone().iter().enumerate() {
            let spec = ConvSpec::dense(c, a, 3).with_dilation(r);
            branches.push(self.conv_norm_relu(x, &format!("aspp.b{}", k + 1), spec)?);
        }
        let pooled = self.g.global_avg_pool(x)?;
        let pooled = self.conv(pooled, "aspp.pool", ConvSpec::pointwise(c, a), true)?;
        let pooled = self.g.relu(pooled)?;
        let dims = self.g.value(x).dims5()?;
        branches.push(self.g.upsample_trilinear(pooled, [dims[2], dims[3], dims[4]])?);
        let cat = self.g.concat_channels(&branches)?;
        let cin = self.channels(cat);
        self.conv_norm_relu(cat, "aspp.project", ConvSpec::pointwise(cin, c))
    }

    /// Returns (attended, map, aux logits).
    fn attention(&mut self, x: Var, name: &str, aux: bool) -> Result<(Var, Var, Option<Var>)> {
        let c = self.channels(x);
        let s = self.dwsep(x, &format!("{name}.sep"), 1)?;
        let m = self.g.channel_mean(s)?;
        let map = self.g.sigmoid(m)?;
        let e = self.g.expand_channels(map, c)?;
        let attended = self.g.mul(x, e)?;
        let aux = if aux {
            let k = self.model.plan().classes;
            Some(self.conv(s, &format!("{name}.aux"), ConvSpec::pointwise(c, k), true)?)
        } else {
            None
        };
        Ok((attended, map, aux))
    }

    fn decoder_stage(
        &mut self,
        x: Var,
        extra: &[Var],
        factor: usize,
        name: &str,
        cout: usize,
        aux: bool,
    ) -> Result<(Var, Var, Option<Var>)> {
        let up = self.g.upsample_trilinear(x, [factor; 3])?;
        let mut parts = vec![up];
        parts.extend_from_slice(extra);
        let cat = self.g.concat_channels(&parts)?;
        let cin = self.channels(cat);
        let h = self.conv_norm_relu(cat, &format!("{name}.fuse"), ConvSpec::dense(cin, cout, 3))?;
        let h = self.res_block(h, &format!("{name}.res"), 1)?;
        self.attention(h, &format!("{name}.att"), aux)
    }

    fn full(&mut self, input: Var) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let [c1, c2, c3, _] = self.model.plan().stages;
        let (deep, [s8, s4, s2]) = self.encoder(input)?;
        let fused = self.aspp(deep)?;
        let (h, m1, a1) = self.decoder_stage(fused, &[s8], 2, "dec1", c3, true)?;
        let (h, m2, a2) = self.decoder_stage(h, &[s4], 2, "dec2", c2, true)?;
        let s2_full = self.g.upsample_trilinear(s2, [2; 3])?;
        let (h, m3, _) = self.decoder_stage(h, &[s2_full, input], 4, "dec3", c1, false)?;
        let k = self.model.plan().classes;
        let logits = self.conv(h, "head", ConvSpec::pointwise(c1, k), true)?;
        let main = self.g.softmax_channels(logits)?;
        let mut aux = Vec::with_capacity(2);
        for logits in [a1, a2].into_iter().flatten() {
            aux.push(self.g.softmax_channels(logits)?);
        }
        Ok((main, aux, vec![m1, m2, m3]))
    }
}

/// A recorded forward pass, kept for backpropagation.
pub struct ForwardPass {
    pub graph: Graph,
    /// Leaves for the model's parameters, in `Model::params` order.
    pub params: Vec<Var>,
    pub main: Var,
    pub aux: Vec<Var>,
    pub attention: Vec<Var>,
    /// Batch-norm running statistics after this pass (changed in train mode).
    pub norms: Vec<BatchNormState>,
}

impl ForwardPass {
    pub fn run(model: &Model, input: &Tensor, mode: BatchNormMode, track_grads: bool) -> Result<Self> {
        check_input(input)?;
        let mut net = Net::new(model, mode, track_grads);
        let x = net.g.constant(input.clone());
        let (main, aux, attention) = net.full(x)?;
        Ok(ForwardPass {
            graph: net.g,
            params: net.params,
            main,
            aux,
            attention,
            norms: net.norms,
        })
    }

    pub fn output(&self) -> SegmentationOutput {
        SegmentationOutput {
            main_probs: self.graph.value(self.main).clone(),
            aux_probs: self.aux.iter().map(|&v| self.graph.value(v).clone()).collect(),
            attention_maps: self.attention.iter().map(|&v| self.graph.value(v).clone()).collect(),
        }
    }

    /// Parameter gradients after `graph.backward`, zeros where absent.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&v| match self.graph.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.graph.value(v).numel()],
            })
            .collect()
    }
}

/// Inference with running batch-norm statistics.
pub fn forward(model: &Model, input: &Tensor) -> Result<SegmentationOutput> {
    Ok(ForwardPass::run(model, input, BatchNormMode::Eval, false)?.output())
}

pub fn encoder_forward(model: &Model, input: &Tensor) -> Result<EncoderOutput> {
    check_input(input)?;
    let mut net = Net::new(model, BatchNormMode::Eval, false);
    let x = net.g.constant(input.clone());
    let (deep, skips) = net.encoder(x)?;
    Ok(EncoderOutput {
        deep: net.g.value(deep).clone(),
        skips: skips.map(|s| net.g.value(s).clone()),
    })
}

pub fn aspp_forward(model: &Model, deep: &Tensor) -> Result<Tensor> {
    let mut net = Net::new(model, BatchNormMode::Eval, false);
    let x = net.g.constant(deep.clone());
    let out = net.aspp(x)?;
    Ok(net.g.value(out).clone())
}

/// Runs the attention block of decoder stage `stage` (0, 1 or 2). Only the
/// first two stages have auxiliary heads.
pub fn attention_block(model: &Model, stage: usize, features: &Tensor, with_aux: bool) -> Result<AttentionOutput> {
    if stage > 2 {
        return Err(invalid!("decoder stage {stage} does not exist (0..=2)"));
    }
    if with_aux && stage == 2 {
        return Err(invalid!("the full-resolution decoder stage has no auxiliary head"));
    }
    let mut net = Net::new(model, BatchNormMode::Eval, false);
    let x = net.g.constant(features.clone());
    let (attended, map, aux) = net.attention(x, &format!("dec{}.att", stage + 1), with_aux)?;
    Ok(AttentionOutput {
        attended: net.g.value(attended).clone(),
        map: net.g.value(map).clone(),
        aux_logits: aux.map(|v| net.g.value(v).clone()),
    })
}

//! Test-only oracles: finite-difference gradients, brute-force convolution,
//! random tensors. Nothing here calls into the kernels it is used to check
//! except through the public graph API being verified.
#![allow(dead_code)]

use hemiseg::network::{ForwardPass, Model};
use hemiseg::tensor::{BatchNormMode, BatchNormState, ConvSpec, Graph, Tensor, Var};
use hemiseg::train::{supervision_loss, LossConfig};
use std::collections::HashSet;

use hemiseg::volume::{BinaryMask, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values kept at least `gap` away from zero (for kinked ops).
pub fn random_tensor_away_from_zero(rng: &mut TestRng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random probability tensor `[N, C, ...]` (positive, sums to one over C).
pub fn random_probs(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let mut data = vec![0.0; n * c * s];
    for b in 0..n {
        for i in 0..s {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for ch in 0..c {
                data[(b * c + ch) * s + i] = raw[ch] / total;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_one_hot(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let mut data = vec![0.0; n * c * s];
    for b in 0..n {
        for i in 0..s {
            let k = rng.random_range(0..c);
            data[(b * c + k) * s + i] = 1.0;
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_shape5(rng: &mut TestRng) -> [usize; 5] {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    ]
}

/// Direct 7-nested-loop cross-correlation with zero padding.
pub fn naive_conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let [n, cin, d, h, wd] = x.dims5().unwrap();
    let [od, oh, ow] = spec.output_extent([d, h, wd]).unwrap();
    let cout = spec.out_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * cout * od * oh * ow];
    for bi in 0..n {
        for oc in 0..cout {
            let grp = oc / cout_g;
            for z in 0..od {
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icl in 0..cin_g {
                            let ic = grp * cin_g + icl;
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let zi = (z * spec.stride[0] + a * spec.dilation[0]) as isize - spec.padding[0] as isize;
                                        let yi = (y * spec.stride[1] + bb * spec.dilation[1]) as isize - spec.padding[1] as isize;
                                        let xi = (xw * spec.stride[2] + c * spec.dilation[2]) as isize - spec.padding[2] as isize;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= wd as isize {
                                            continue;
                                        }
                                        let xval = xv[(((bi * cin + ic) * d + zi as usize) * h + yi as usize) * wd + xi as usize];
                                        let wval = wv[(((oc * cin_g + icl) * kd + a) * kh + bb) * kw + c];
                                        acc += xval * wval;
                                    }
                                }
                            }
                        }
                        out[(((bi * cout + oc) * od + z) * oh + y) * ow + xw] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, od, oh, ow], out).unwrap()
}

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> hemiseg::Result<Var>>;

/// One randomized gradient-check case: inputs and the op applied to them.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// Relative error `||a - b|| / max(||a||, ||b||)` over sampled coordinates.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares backward() against central differences of `sum(out * R)` for a
/// fixed random `R`. Returns the worst relative error across inputs.
pub fn grad_check(case: &GradCase, rng: &mut TestRng, samples_per_input: usize, step: f64) -> f64 {
    let eval = |inputs: &[Tensor]| -> Tensor {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let probe = eval(&case.inputs);
    let weights = random_tensor(rng, probe.shape());
    let project = |t: &Tensor| -> f64 { t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum() };

    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let r = g.constant(weights.clone());
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        let n = analytic.len();
        let idx: Vec<usize> = if n <= samples_per_input {
            (0..n).collect()
        } else {
            (0..samples_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        let mut a = Vec::new();
        let mut f = Vec::new();
        for &i in &idx {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += step;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= step;
            f.push((project(&eval(&plus)) - project(&eval(&minus))) / (2.0 * step));
            a.push(analytic[i]);
        }
        worst = worst.max(relative_error(&a, &f));
    }
    worst
}

fn random_conv_case(rng: &mut TestRng) -> GradCase {
    let [n, cin, d, h, w] = random_shape5(rng);
    let depthwise = rng.random_bool(0.3);
    let cout = if depthwise { cin } else { rng.random_range(1..=4) };
    let k = if rng.random_bool(0.8) { 3 } else { 1 };
    let mut spec = ConvSpec::dense(cin, cout, k)
        .with_dilation(rng.random_range(1..=2))
        .with_stride(rng.random_range(1..=2));
    if depthwise {
        spec = spec.with_groups(cin);
    }
    let x = random_tensor(rng, &[n, cin, d, h, w]);
    let wt = random_tensor(rng, &spec.weight_shape());
    let b = random_tensor(rng, &[cout]);
    GradCase {
        inputs: vec![x, wt, b],
        build: Box::new(move |g, v| g.conv3d(v[0], v[1], Some(v[2]), spec)),
    }
}

fn random_dwsep_case(rng: &mut TestRng) -> GradCase {
    let [n, cin, d, h, w] = random_shape5(rng);
    let cout = rng.random_range(1..=4);
    let dil = rng.random_range(1..=2);
    GradCase {
        inputs: vec![
            random_tensor(rng, &[n, cin, d, h, w]),
            random_tensor(rng, &[cin, 1, 3, 3, 3]),
            random_tensor(rng, &[cin]),
            random_tensor(rng, &[cout, cin, 1, 1, 1]),
            random_tensor(rng, &[cout]),
        ],
        build: Box::new(move |g, v| g.depthwise_separable_conv3d(v[0], v[1], Some(v[2]), v[3], Some(v[4]), dil)),
    }
}

fn random_bn_case(rng: &mut TestRng, mode: BatchNormMode) -> GradCase {
    let mut shape = random_shape5(rng);
    // need at least two values per channel for a non-degenerate batch variance
    shape[4] = shape[4].max(2);
    let c = shape[1];
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    GradCase {
        inputs: vec![
            random_tensor(rng, &shape),
            random_tensor(rng, &[c]),
            random_tensor(rng, &[c]),
        ],
        build: Box::new(move |g, v| {
            let mut state = BatchNormState::new(c);
            state.running_mean = mean.clone();
            state.running_var = var.clone();
            g.batch_norm(v[0], v[1], v[2], &mut state, mode)
        }),
    }
}

fn unary_case(rng: &mut TestRng, kind: &'static str) -> GradCase {
    let shape = random_shape5(rng);
    let x = if kind == "relu" {
        random_tensor_away_from_zero(rng, &shape, 1e-3)
    } else {
        random_tensor(rng, &shape)
    };
    let channels = rng.random_range(1..=4);
    GradCase {
        inputs: vec![x],
        build: Box::new(move |g, v| match kind {
            "relu" => g.relu(v[0]),
            "sigmoid" => g.sigmoid(v[0]),
            "softmax" => g.softmax_channels(v[0]),
            "global_avg_pool" => g.global_avg_pool(v[0]),
            "channel_mean" => g.channel_mean(v[0]),
            "expand_channels" => {
                let m = g.channel_mean(v[0])?;
                g.expand_channels(m, channels)
            }
            "sum" => g.sum(v[0]),
            _ => unreachable!(),
        }),
    }
}

fn upsample_case(rng: &mut TestRng) -> GradCase {
    let mut shape = random_shape5(rng);
    for s in &mut shape[2..] {
        *s = (*s).min(4);
    }
    let factor = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    GradCase {
        inputs: vec![random_tensor(rng, &shape)],
        build: Box::new(move |g, v| g.upsample_trilinear(v[0], factor)),
    }
}

fn concat_case(rng: &mut TestRng) -> GradCase {
    let [n, _, d, h, w] = random_shape5(rng);
    let parts = rng.random_range(2..=3);
    let inputs = (0..parts)
        .map(|_| {
            let c = rng.random_range(1..=3);
            random_tensor(rng, &[n, c, d, h, w])
        })
        .collect();
    GradCase {
        inputs,
        build: Box::new(|g, v| g.concat_channels(v)),
    }
}

fn binary_case(rng: &mut TestRng, mul: bool) -> GradCase {
    let shape = random_shape5(rng);
    GradCase {
        inputs: vec![random_tensor(rng, &shape), random_tensor(rng, &shape)],
        build: Box::new(move |g, v| if mul { g.mul(v[0], v[1]) } else { g.add(v[0], v[1]) }),
    }
}

fn loss_case(rng: &mut TestRng, dice: bool) -> GradCase {
    let [n, _, d, h, w] = random_shape5(rng);
    let shape = [n, 3, d, h, w];
    let target = random_one_hot(rng, &shape);
    GradCase {
        inputs: vec![random_probs(rng, &shape)],
        build: Box::new(move |g, v| {
            if dice {
                g.dice_loss(v[0], &target, 1e-6)
            } else {
                g.cross_entropy(v[0], &target, 1e-7)
            }
        }),
    }
}

/// Every differentiable primitive with a randomized case generator.
pub fn primitive_case_generators() -> Vec<(&'static str, fn(&mut TestRng) -> GradCase)> {
    vec![
        ("conv3d", random_conv_case),
        ("depthwise_separable_conv3d", random_dwsep_case),
        ("batch_norm_train", |r| random_bn_case(r, BatchNormMode::Train)),
        ("batch_norm_eval", |r| random_bn_case(r, BatchNormMode::Eval)),
        ("relu", |r| unary_case(r, "relu")),
        ("sigmoid", |r| unary_case(r, "sigmoid")),
        ("softmax_channels", |r| unary_case(r, "softmax")),
        ("upsample_trilinear", upsample_case),
        ("global_avg_pool", |r| unary_case(r, "global_avg_pool")),
        ("concat_channels", concat_case),
        ("add", |r| binary_case(r, false)),
        ("mul", |r| binary_case(r, true)),
        ("channel_mean", |r| unary_case(r, "channel_mean")),
        ("expand_channels", |r| unary_case(r, "expand_channels")),
        ("sum", |r| unary_case(r, "sum")),
        ("cross_entropy", |r| loss_case(r, false)),
        ("dice_loss", |r| loss_case(r, true)),
    ]
}

/// Central-difference check of the full deep-supervision loss with respect
/// to a random `fraction` of the model's scalar parameters. Returns the
/// relative error over the sampled coordinates.
pub fn network_grad_check(
    model: &Model,
    input: &Tensor,
    labels: &LabelVolume,
    mode: BatchNormMode,
    fraction: f64,
    step: f64,
    rng: &mut TestRng,
) -> f64 {
    let cfg = LossConfig::default();
    let loss_of = |m: &Model| -> f64 {
        let mut pass = ForwardPass::run(m, input, mode, false).unwrap();
        let mut outs = vec![pass.main];
        outs.extend(&pass.aux);
        supervision_loss(&mut pass.graph, &outs, labels, &cfg).unwrap().1.total
    };
    let mut pass = ForwardPass::run(model, input, mode, true).unwrap();
    let mut outs = vec![pass.main];
    outs.extend(&pass.aux);
    let (loss, _) = supervision_loss(&mut pass.graph, &outs, labels, &cfg).unwrap();
    pass.graph.backward(loss).unwrap();
    let grads = pass.param_grads();

    let coords: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.numel()).map(move |i| (p, i)))
        .collect();
    let k = ((coords.len() as f64 * fraction).ceil() as usize).max(1);
    let picked = rand::seq::index::sample(rng, coords.len(), k);
    let mut analytic = Vec::with_capacity(k);
    let mut numeric = Vec::with_capacity(k);
    let mut m = model.clone();
    for j in picked.iter() {
        let (p, i) = coords[j];
        let orig = m.params()[p].value.data()[i];
        m.params_mut()[p].value.data_mut()[i] = orig + step;
        let plus = loss_of(&m);
        m.params_mut()[p].value.data_mut()[i] = orig - step;
        let minus = loss_of(&m);
        m.params_mut()[p].value.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
        analytic.push(grads[p][i]);
    }
    relative_error(&analytic, &numeric)
}

/// Random mask with each voxel set with probability `p`.
pub fn random_mask(rng: &mut TestRng, extents: [usize; 3], spacing: [f64; 3], p: f64) -> BinaryMask {
    let n = extents.iter().product();
    BinaryMask::new(extents, spacing, (0..n).map(|_| rng.random_bool(p)).collect()).unwrap()
}

pub fn voxel_set(m: &BinaryMask) -> HashSet<[i64; 3]> {
    (0..m.voxels().len())
        .filter(|&i| m.voxels()[i])
        .map(|i| m.coords(i).map(|c| c as i64))
        .collect()
}

/// Set members with a face neighbour that is not a member (anything
/// outside the grid is not a member).
pub fn oracle_boundary(m: &BinaryMask) -> Vec<[i64; 3]> {
    let set = voxel_set(m);
    let mut out: Vec<[i64; 3]> = set
        .iter()
        .filter(|v| {
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                .iter()
                .any(|o| !set.contains(&[v[0] + o[0], v[1] + o[1], v[2] + o[2]]))
        })
        .copied()
        .collect();
    out.sort();
    out
}

/// Exhaustive all-pairs symmetric Hausdorff distance between boundary sets.
pub fn oracle_hausdorff(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let dist = |p: &[i64; 3], q: &[i64; 3]| {
        let dz = (p[0] - q[0]) as f64 * spacing[0];
        let dy = (p[1] - q[1]) as f64 * spacing[1];
        let dx = (p[2] - q[2]) as f64 * spacing[2];
        (dz * dz + dy * dy + dx * dx).sqrt()
    };
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&ba, &bb).max(directed(&bb, &ba))
}

pub fn oracle_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (sa, sb) = (voxel_set(a), voxel_set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// `(precision, recall)` from set sizes, 0 for an empty denominator.
pub fn oracle_precision_recall(pred: &BinaryMask, gt: &BinaryMask) -> (f64, f64) {
    let (sp, sg) = (voxel_set(pred), voxel_set(gt));
    let tp = sp.intersection(&sg).count();
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (ratio(tp, sp.len()), ratio(tp, sg.len()))
}

/// Brute-force midline: brain voxels with an in-plane 4-neighbour of the
/// other hemisphere class.
pub fn oracle_midline(labels: &LabelVolume) -> Vec<bool> {
    let [d, h, w] = labels.extents();
    let l = labels.labels();
    let at = |z: usize, y: i64, x: i64| -> Option<u8> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| l[(z * h + y as usize) * w + x as usize])
    };
    let mut out = vec![false; l.len()];
    for z in 0..d {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let c = at(z, y, x).unwrap();
                if c == 0 {
                    continue;
                }
                let other = 3 - c;
                out[(z * h + y as usize) * w + x as usize] = [(0, 1), (0, -1), (1, 0), (-1, 0)]
                    .iter()
                    .any(|(dy, dx)| at(z, y + dy, x + dx) == Some(other));
            }
        }
    }
    out
}

/// In-plane city-block distance from each voxel to the nearest seed in its
/// slice, by exhaustive search. `usize::MAX` when the slice has no seed.
pub fn oracle_l1_distance(extents: [usize; 3], seeds: &[bool]) -> Vec<usize> {
    let [d, h, w] = extents;
    let mut out = vec![usize::MAX; seeds.len()];
    for z in 0..d {
        let pts: Vec<(usize, usize)> = (0..h * w)
            .filter(|&i| seeds[z * h * w + i])
            .map(|i| (i / w, i % w))
            .collect();
        for y in 0..h {
            for x in 0..w {
                out[(z * h + y) * w + x] = pts
                    .iter()
                    .map(|&(py, px)| py.abs_diff(y) + px.abs_diff(x))
                    .min()
                    .unwrap_or(usize::MAX);
            }
        }
    }
    out
}

/// Per-class Dice restricted to `band`, by set arithmetic.
pub fn oracle_band_dice(pred: &LabelVolume, gt: &LabelVolume, band: &[bool], class: u8) -> f64 {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for ((&p, &g), &b) in pred.labels().iter().zip(gt.labels()).zip(band) {
        if !b {
            continue;
        }
        np += (p == class) as usize;
        ng += (g == class) as usize;
        inter += (p == class && g == class) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

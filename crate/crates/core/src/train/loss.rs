use crate::error::{shape_err, Result};
use crate::network::SegmentationOutput;
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::{LabelVolume, NUM_CLASSES};

/// `[1, 3, D, H, W]` exact one-hot encoding of a label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget {
    tensor: Tensor,
}

impl OneHotTarget {
    pub fn from_labels(labels: &LabelVolume) -> Result<Self> {
        let [d, h, w] = labels.extents();
        Self::from_raw([d, h, w], labels.labels())
    }

    fn from_raw(extents: [usize; 3], labels: &[u8]) -> Result<Self> {
        let s = labels.len();
        let mut data = vec![0.0; NUM_CLASSES * s];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * s + i] = 1.0;
        }
        let [d, h, w] = extents;
        Ok(OneHotTarget {
            tensor: Tensor::new(vec![1, NUM_CLASSES, d, h, w], data)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[2], s[3], s[4]]
    }
}

/// Majority label over each `factor`^3 block; ties go to the lower class.
pub fn downsample_labels(labels: &LabelVolume, factor: usize) -> Result<OneHotTarget> {
    let [d, h, w] = labels.extents();
    if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("extents {:?} are not divisible by factor {factor}", labels.extents()));
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let src = labels.labels();
    let mut out = Vec::with_capacity(od * oh * ow);
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let mut counts = [0usize; NUM_CLASSES];
                for dz in 0..factor {
                    for dy in 0..factor {
                        let row = ((z * factor + dz) * h + y * factor + dy) * w + x * factor;
                        for &l in &src[row..row + factor] {
                            counts[l as usize] += 1;
                        }
                    }
                }
                let mut best = 0;
                for k in 1..NUM_CLASSES {
                    if counts[k] > counts[best] {
                        best = k;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    OneHotTarget::from_raw([od, oh, ow], &out)
}

/// Loss knobs that are not optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Lower clamp for log arguments in the cross entropy.
    pub clamp_floor: f64,
    /// Added to each Dice denominator.
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clamp_floor: 1e-7,
            dice_smooth: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Cross entropy summed over outputs.
    pub ce: f64,
    /// Dice loss summed over outputs.
    pub dice: f64,
    /// (cross entropy, dice) per output, main head first.
    pub terms: Vec<(f64, f64)>,
}

pub fn cross_entropy(q: &Tensor, p: &OneHotTarget, clamp_floor: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(q.clone());
    let l = g.cross_entropy(v, p.tensor(), clamp_floor)?;
    Ok(g.value(l).data()[0])
}

pub fn dice_loss(q: &Tensor, p: &OneHotTarget, smooth: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(q.clone());
    let l = g.dice_loss(v, p.tensor(), smooth)?;
    Ok(g.value(l).data()[0])
}

fn scale_factor(labels: [usize; 3], out: &[usize]) -> Result<usize> {
    let ext = [out[2], out[3], out[4]];
    let f = labels[0] / ext[0].max(1);
    if f == 0 || (0..3).any(|k| ext[k] * f != labels[k]) {
        return Err(shape_err!(
            "output extents {ext:?} are not a uniform downsampling of label extents {labels:?}"
        ));
    }
    Ok(f)
}

/// Unweighted sum of cross entropy + Dice over `outputs` (main head first,
/// at full resolution), each against labels downsampled to its resolution.
pub fn supervision_loss(
    g: &mut Graph,
    outputs: &[Var],
    labels: &LabelVolume,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut parts = LossBreakdown::default();
    for (k, &out) in outputs.iter().enumerate() {
        let shape = g.value(out).dims5()?;
        if shape[0] != 1 {
            return Err(shape_err!("supervision expects a batch of one, got {}", shape[0]));
        }
        let f = scale_factor(labels.extents(), &shape)?;
        if k == 0 && f != 1 {
            return Err(shape_err!("main output must be at full resolution, got factor {f}"));
        }
        let target = if f == 1 {
            OneHotTarget::from_labels(labels)?
        } else {
            downsample_labels(labels, f)?
        };
        let ce = g.cross_entropy(out, target.tensor(), cfg.clamp_floor)?;
        let dice = g.dice_loss(out, target.tensor(), cfg.dice_smooth)?;
        let (cv, dv) = (g.value(ce).data()[0], g.value(dice).data()[0]);
        parts.terms.push((cv, dv));
        parts.ce += cv;
        parts.dice += dv;
        let term = g.add(ce, dice)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| shape_err!("no outputs to supervise"))?;
    parts.total = g.value(total).data()[0];
    Ok((total, parts))
}

/// Value of the deep-supervision objective for a finished forward pass.
pub fn deep_supervision_loss(
    output: &SegmentationOutput,
    labels: &LabelVolume,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut vars = vec![g.constant(output.main_probs.clone())];
    vars.extend(output.aux_probs.iter().map(|t| g.constant(t.clone())));
    Ok(supervision_loss(&mut g, &vars, labels, cfg)?.1)
}

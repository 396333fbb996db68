//! Parameter layout: every named tensor the network owns, in a fixed order.
//! The forward pass refers to the same names; `count_parameters` is the sum
//! over this list, so it depends on the configuration alone.

use super::NetworkConfig;
use crate::error::Result;
use crate::tensor::ConvSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Channel widths derived from the configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelPlan {
    /// Encoder stage widths at 1, 1/2, 1/4 and 1/8 resolution.
    pub stages: [usize; 4],
    /// Width of each ASPP branch.
    pub aspp_branch: usize,
    pub classes: usize,
}

impl ChannelPlan {
    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = [0; 4];
        for (k, slot) in stages.iter_mut().enumerate() {
            *slot = cfg.scaled_channels(1 << k)?;
        }
        Ok(ChannelPlan {
            stages,
            aspp_branch: stages[3],
            classes: cfg.num_classes,
        })
    }
}

#[derive(Default)]
pub(crate) struct Layout {
    pub params: Vec<ParamSpec>,
    /// Batch-norm layers and their channel counts.
    pub norms: Vec<(String, usize)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.params.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, spec: &ConvSpec, bias: bool) {
        let shape = spec.weight_shape().to_vec();
        let fan_in = shape[1..].iter().product();
        self.push(format!("{name}.w"), shape, Init::He { fan_in });
        if bias {
            self.push(format!("{name}.b"), vec![spec.out_channels], Init::Zeros);
        }
    }

    fn dwsep(&mut self, name: &str, c: usize, cout: usize) {
        self.conv(&format!("{name}.dw"), &ConvSpec::depthwise(c, 3), true);
        self.conv(&format!("{name}.pw"), &ConvSpec::pointwise(c, cout), true);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        self.push(format!("{name}.beta"), vec![c], Init::Zeros);
        self.norms.push((name.to_string(), c));
    }

    fn conv_norm(&mut self, name: &str, spec: &ConvSpec) {
        self.conv(name, spec, false);
        self.norm(&format!("{name}.bn"), spec.out_channels);
    }

    fn res_block(&mut self, name: &str, c: usize) {
        self.dwsep(&format!("{name}.sep1"), c, c);
        self.norm(&format!("{name}.sep1.bn"), c);
        self.dwsep(&format!("{name}.sep2"), c, c);
        self.norm(&format!("{name}.sep2.bn"), c);
    }

    fn attention(&mut self, name: &str, c: usize, aux_classes: Option<usize>) {
        self.dwsep(&format!("{name}.sep"), c, c);
        if let Some(k) = aux_classes {
            self.conv(&format!("{name}.aux"), &ConvSpec::pointwise(c, k), true);
        }
    }
}

pub(crate) fn build_layout(cfg: &NetworkConfig) -> Result<Layout> {
    let plan = ChannelPlan::from_config(cfg)?;
    let [c1, c2, c3, c4] = plan.stages;
    let a = plan.aspp_branch;
    let mut l = Layout::default();

    l.conv_norm("enc.stem", &ConvSpec::dense(1, c1, 3));
    for (k, &c) in plan.stages.iter().enumerate() {
        l.res_block(&format!("enc.stage{}", k + 1), c);
        let next = plan.stages.get(k + 1).copied().unwrap_or(c);
        l.conv_norm(&format!("enc.down{}", k + 1), &ConvSpec::dense(c, next, 3).with_stride(2));
    }

    l.conv_norm("aspp.b0", &ConvSpec::pointwise(c4, a));
    for (k, &r) in cfg.aspp_dilation_rates.iter().enumerate() {
        l.conv_norm(&format!("aspp.b{}", k + 1), &ConvSpec::dense(c4, a, 3).with_dilation(r));
    }
    l.conv("aspp.pool", &ConvSpec::pointwise(c4, a), true);
    let branches = cfg.aspp_dilation_rates.len() + 2;
    l.conv_norm("aspp.project", &ConvSpec::pointwise(branches * a, c4));

    // Stage inputs: upsampled features concatenated with the skip (and, at
    // full resolution, the input volume itself).
    let stages = [
        ("dec1", c4 + c4, c3, true),
        ("dec2", c3 + c3, c2, true),
        ("dec3", c2 + c2 + 1, c1, false),
    ];
    for (name, cin, cout, aux) in stages {
        l.conv_norm(&format!("{name}.fuse"), &ConvSpec::dense(cin, cout, 3));
        l.res_block(&format!("{name}.res"), cout);
        l.attention(&format!("{name}.att"), cout, aux.then_some(plan.classes));
    }
    l.conv("head", &ConvSpec::pointwise(c1, plan.classes), true);
    Ok(l)
}

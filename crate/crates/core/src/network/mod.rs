//! Encoder / ASPP / attention-decoder segmentation network with deep
//! supervision heads, plus decoding and ensembling of its outputs.

mod checkpoint;
mod forward;
mod layout;
mod predict;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    aspp_forward, attention_block, encoder_forward, forward, AttentionOutput, EncoderOutput, ForwardPass,
    SegmentationOutput, DOWNSAMPLE,
};
pub use layout::ChannelPlan;
pub use predict::{argmax_labels, ensemble_predict, ensemble_vote, segment, segment_standardized};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{BatchNormState, Tensor};
use layout::{build_layout, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Fraction of the full-width filter counts, in (0, 1].
    pub filter_rate: f64,
    /// Width of the first encoder stage at rate 1.
    pub base_filters: usize,
    pub num_classes: usize,
    pub aspp_dilation_rates: Vec<usize>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            filter_rate: 0.125,
            base_filters: 32,
            num_classes: 3,
            aspp_dilation_rates: vec![2, 4, 6],
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.filter_rate > 0.0 && self.filter_rate <= 1.0) {
            return Err(invalid!("filter_rate must lie in (0, 1], got {}", self.filter_rate));
        }
        if self.base_filters == 0 {
            return Err(invalid!("base_filters must be positive"));
        }
        if self.num_classes != 3 {
            return Err(invalid!(
                "num_classes must be 3 (background, ipsilateral, contralateral), got {}",
                self.num_classes
            ));
        }
        if self.aspp_dilation_rates.is_empty() || self.aspp_dilation_rates.contains(&0) {
            return Err(invalid!(
                "aspp_dilation_rates must be a non-empty list of positive ints, got {:?}",
                self.aspp_dilation_rates
            ));
        }
        Ok(())
    }

    /// `round(base_filters * multiplier * filter_rate)`; zero is an error.
    pub fn scaled_channels(&self, multiplier: usize) -> Result<usize> {
        let c = (self.base_filters as f64 * multiplier as f64 * self.filter_rate).round() as usize;
        if c == 0 {
            return Err(invalid!(
                "filter_rate {} leaves {}x{} filters with zero channels",
                self.filter_rate,
                self.base_filters,
                multiplier
            ));
        }
        Ok(c)
    }

    pub fn encoder_stage_channels(&self) -> Result<[usize; 4]> {
        Ok(ChannelPlan::from_config(self)?.stages)
    }
}

/// Number of trainable scalars (running batch-norm statistics excluded).
pub fn count_parameters(cfg: &NetworkConfig) -> Result<usize> {
    Ok(build_layout(cfg)?.params.iter().map(|p| p.shape.iter().product::<usize>()).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub state: BatchNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    plan: ChannelPlan,
    params: Vec<Param>,
    norms: Vec<NormLayer>,
    param_index: HashMap<String, usize>,
    norm_index: HashMap<String, usize>,
}

pub fn build_model(cfg: &NetworkConfig) -> Result<Model> {
    Model::new(cfg)
}

impl Model {
    /// He-normal conv weights, zero biases, unit gamma, zero beta; drawn in
    /// layout order from a stream seeded by `cfg.seed`.
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        let layout = build_layout(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::with_capacity(layout.params.len());
        for spec in &layout.params {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::He { fan_in } => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.push(Param {
                name: spec.name.clone(),
                value: Tensor::new(spec.shape.clone(), data)?,
            });
        }
        let norms = layout
            .norms
            .iter()
            .map(|(name, c)| NormLayer {
                name: name.clone(),
                state: BatchNormState::new(*c),
            })
            .collect();
        Model::assemble(cfg.clone(), params, norms)
    }

    fn assemble(config: NetworkConfig, params: Vec<Param>, norms: Vec<NormLayer>) -> Result<Self> {
        let plan = ChannelPlan::from_config(&config)?;
        let param_index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let norm_index = norms.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
        Ok(Model {
            config,
            plan,
            params,
            norms,
            param_index,
            norm_index,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer] {
        &mut self.norms
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub(crate) fn param_position(&self, name: &str) -> usize {
        self.param_index[name]
    }

    pub(crate) fn norm_position(&self, name: &str) -> usize {
        self.norm_index[name]
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
            && self
                .norms
                .iter()
                .all(|n| n.state.running_mean.iter().chain(&n.state.running_var).all(|v| v.is_finite()))
    }
}

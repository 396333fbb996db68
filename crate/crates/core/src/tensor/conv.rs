use crate::error::{invalid, Result};

/// Geometry of a 3D convolution. Cross-correlation semantics with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Dense cubic kernel with "same" padding at stride 1.
    pub fn dense(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [1; 3],
            dilation: [1; 3],
            padding: [k / 2; 3],
            groups: 1,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::dense(in_channels, out_channels, 1)
    }

    pub fn depthwise(channels: usize, k: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..ConvSpec::dense(channels, channels, k)
        }
    }

    /// Sets the dilation and re-derives "same" padding for it.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = [dilation; 3];
        for a in 0..3 {
            self.padding[a] = dilation * (self.kernel[a] - 1) / 2;
        }
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride; 3];
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = [padding; 3];
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(invalid!("channel and group counts must be positive: {self:?}"));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(invalid!(
                "groups={} must divide in_channels={} and out_channels={}",
                self.groups,
                self.in_channels,
                self.out_channels
            ));
        }
        for a in 0..3 {
            if self.kernel[a].is_multiple_of(2) {
                return Err(invalid!("kernel extents must be odd: {:?}", self.kernel));
            }
            if self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(invalid!("stride and dilation must be >= 1: {self:?}"));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn param_count(&self, bias: bool) -> usize {
        self.weight_shape().iter().product::<usize>() + if bias { self.out_channels } else { 0 }
    }

    /// `floor((in + 2 pad - dil (k - 1) - 1) / stride) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            let reach = self.dilation[a] * (self.kernel[a] - 1) + 1;
            if span < reach {
                return Err(invalid!(
                    "convolution output extent along axis {a} is not positive \
                     (input {}, padding {}, kernel {}, dilation {})",
                    input[a],
                    self.padding[a],
                    self.kernel[a],
                    self.dilation[a]
                ));
            }
            out[a] = (span - reach) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

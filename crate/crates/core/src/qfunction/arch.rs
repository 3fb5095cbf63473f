use serde::{Deserialize, Serialize};

use super::NetError;
use crate::gridworld::Action;
use crate::pomdp::OBS_CHANNELS;

/// Side length of every convolution kernel.
pub const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub stride: usize,
}

fn default_kernel() -> usize {
    KERNEL
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    /// Observation side M.
    pub input_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub fc_width: usize,
    #[serde(default = "default_actions")]
    pub num_actions: usize,
}

fn default_channels() -> usize {
    OBS_CHANNELS
}

fn default_actions() -> usize {
    Action::COUNT
}

impl NetArch {
    /// Conv(16, s2) → Conv(32, s2) → FC 64 → 9.
    pub fn default_for(input_size: usize) -> Self {
        Self {
            input_size,
            in_channels: OBS_CHANNELS,
            convs: vec![
                ConvSpec { filters: 16, kernel: KERNEL, stride: 2 },
                ConvSpec { filters: 32, kernel: KERNEL, stride: 2 },
            ],
            fc_width: 64,
            num_actions: Action::COUNT,
        }
    }

    /// Reduced architecture for gradient checks: an 8×8 input, two stride-1
    /// convolutions and a narrow dense layer.
    pub fn tiny() -> Self {
        Self {
            input_size: 8,
            in_channels: OBS_CHANNELS,
            convs: vec![
                ConvSpec { filters: 3, kernel: KERNEL, stride: 1 },
                ConvSpec { filters: 4, kernel: KERNEL, stride: 1 },
            ],
            fc_width: 8,
            num_actions: Action::COUNT,
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_size * self.input_size
    }

    /// Layer geometry and parameter offsets.
    pub fn plan(&self) -> Result<Plan, NetError> {
        let bad = |m: String| Err(NetError::InvalidArch(m));
        if self.num_actions != Action::COUNT {
            return bad(format!("head must have {} outputs", Action::COUNT));
        }
        if self.in_channels == 0 || self.input_size == 0 || self.fc_width == 0 {
            return bad("zero-sized layer".into());
        }
        let mut offset = 0;
        let mut channels = self.in_channels;
        let mut size = self.input_size;
        let mut convs = Vec::with_capacity(self.convs.len());
        for (i, spec) in self.convs.iter().enumerate() {
            if spec.kernel != KERNEL {
                return bad(format!("conv {i}: kernel must be {KERNEL}×{KERNEL}"));
            }
            if spec.filters == 0 || spec.stride == 0 {
                return bad(format!("conv {i}: filters and stride must be positive"));
            }
            if size < spec.kernel {
                return bad(format!("conv {i}: input {size}×{size} smaller than kernel"));
            }
            let out_size = (size - spec.kernel) / spec.stride + 1;
            let w_len = spec.filters * channels * spec.kernel * spec.kernel;
            convs.push(ConvGeom {
                in_channels: channels,
                in_size: size,
                out_channels: spec.filters,
                out_size,
                kernel: spec.kernel,
                stride: spec.stride,
                w_off: offset,
                b_off: offset + w_len,
            });
            offset += w_len + spec.filters;
            channels = spec.filters;
            size = out_size;
        }
        let flat = channels * size * size;
        let fc =
            DenseGeom { inputs: flat, outputs: self.fc_width, w_off: offset, b_off: offset + flat * self.fc_width };
        offset += flat * self.fc_width + self.fc_width;
        let head = DenseGeom {
            inputs: self.fc_width,
            outputs: self.num_actions,
            w_off: offset,
            b_off: offset + self.fc_width * self.num_actions,
        };
        offset += self.fc_width * self.num_actions + self.num_actions;
        Ok(Plan { convs, fc, head, param_count: offset })
    }

    pub fn param_count(&self) -> Result<usize, NetError> {
        Ok(self.plan()?.param_count)
    }

    /// Compact description used in error messages.
    pub fn describe(&self) -> String {
        let convs: Vec<String> =
            self.convs.iter().map(|c| format!("conv{}x{}/s{}", c.filters, c.kernel, c.stride)).collect();
        format!(
            "{}x{}x{} {} fc{} head{}",
            self.in_channels,
            self.input_size,
            self.input_size,
            convs.join(" "),
            self.fc_width,
            self.num_actions
        )
    }
}

/// Weights are `[out][in][ky][kx]`, followed by one bias per filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_size: usize,
    pub out_channels: usize,
    pub out_size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_size * self.in_size
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_size * self.out_size
    }

    pub fn w_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Weights are `[out][in]`, followed by one bias per output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseGeom {
    pub inputs: usize,
    pub outputs: usize,
    pub w_off: usize,
    pub b_off: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub convs: Vec<ConvGeom>,
    pub fc: DenseGeom,
    pub head: DenseGeom,
    pub param_count: usize,
}

impl Plan {
    /// (weight offset, weight len, bias offset, bias len) per layer, in
    /// declaration order.
    pub fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out: Vec<_> = self.convs.iter().map(|c| (c.w_off, c.w_len(), c.b_off, c.out_channels)).collect();
        for d in [&self.fc, &self.head] {
            out.push((d.w_off, d.inputs * d.outputs, d.b_off, d.outputs));
        }
        out
    }
}

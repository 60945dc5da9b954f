//! Same-padded 2-D convolutions (regular, grouped, depthwise-separable),
//! transposed-convolution upsampling and bilinear upsampling.

pub mod kernels;

use rand::Rng;

use crate::error::{Result, WauError};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvVariant {
    Regular,
    Grouped(usize),
    DepthwiseSeparable,
}

impl ConvVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(ConvVariant::Regular),
            "depthwise_separable" => Ok(ConvVariant::DepthwiseSeparable),
            other => {
                let g = other
                    .strip_prefix("grouped:")
                    .and_then(|g| g.parse::<usize>().ok())
                    .filter(|&g| g >= 1)
                    .ok_or_else(|| {
                        WauError::Config(format!(
                            "unknown conv type `{other}` (regular | grouped:G | depthwise_separable)"
                        ))
                    })?;
                Ok(ConvVariant::Grouped(g))
            }
        }
    }
}

impl std::fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConvVariant::Regular => f.write_str("regular"),
            ConvVariant::Grouped(g) => write!(f, "grouped:{g}"),
            ConvVariant::DepthwiseSeparable => f.write_str("depthwise_separable"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub variant: ConvVariant,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn regular(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            variant: ConvVariant::Regular,
            kernel,
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn with_variant(mut self, variant: ConvVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(WauError::Config(format!(
                "conv kernel must be odd for symmetric same padding, got {}",
                self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(WauError::Config("conv channels must be positive".into()));
        }
        if let ConvVariant::Grouped(g) = self.variant {
            if g == 0 || !self.in_channels.is_multiple_of(g) || !self.out_channels.is_multiple_of(g) {
                return Err(WauError::Config(format!(
                    "grouped conv: {g} groups must divide in {} and out {} channels",
                    self.in_channels, self.out_channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Kernels {
    Grouped { weight: ParamId, groups: usize },
    Separable { depthwise: ParamId, pointwise: ParamId },
}

/// A "same"-padded stride-1 convolution layer bound to a parameter store.
#[derive(Clone, Debug)]
pub struct Conv2d {
    spec: ConvSpec,
    kernels: Kernels,
    bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let kernels = match spec.variant {
            ConvVariant::Regular | ConvVariant::Grouped(_) => {
                let groups = match spec.variant {
                    ConvVariant::Grouped(g) => g,
                    _ => 1,
                };
                let fan_in = cin / groups * k * k;
                let weight = store.add_uniform(format!("{name}.weight"), Shape::new(cout, cin / groups, k, k), fan_in, rng);
                Kernels::Grouped { weight, groups }
            }
            ConvVariant::DepthwiseSeparable => {
                let depthwise = store.add_uniform(format!("{name}.depthwise"), Shape::new(cin, 1, k, k), k * k, rng);
                let pointwise = store.add_uniform(format!("{name}.pointwise"), Shape::new(cout, cin, 1, 1), cin, rng);
                Kernels::Separable { depthwise, pointwise }
            }
        };
        let bias = spec.bias.then(|| {
            let fan_in = match spec.variant {
                ConvVariant::Regular => cin * k * k,
                ConvVariant::Grouped(g) => cin / g * k * k,
                ConvVariant::DepthwiseSeparable => cin,
            };
            store.add_uniform(format!("{name}.bias"), Shape::new(1, cout, 1, 1), fan_in, rng)
        });
        Ok(Conv2d { spec, kernels, bias })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    /// Kernel parameters in application order (one for regular/grouped,
    /// depthwise then pointwise for separable).
    pub fn kernel_ids(&self) -> Vec<ParamId> {
        match self.kernels {
            Kernels::Grouped { weight, .. } => vec![weight],
            Kernels::Separable { depthwise, pointwise } => vec![depthwise, pointwise],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.kernel_ids();
        ids.extend(self.bias);
        ids
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.spec.in_channels {
            return Err(WauError::dim(
                "conv2d",
                format!("input has {c} channels, layer expects {}", self.spec.in_channels),
            ));
        }
        let bias = self.bias.map(|b| g.param(b)).transpose()?;
        match self.kernels {
            Kernels::Grouped { weight, groups } => {
                let w = g.param(weight)?;
                g.conv2d(x, w, bias, groups)
            }
            Kernels::Separable { depthwise, pointwise } => {
                let dw = g.param(depthwise)?;
                let pw = g.param(pointwise)?;
                let mid = g.conv2d(x, dw, None, self.spec.in_channels)?;
                g.conv2d(mid, pw, bias, 1)
            }
        }
    }
}

/// Learned `n`x upsampler: transposed conv with kernel `2n`, stride `n`.
#[derive(Clone, Debug)]
pub struct TransposedUpsample {
    factor: usize,
    weight: ParamId,
    bias: ParamId,
}

impl TransposedUpsample {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if factor < 2 {
            return Err(WauError::contract(
                "transposed_conv_upsample",
                format!("factor must be >= 2, got {factor}"),
            ));
        }
        let k = 2 * factor;
        // each output pixel sees (k / factor)^2 taps per input channel
        let fan_in = in_channels * 4;
        let weight = store.add_uniform(format!("{name}.weight"), Shape::new(in_channels, out_channels, k, k), fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), Shape::new(1, out_channels, 1, 1), fan_in, rng);
        Ok(TransposedUpsample { factor, weight, bias })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv_transpose_upsample(x, w, Some(b), self.factor)
    }
}

/// Tape-free bilinear upsampling (half-pixel centers, clamped).
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(WauError::contract("bilinear_upsample", "factor must be >= 1"));
    }
    let s = x.shape();
    let data = kernels::bilinear_forward(x.data(), s, factor);
    Tensor::from_vec(Shape::new(s.n, s.c, s.h * factor, s.w * factor), data)
}

#[cfg(test)]
mod tests;

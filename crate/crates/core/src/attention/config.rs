use crate::conv::ConvVariant;
use crate::error::{Result, WauError};

/// Hyperparameters of one window attention upsample stage.
#[derive(Clone, Debug, PartialEq)]
pub struct WauConfig {
    /// Upsample ratio `n` (lateral map is `n` times the input map).
    pub ratio: usize,
    /// Key/value window `M2`; the query window is always `n * M2`.
    pub window: usize,
    pub heads: usize,
    /// Attention width; `None` uses the lateral channel count.
    pub embed_dim: Option<usize>,
    pub proj_conv: ConvVariant,
    pub proj_kernel: usize,
    pub proj_bias: bool,
    pub out_conv: ConvVariant,
    pub out_kernel: usize,
    pub ln_eps: f64,
    /// Insert a 1x1 conv on the bilinear branch when its channels differ
    /// from `embed_dim`; otherwise such a mismatch is a config error.
    pub residual_adapter: bool,
}

impl Default for WauConfig {
    fn default() -> Self {
        WauConfig {
            ratio: 2,
            window: 4,
            heads: 4,
            embed_dim: None,
            proj_conv: ConvVariant::Regular,
            proj_kernel: 3,
            proj_bias: true,
            out_conv: ConvVariant::Regular,
            out_kernel: 3,
            ln_eps: 1e-5,
            residual_adapter: true,
        }
    }
}

impl WauConfig {
    pub fn query_window(&self) -> usize {
        self.ratio * self.window
    }

    pub fn embed_dim_for(&self, lateral_channels: usize) -> usize {
        self.embed_dim.unwrap_or(lateral_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(WauError::Config(format!("upsample ratio must be >= 2, got {}", self.ratio)));
        }
        if self.window == 0 {
            return Err(WauError::Config("window size must be positive".into()));
        }
        if self.heads == 0 {
            return Err(WauError::Config("heads must be positive".into()));
        }
        if let Some(e) = self.embed_dim {
            if e % self.heads != 0 {
                return Err(WauError::Config(format!("embed_dim {e} not divisible by {} heads", self.heads)));
            }
        }
        for (what, k) in [("proj_kernel", self.proj_kernel), ("out_kernel", self.out_kernel)] {
            if k % 2 == 0 {
                return Err(WauError::Config(format!("{what} must be odd, got {k}")));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(WauError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

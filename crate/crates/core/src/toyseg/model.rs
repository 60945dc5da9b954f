//! A small U-shaped segmentation network with a selectable upsampler.

use rand::Rng;

use crate::attention::AttentionRecord;
use crate::conv::{Conv2d, ConvSpec};
use crate::error::{Result, WauError};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;
use crate::wau::{Upsampler, UpsamplerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyNetConfig {
    /// Number of 2x downsampling steps.
    pub depth: usize,
    /// Channels at full resolution; doubled after every pool.
    pub base_channels: usize,
    /// Foreground classes `K`; the head emits `K+1` logits.
    pub classes: usize,
    pub upsampler: UpsamplerKind,
}

impl ToyNetConfig {
    /// Channel width of encoder level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Checks that do not depend on the input size.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(WauError::Config("toy net depth must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(WauError::Config("base_channels must be positive".into()));
        }
        if self.classes == 0 || self.classes > 254 {
            return Err(WauError::Config(format!("classes must be in 1..=254, got {}", self.classes)));
        }
        if self.upsampler.factor() != 2 {
            return Err(WauError::Config(format!(
                "toy net pools by 2, so the upsample ratio must be 2 (got {})",
                self.upsampler.factor()
            )));
        }
        if let UpsamplerKind::Wau(cfg) | UpsamplerKind::WadOnly(cfg) = &self.upsampler {
            cfg.validate()?;
            if cfg.embed_dim.is_some() {
                return Err(WauError::Config("toy net derives embed_dim from the lateral width; leave it unset".into()));
            }
            for level in 0..self.depth {
                if !self.width(level).is_multiple_of(cfg.heads) {
                    return Err(WauError::Config(format!(
                        "{} heads do not divide the level-{level} width {}",
                        cfg.heads,
                        self.width(level)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Size checks: pooling needs `2^depth | H, W`; attention stages need
    /// their input map to tile into windows.
    pub fn validate_input(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let div = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(div) || !width.is_multiple_of(div) {
            return Err(WauError::Config(format!(
                "input {height}x{width} must be a positive multiple of 2^depth = {div}"
            )));
        }
        if let UpsamplerKind::Wau(cfg) | UpsamplerKind::WadOnly(cfg) = &self.upsampler {
            for level in 0..self.depth {
                let (h, w) = (height >> (level + 1), width >> (level + 1));
                if h % cfg.window != 0 || w % cfg.window != 0 {
                    return Err(WauError::Config(format!(
                        "decoder input {h}x{w} at level {level} is not divisible by window {}",
                        cfg.window
                    )));
                }
            }
        }
        Ok(())
    }

    /// Smallest multiple every image side must be.
    pub fn size_divisor(&self) -> usize {
        // the deepest decoder input is H / 2^depth; shallower ones are
        // multiples of it
        match &self.upsampler {
            UpsamplerKind::Wau(cfg) | UpsamplerKind::WadOnly(cfg) => cfg.window << self.depth,
            _ => 1 << self.depth,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvPair(Conv2d, Conv2d);

impl ConvPair {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ConvPair(
            Conv2d::new(store, &format!("{name}.a"), ConvSpec::regular(cin, cout, 3), rng)?,
            Conv2d::new(store, &format!("{name}.b"), ConvSpec::regular(cout, cout, 3), rng)?,
        ))
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.0.forward(g, x)?;
        let y = g.relu(y)?;
        let y = self.1.forward(g, y)?;
        g.relu(y)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.0.param_ids();
        ids.extend(self.1.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Upsampler,
    convs: ConvPair,
}

#[derive(Clone, Debug)]
pub struct ToyNet {
    cfg: ToyNetConfig,
    height: usize,
    width: usize,
    encoder: Vec<ConvPair>,
    bottleneck: ConvPair,
    /// Deepest level first, i.e. in execution order.
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

/// Everything a forward pass exposes besides the logits.
pub struct ToyOutput<T> {
    /// `N x (K+1) x H x W`.
    pub logits: Var,
    /// One entry per attention stage, in decoding order.
    pub attention: Vec<AttentionRecord<T>>,
    /// Output of each upsampler, in decoding order.
    pub stage_outputs: Vec<Var>,
}

/// Builds the net for single-channel `height x width` inputs.
///
/// Encoder level `i` runs two 3x3 conv+ReLU at width `base * 2^i`, taps the
/// lateral and max-pools. The bottleneck widens to twice the last width and
/// returns to it. Decoder level `i` upsamples (keeping its width), concatenates
/// lateral `i` and applies two conv+ReLU down to the next shallower width. A
/// 1x1 head maps to `K+1` logits.
pub fn build_toynet<T: Scalar>(
    cfg: &ToyNetConfig,
    height: usize,
    width: usize,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<ToyNet> {
    cfg.validate_input(height, width)?;
    let d = cfg.depth;
    let mut encoder = Vec::with_capacity(d);
    let mut cin = 1;
    for level in 0..d {
        encoder.push(ConvPair::new(store, &format!("enc{level}"), cin, cfg.width(level), rng)?);
        cin = cfg.width(level);
    }
    let last = cfg.width(d - 1);
    let bottleneck = ConvPair(
        Conv2d::new(store, "mid.a", ConvSpec::regular(last, 2 * last, 3), rng)?,
        Conv2d::new(store, "mid.b", ConvSpec::regular(2 * last, last, 3), rng)?,
    );
    let mut decoder = Vec::with_capacity(d);
    for (stage, level) in (0..d).rev().enumerate() {
        let c = cfg.width(level);
        let up = Upsampler::new(store, &format!("dec{stage}.up"), &cfg.upsampler, c, Some(c), rng)?.with_layer(stage);
        debug_assert_eq!(up.out_channels(), c);
        let out = cfg.width(level.saturating_sub(1));
        let convs = ConvPair::new(store, &format!("dec{stage}"), 2 * c, out, rng)?;
        decoder.push(DecoderLevel { up, convs });
    }
    let head = Conv2d::new(store, "head", ConvSpec::regular(cfg.width(0), cfg.classes + 1, 1), rng)?;
    Ok(ToyNet {
        cfg: cfg.clone(),
        height,
        width,
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

impl ToyNet {
    pub fn config(&self) -> &ToyNetConfig {
        &self.cfg
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn stages(&self) -> usize {
        self.decoder.len()
    }

    /// Encoder and bottleneck parameters.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.encoder.iter().flat_map(ConvPair::param_ids).collect();
        ids.extend(self.bottleneck.param_ids());
        ids
    }

    /// Upsamplers, decoder convs and head.
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lvl in &self.decoder {
            ids.extend(lvl.up.param_ids());
            ids.extend(lvl.convs.param_ids());
        }
        ids.extend(self.head.param_ids());
        ids
    }

    pub fn upsamplers(&self) -> impl Iterator<Item = &Upsampler> {
        self.decoder.iter().map(|l| &l.up)
    }

    pub fn upsampler_param_ids(&self) -> Vec<ParamId> {
        self.upsamplers().flat_map(Upsampler::param_ids).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_param_ids();
        ids.extend(self.decoder_param_ids());
        ids
    }

    /// `x` is `N x 1 x H x W`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, record_attention: bool) -> Result<ToyOutput<T>> {
        let s = g.shape(x);
        if s.c != 1 || (s.h, s.w) != (self.height, self.width) {
            return Err(WauError::dim(
                "toy net",
                format!("expected Nx1x{}x{}, got {s}", self.height, self.width),
            ));
        }
        let mut laterals = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for level in &self.encoder {
            let lat = level.forward(g, h)?;
            laterals.push(lat);
            h = g.max_pool2(lat)?;
        }
        h = self.bottleneck.forward(g, h)?;
        let mut attention = Vec::new();
        let mut stage_outputs = Vec::with_capacity(self.decoder.len());
        for lvl in &self.decoder {
            let lat = laterals.pop().expect("one lateral per level");
            let (up, rec) = lvl.up.forward(g, h, Some(lat), record_attention)?;
            attention.extend(rec);
            stage_outputs.push(up);
            let cat = g.concat_channels(up, lat)?;
            h = lvl.convs.forward(g, cat)?;
        }
        let logits = self.head.forward(g, h)?;
        Ok(ToyOutput {
            logits,
            attention,
            stage_outputs,
        })
    }
}

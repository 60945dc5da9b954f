//! The window attention upsample stage (attention branch plus bilinear
//! residual) and stackable upsampler stages.

use rand::Rng;

use crate::attention::{AttentionDecoder, AttentionRecord, WauConfig};
use crate::conv::{Conv2d, ConvSpec, TransposedUpsample};
use crate::error::{Result, WauError};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq)]
pub enum UpsamplerKind {
    Bilinear { factor: usize },
    Transposed { factor: usize },
    Wau(WauConfig),
    WadOnly(WauConfig),
}

impl UpsamplerKind {
    pub fn factor(&self) -> usize {
        match self {
            UpsamplerKind::Bilinear { factor } | UpsamplerKind::Transposed { factor } => *factor,
            UpsamplerKind::Wau(cfg) | UpsamplerKind::WadOnly(cfg) => cfg.ratio,
        }
    }

    pub fn needs_lateral(&self) -> bool {
        matches!(self, UpsamplerKind::Wau(_) | UpsamplerKind::WadOnly(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpsamplerKind::Bilinear { .. } => "bilinear",
            UpsamplerKind::Transposed { .. } => "transposed",
            UpsamplerKind::Wau(_) => "wau",
            UpsamplerKind::WadOnly(_) => "wad_only",
        }
    }

    /// Build a kind from its config name; `cfg` supplies the ratio for every
    /// kind and the attention settings for the attention kinds.
    pub fn from_name(name: &str, cfg: &WauConfig) -> Result<Self> {
        Ok(match name {
            "bilinear" => UpsamplerKind::Bilinear { factor: cfg.ratio },
            "transposed" => UpsamplerKind::Transposed { factor: cfg.ratio },
            "wau" => UpsamplerKind::Wau(cfg.clone()),
            "wad_only" => UpsamplerKind::WadOnly(cfg.clone()),
            other => {
                return Err(WauError::Config(format!(
                    "unknown upsampler `{other}` (bilinear | transposed | wad_only | wau)"
                )))
            }
        })
    }
}

/// Attention decoder output plus `Bilinear(z)`.
#[derive(Clone, Debug)]
pub struct WauStage {
    decoder: AttentionDecoder,
    adapter: Option<Conv2d>,
}

impl WauStage {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &WauConfig,
        lateral_channels: usize,
        input_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let decoder = AttentionDecoder::new(store, &format!("{name}.wad"), cfg, lateral_channels, input_channels, rng)?;
        let embed = decoder.embed_dim();
        let adapter = if input_channels == embed {
            None
        } else if cfg.residual_adapter {
            let spec = ConvSpec::regular(input_channels, embed, 1);
            Some(Conv2d::new(store, &format!("{name}.residual_adapter"), spec, rng)?)
        } else {
            return Err(WauError::Config(format!(
                "bilinear branch has {input_channels} channels but the attention branch has {embed}; \
                 enable residual_adapter or match the widths"
            )));
        };
        Ok(WauStage { decoder, adapter })
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.decoder = self.decoder.with_layer(layer);
        self
    }

    pub fn decoder(&self) -> &AttentionDecoder {
        &self.decoder
    }

    pub fn adapter(&self) -> Option<&Conv2d> {
        self.adapter.as_ref()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.decoder.param_ids();
        if let Some(a) = &self.adapter {
            ids.extend(a.param_ids());
        }
        ids
    }

    /// The bilinear residual branch alone.
    pub fn residual<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let up = g.bilinear_upsample(z, self.decoder.config().ratio)?;
        match &self.adapter {
            Some(a) => a.forward(g, up),
            None => Ok(up),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        lateral: Var,
        z: Var,
        record_attention: bool,
    ) -> Result<(Var, Option<AttentionRecord<T>>)> {
        let (att, rec) = self.decoder.wad_forward(g, lateral, z, record_attention)?;
        let res = self.residual(g, z)?;
        Ok((g.add(att, res)?, rec))
    }
}

/// A constructed upsampler of any kind.
#[derive(Clone, Debug)]
pub enum Upsampler {
    Bilinear { factor: usize, channels: usize },
    Transposed(TransposedUpsample, usize),
    Wau(WauStage),
    WadOnly(AttentionDecoder),
}

impl Upsampler {
    /// `lateral_channels` is required by the attention kinds and ignored
    /// otherwise. Non-attention kinds keep the input channel count.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: &UpsamplerKind,
        input_channels: usize,
        lateral_channels: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lateral = || {
            lateral_channels.ok_or_else(|| WauError::Config(format!("{name}: {} upsampler needs a lateral input", kind.name())))
        };
        Ok(match kind {
            UpsamplerKind::Bilinear { factor } => {
                if *factor < 1 {
                    return Err(WauError::Config(format!("{name}: bilinear factor must be >= 1")));
                }
                Upsampler::Bilinear {
                    factor: *factor,
                    channels: input_channels,
                }
            }
            UpsamplerKind::Transposed { factor } => Upsampler::Transposed(
                TransposedUpsample::new(store, name, input_channels, input_channels, *factor, rng)?,
                input_channels,
            ),
            UpsamplerKind::Wau(cfg) => Upsampler::Wau(WauStage::new(store, name, cfg, lateral()?, input_channels, rng)?),
            UpsamplerKind::WadOnly(cfg) => Upsampler::WadOnly(AttentionDecoder::new(
                store,
                &format!("{name}.wad"),
                cfg,
                lateral()?,
                input_channels,
                rng,
            )?),
        })
    }

    pub fn with_layer(self, layer: usize) -> Self {
        match self {
            Upsampler::Wau(s) => Upsampler::Wau(s.with_layer(layer)),
            Upsampler::WadOnly(d) => Upsampler::WadOnly(d.with_layer(layer)),
            other => other,
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Upsampler::Bilinear { factor, .. } => *factor,
            Upsampler::Transposed(t, _) => t.factor(),
            Upsampler::Wau(s) => s.decoder().config().ratio,
            Upsampler::WadOnly(d) => d.config().ratio,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Upsampler::Bilinear { channels, .. } | Upsampler::Transposed(_, channels) => *channels,
            Upsampler::Wau(s) => s.decoder().embed_dim(),
            Upsampler::WadOnly(d) => d.embed_dim(),
        }
    }

    pub fn needs_lateral(&self) -> bool {
        matches!(self, Upsampler::Wau(_) | Upsampler::WadOnly(_))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Upsampler::Bilinear { .. } => Vec::new(),
            Upsampler::Transposed(t, _) => t.param_ids(),
            Upsampler::Wau(s) => s.param_ids(),
            Upsampler::WadOnly(d) => d.param_ids(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        lateral: Option<Var>,
        record_attention: bool,
    ) -> Result<(Var, Option<AttentionRecord<T>>)> {
        let need = |lateral: Option<Var>| {
            lateral.ok_or_else(|| WauError::contract("upsampler", "attention upsampler called without a lateral input"))
        };
        match self {
            Upsampler::Bilinear { factor, .. } => Ok((g.bilinear_upsample(z, *factor)?, None)),
            Upsampler::Transposed(t, _) => Ok((t.forward(g, z)?, None)),
            Upsampler::Wau(s) => s.forward(g, need(lateral)?, z, record_attention),
            Upsampler::WadOnly(d) => d.wad_forward(g, need(lateral)?, z, record_attention),
        }
    }
}

/// Stage description for [`UpsampleStack::new`].
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub kind: UpsamplerKind,
    /// `(channels, height, width)` of the lateral map fed to this stage.
    pub lateral: Option<(usize, usize, usize)>,
}

/// Progressive upsampling through a sequence of stages whose shapes are
/// checked when the stack is built.
#[derive(Clone, Debug)]
pub struct UpsampleStack {
    stages: Vec<Upsampler>,
    output: (usize, usize, usize),
}

impl UpsampleStack {
    /// `input` is the `(channels, height, width)` of the map entering stage 0.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input: (usize, usize, usize),
        specs: &[StageSpec],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (mut c, mut h, mut w) = input;
        let mut stages = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let f = spec.kind.factor();
            let (oh, ow) = (h * f, w * f);
            if spec.kind.needs_lateral() {
                let (lc, lh, lw) = spec
                    .lateral
                    .ok_or_else(|| WauError::Config(format!("stage {i}: {} needs a lateral input", spec.kind.name())))?;
                if (lh, lw) != (oh, ow) {
                    return Err(WauError::Config(format!(
                        "stage {i}: lateral {lh}x{lw} must be exactly {f}x the stage input {h}x{w}"
                    )));
                }
                if let UpsamplerKind::Wau(cfg) | UpsamplerKind::WadOnly(cfg) = &spec.kind {
                    if h % cfg.window != 0 || w % cfg.window != 0 {
                        return Err(WauError::Config(format!(
                            "stage {i}: input {h}x{w} not divisible by window {}",
                            cfg.window
                        )));
                    }
                }
                let up = Upsampler::new(store, &format!("stage{i}"), &spec.kind, c, Some(lc), rng)
                    .map_err(|e| WauError::Config(format!("stage {i}: {e}")))?;
                c = up.out_channels();
                stages.push(up.with_layer(i));
            } else {
                let up = Upsampler::new(store, &format!("stage{i}"), &spec.kind, c, None, rng)
                    .map_err(|e| WauError::Config(format!("stage {i}: {e}")))?;
                c = up.out_channels();
                stages.push(up);
            }
            h = oh;
            w = ow;
        }
        Ok(UpsampleStack {
            stages,
            output: (c, h, w),
        })
    }

    pub fn stages(&self) -> &[Upsampler] {
        &self.stages
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        self.output
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(Upsampler::param_ids).collect()
    }

    /// `laterals[i]` feeds stage `i` (ignored by non-attention stages).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, laterals: &[Option<Var>]) -> Result<Var> {
        let mut x = z;
        for (i, stage) in self.stages.iter().enumerate() {
            let lat = laterals.get(i).copied().flatten();
            x = stage.forward(g, x, lat, false)?.0;
        }
        Ok(x)
    }
}

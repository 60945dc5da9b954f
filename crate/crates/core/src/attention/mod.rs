//! Convolution-projected multi-head cross-attention decoder.
//!
//! Queries come from the high-resolution lateral map, keys and values from
//! the low-resolution decoder map. The windowed form pairs query windows of
//! `n * M2` pixels with key/value windows of `M2` pixels; the global form
//! attends over every token and is kept as an equivalence oracle and a
//! quadratic-cost reference.

mod config;

use rand::Rng;

pub use config::WauConfig;

use crate::conv::{Conv2d, ConvSpec};
use crate::error::{Result, WauError};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tape, Tensor, Var};
use crate::windowing::{self, WindowCoord};

/// Attention weights retrieved from one decoder call.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub layer: usize,
    pub query_window: usize,
    pub kv_window: usize,
    pub heads: usize,
    pub coords: Vec<WindowCoord>,
    /// `(windows, heads, M1^2, M2^2)`; each row sums to one.
    pub weights: Tensor<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    /// Largest deviation of any weight row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let cols = self.weights.shape().w;
        self.weights
            .data()
            .chunks(cols)
            .map(|row| (row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `M1^2 x M2^2` weights of window `w` and head `h`.
    pub fn window_head(&self, w: usize, h: usize) -> &[T] {
        let s = self.weights.shape();
        let len = s.h * s.w;
        let off = (w * s.c + h) * len;
        &self.weights.data()[off..off + len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScope {
    /// Aligned local windows (WAD).
    Windowed,
    /// One window over the whole map (AD).
    Global,
}

#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttendOutput {
    /// Merged attention output before the output convolution.
    pub pre_out: Var,
    /// `(windows, heads, M1^2, M2^2)` attention weights.
    pub weights: Var,
}

/// Gather index flattening a whole map into `(N, heads, H*W, C/heads)`.
fn token_gather_index(s: Shape, heads: usize) -> (Vec<usize>, Shape) {
    let d = s.c / heads;
    let mut index = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for h in 0..heads {
            for y in 0..s.h {
                for x in 0..s.w {
                    for j in 0..d {
                        index.push(s.index(n, h * d + j, y, x));
                    }
                }
            }
        }
    }
    (index, Shape::new(s.n, heads, s.h * s.w, d))
}

fn tokens<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let (index, shape) = token_gather_index(tape.shape(x), heads);
    tape.gather(x, index, shape)
}

fn untokens<T: Scalar>(tape: &mut Tape<T>, t: Var, target: Shape, heads: usize) -> Result<Var> {
    let (gather, _) = token_gather_index(target, heads);
    let mut inv = vec![0; gather.len()];
    for (pos, &src) in gather.iter().enumerate() {
        inv[src] = pos;
    }
    tape.gather(t, inv, target)
}

#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    cfg: WauConfig,
    layer: usize,
    lateral_channels: usize,
    input_channels: usize,
    embed_dim: usize,
    ln_query: (ParamId, ParamId),
    ln_kv: (ParamId, ParamId),
    conv_q: Conv2d,
    conv_k: Conv2d,
    conv_v: Conv2d,
    conv_out: Conv2d,
}

impl AttentionDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &WauConfig,
        lateral_channels: usize,
        input_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed_dim = cfg.embed_dim_for(lateral_channels);
        if !embed_dim.is_multiple_of(cfg.heads) {
            return Err(WauError::Config(format!(
                "embed_dim {embed_dim} not divisible by {} heads",
                cfg.heads
            )));
        }
        let ln = |store: &mut ParamStore<T>, tag: &str, c: usize| {
            (
                store.add(format!("{name}.{tag}.gamma"), Tensor::full(Shape::new(1, c, 1, 1), T::one())),
                store.add(format!("{name}.{tag}.beta"), Tensor::zeros(Shape::new(1, c, 1, 1))),
            )
        };
        let ln_query = ln(store, "ln_query", lateral_channels);
        let ln_kv = ln(store, "ln_kv", input_channels);
        let proj = |cin: usize| ConvSpec {
            variant: cfg.proj_conv,
            kernel: cfg.proj_kernel,
            in_channels: cin,
            out_channels: embed_dim,
            bias: cfg.proj_bias,
        };
        let conv_q = Conv2d::new(store, &format!("{name}.conv_q"), proj(lateral_channels), rng)?;
        let conv_k = Conv2d::new(store, &format!("{name}.conv_k"), proj(input_channels), rng)?;
        let conv_v = Conv2d::new(store, &format!("{name}.conv_v"), proj(input_channels), rng)?;
        let out_spec = ConvSpec {
            variant: cfg.out_conv,
            kernel: cfg.out_kernel,
            in_channels: embed_dim,
            out_channels: embed_dim,
            bias: true,
        };
        let conv_out = Conv2d::new(store, &format!("{name}.conv_out"), out_spec, rng)?;
        Ok(AttentionDecoder {
            cfg: cfg.clone(),
            layer: 0,
            lateral_channels,
            input_channels,
            embed_dim,
            ln_query,
            ln_kv,
            conv_q,
            conv_k,
            conv_v,
            conv_out,
        })
    }

    /// Tag recorded attention with a decoder stage index.
    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn config(&self) -> &WauConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn lateral_channels(&self) -> usize {
        self.lateral_channels
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn conv_q(&self) -> &Conv2d {
        &self.conv_q
    }

    pub fn conv_k(&self) -> &Conv2d {
        &self.conv_k
    }

    pub fn conv_v(&self) -> &Conv2d {
        &self.conv_v
    }

    pub fn conv_out(&self) -> &Conv2d {
        &self.conv_out
    }

    pub fn layer_norm_ids(&self) -> [ParamId; 4] {
        [self.ln_query.0, self.ln_query.1, self.ln_kv.0, self.ln_kv.1]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.layer_norm_ids().to_vec();
        for c in [&self.conv_q, &self.conv_k, &self.conv_v, &self.conv_out] {
            ids.extend(c.param_ids());
        }
        ids
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<'_, T>, lateral: Var, z: Var) -> Result<(Shape, Shape)> {
        let (ls, zs) = (g.shape(lateral), g.shape(z));
        windowing::check_ratio(ls, zs, self.cfg.ratio)?;
        if ls.c != self.lateral_channels || zs.c != self.input_channels {
            return Err(WauError::dim(
                "attention decoder",
                format!(
                    "expected lateral/input channels {}/{}, got {}/{}",
                    self.lateral_channels, self.input_channels, ls.c, zs.c
                ),
            ));
        }
        Ok((ls, zs))
    }

    /// Layer-normalize both inputs and project them to queries, keys and values.
    pub fn project_qkv<T: Scalar>(&self, g: &mut Graph<'_, T>, lateral: Var, z: Var) -> Result<Projections> {
        self.check_inputs(g, lateral, z)?;
        let eps = T::of(self.cfg.ln_eps);
        let (gq, bq) = (g.param(self.ln_query.0)?, g.param(self.ln_query.1)?);
        let (gk, bk) = (g.param(self.ln_kv.0)?, g.param(self.ln_kv.1)?);
        let a = g.layer_norm(lateral, gq, bq, eps)?;
        let zn = g.layer_norm(z, gk, bk, eps)?;
        let q = self.conv_q.forward(g, a)?;
        let k = self.conv_k.forward(g, zn)?;
        let v = self.conv_v.forward(g, zn)?;
        Ok(Projections { q, k, v })
    }

    /// Dot attention of projected tokens, merged back to the lateral grid.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<'_, T>, lateral: Var, z: Var, scope: AttentionScope) -> Result<AttendOutput> {
        let (_, zs) = self.check_inputs(g, lateral, z)?;
        let heads = self.cfg.heads;
        let m2 = self.cfg.window;
        let m1 = self.cfg.query_window();
        if scope == AttentionScope::Windowed && (zs.h % m2 != 0 || zs.w % m2 != 0) {
            return Err(WauError::dim(
                "window attention",
                format!("H={} W={} not divisible by window {m2}x{m2}", zs.h, zs.w),
            ));
        }
        let p = self.project_qkv(g, lateral, z)?;
        let q_shape = g.shape(p.q);
        let (qt, kt, vt) = match scope {
            AttentionScope::Windowed => (
                windowing::to_windows(g, p.q, m1, heads)?,
                windowing::to_windows(g, p.k, m2, heads)?,
                windowing::to_windows(g, p.v, m2, heads)?,
            ),
            AttentionScope::Global => (tokens(g, p.q, heads)?, tokens(g, p.k, heads)?, tokens(g, p.v, heads)?),
        };
        let d = self.embed_dim / heads;
        let logits = g.matmul_bt(qt, kt)?;
        let logits = g.scale(logits, T::one() / T::of(d as f64).sqrt())?;
        let weights = g.softmax_rows(logits)?;
        let out = g.matmul(weights, vt)?;
        let pre_out = match scope {
            AttentionScope::Windowed => windowing::from_windows(g, out, q_shape, m1, heads)?,
            AttentionScope::Global => untokens(g, out, q_shape, heads)?,
        };
        Ok(AttendOutput { pre_out, weights })
    }

    /// Window attention decoder: output has the lateral map's spatial size
    /// and `embed_dim` channels.
    pub fn wad_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        lateral: Var,
        z: Var,
        record_attention: bool,
    ) -> Result<(Var, Option<AttentionRecord<T>>)> {
        let att = self.attend(g, lateral, z, AttentionScope::Windowed)?;
        let out = self.conv_out.forward(g, att.pre_out)?;
        let record = record_attention.then(|| {
            let m1 = self.cfg.query_window();
            let q_shape = Shape::new(g.shape(lateral).n, self.embed_dim, g.shape(lateral).h, g.shape(lateral).w);
            AttentionRecord {
                layer: self.layer,
                query_window: m1,
                kv_window: self.cfg.window,
                heads: self.cfg.heads,
                coords: windowing::window_coords(q_shape, m1),
                weights: g.value(att.weights).clone(),
            }
        });
        Ok((out, record))
    }

    /// Global attention decoder: every query attends to every key.
    pub fn ad_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, lateral: Var, z: Var) -> Result<Var> {
        let att = self.attend(g, lateral, z, AttentionScope::Global)?;
        self.conv_out.forward(g, att.pre_out)
    }
}

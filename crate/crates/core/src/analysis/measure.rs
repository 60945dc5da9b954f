//! Instrumented attention-decoder forward: tallies multiply-accumulates per
//! category through the shared kernels and tracks the peak number of live
//! q/k/v/attention-weight elements.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::flops;
use crate::attention::{AttentionDecoder, AttentionScope, WauConfig};
use crate::conv::kernels as ck;
use crate::counter::{Category, CountingSession, Tally};
use crate::error::{Result, WauError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Shape, Tensor};
use crate::windowing;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Ad,
    Wad,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Ad => "ad",
            OpKind::Wad => "wad",
        })
    }
}

/// Operator geometry for cost evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostConfig {
    pub h2: usize,
    pub w2: usize,
    pub c: usize,
    pub k: usize,
    pub n: usize,
    pub m2: usize,
    pub heads: usize,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.h2, self.w2, self.c, self.k, self.n, self.m2, self.heads];
        if dims.contains(&0) {
            return Err(WauError::contract("measure", format!("all dimensions must be positive: {self:?}")));
        }
        if self.k.is_multiple_of(2) {
            return Err(WauError::contract("measure", "projection kernel must be odd"));
        }
        if !self.c.is_multiple_of(self.heads) {
            return Err(WauError::contract("measure", "channels must divide into heads"));
        }
        Ok(())
    }

    pub fn with_size(self, h2: usize, w2: usize) -> Self {
        CostConfig { h2, w2, ..self }
    }

    fn u(&self) -> [u64; 6] {
        [self.h2, self.w2, self.c, self.k, self.n, self.m2].map(|v| v as u64)
    }

    pub fn analytic_flops(&self, op: OpKind) -> Result<u64> {
        let [h2, w2, c, k, n, m2] = self.u();
        match op {
            OpKind::Ad => flops::flops_ad(h2, w2, c, k, n),
            OpKind::Wad => flops::flops_wad(h2, w2, c, k, n, m2),
        }
    }

    pub fn analytic_mem(&self, op: OpKind) -> Result<u64> {
        let [h2, w2, c, _, n, m2] = self.u();
        match op {
            OpKind::Ad => flops::mem_ad(h2, w2, c, n),
            OpKind::Wad => flops::mem_wad(h2, w2, c, n, m2),
        }
    }

    pub fn wau_config(&self) -> WauConfig {
        WauConfig {
            ratio: self.n,
            window: self.m2,
            heads: self.heads,
            embed_dim: Some(self.c),
            proj_kernel: self.k,
            ..WauConfig::default()
        }
    }
}

/// Analytic and measured cost of one operator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub op: OpKind,
    pub config: CostConfig,
    pub analytic_flops: u64,
    pub analytic_mem_elems: u64,
    pub measured_flops: u64,
    pub measured_peak_elems: u64,
    /// Every tallied flop, including v projection, value aggregation, output
    /// conv and elementwise overheads.
    pub total_flops: u64,
    /// Peak elements times the width of the measured precision.
    pub peak_bytes: u64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str =
        "op,h2,w2,c,k,n,m2,analytic_flops,analytic_mem_elems,measured_flops,measured_peak_elems";

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.op,
            c.h2,
            c.w2,
            c.c,
            c.k,
            c.n,
            c.m2,
            self.analytic_flops,
            self.analytic_mem_elems,
            self.measured_flops,
            self.measured_peak_elems
        )
    }

    pub fn is_exact(&self) -> bool {
        self.analytic_flops == self.measured_flops && self.analytic_mem_elems == self.measured_peak_elems
    }

    /// `None` when measured and analytic agree exactly.
    pub fn diagnostic(&self) -> Option<String> {
        (!self.is_exact()).then(|| {
            format!(
                "{} {:?}: flops analytic {} vs measured {} (diff {}), memory analytic {} vs measured {} (diff {})",
                self.op,
                self.config,
                self.analytic_flops,
                self.measured_flops,
                self.measured_flops as i128 - self.analytic_flops as i128,
                self.analytic_mem_elems,
                self.measured_peak_elems,
                self.measured_peak_elems as i128 - self.analytic_mem_elems as i128,
            )
        })
    }
}

#[derive(Default)]
struct BufferLedger {
    live: u64,
    peak: u64,
}

impl BufferLedger {
    fn alloc(&mut self, elems: usize) {
        self.live += elems as u64;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, elems: usize) {
        self.live -= elems as u64;
    }
}

/// Output and counters of one instrumented forward.
#[derive(Clone, Debug)]
pub struct InstrumentedRun<T> {
    /// Decoder output after the output convolution.
    pub output: Tensor<T>,
    pub tally: Tally,
    pub peak_elems: u64,
}

fn param<T: Scalar>(store: &ParamStore<T>, id: crate::params::ParamId) -> &[T] {
    store.get(id).data()
}

fn conv_slice<T: Scalar>(store: &ParamStore<T>, conv: &crate::conv::Conv2d, x: &[T], xs: Shape) -> Result<(Vec<T>, Shape)> {
    let spec = conv.spec();
    if spec.variant != crate::conv::ConvVariant::Regular {
        return Err(WauError::contract("measure", "instrumented forward supports regular projections only"));
    }
    let w = conv.kernel_ids()[0];
    let ws = store.get(w).shape();
    let bias = conv.bias_id().map(|b| param(store, b));
    let out = ck::conv2d_forward(x, xs, param(store, w), ws, bias, 1);
    Ok((out, Shape::new(xs.n, ws.n, xs.h, xs.w)))
}

/// Gather the channel slice `[h*d, (h+1)*d)` of a map into window-major
/// tokens `(windows, mh*mw, d)`.
fn head_tokens<T: Scalar>(map: &[T], s: Shape, head: usize, d: usize, mh: usize, mw: usize) -> Result<Vec<T>> {
    let mut tokens = Vec::with_capacity(s.n * s.plane() * d);
    for n in 0..s.n {
        let off = (n * s.c + head * d) * s.plane();
        let slice_shape = Shape::new(1, d, s.h, s.w);
        let (index, _) = windowing::window_gather_index(slice_shape, mh, mw, 1)?;
        tokens.extend(index.iter().map(|&i| map[off + i]));
    }
    Ok(tokens)
}

/// Scatter window-major head tokens back into channel slice `head` of `map`.
fn scatter_head<T: Scalar>(map: &mut [T], s: Shape, head: usize, d: usize, mh: usize, mw: usize, tokens: &[T]) -> Result<()> {
    let per_batch = s.plane() * d;
    for n in 0..s.n {
        let off = (n * s.c + head * d) * s.plane();
        let (index, _) = windowing::window_gather_index(Shape::new(1, d, s.h, s.w), mh, mw, 1)?;
        for (pos, &dst) in index.iter().enumerate() {
            map[off + dst] = tokens[n * per_batch + pos];
        }
    }
    Ok(())
}

/// Run the decoder through the raw kernels under a counting session.
///
/// Heads are processed one at a time over all windows at once; each head's
/// weight buffer is released before the next head starts.
pub fn instrumented_forward<T: Scalar>(
    decoder: &AttentionDecoder,
    store: &ParamStore<T>,
    lateral: &Tensor<T>,
    z: &Tensor<T>,
    scope: AttentionScope,
) -> Result<InstrumentedRun<T>> {
    let cfg = decoder.config();
    let (ls, zs) = (lateral.shape(), z.shape());
    windowing::check_ratio(ls, zs, cfg.ratio)?;
    let session = CountingSession::start();
    let mut ledger = BufferLedger::default();
    let eps = T::of(cfg.ln_eps);
    let [gq, bq, gk, bk] = decoder.layer_norm_ids();

    session.set_category(Category::Other);
    let (a, _) = kernels::layer_norm(lateral.data(), ls.n, ls.c, ls.plane(), param(store, gq), param(store, bq), eps);
    let (zn, _) = kernels::layer_norm(z.data(), zs.n, zs.c, zs.plane(), param(store, gk), param(store, bk), eps);

    session.set_category(Category::QueryProjection);
    let (q, qs) = conv_slice(store, decoder.conv_q(), &a, ls)?;
    ledger.alloc(q.len());
    session.set_category(Category::KeyProjection);
    let (k, ks) = conv_slice(store, decoder.conv_k(), &zn, zs)?;
    ledger.alloc(k.len());
    session.set_category(Category::ValueProjection);
    let (v, _) = conv_slice(store, decoder.conv_v(), &zn, zs)?;
    ledger.alloc(v.len());

    let heads = cfg.heads;
    let d = qs.c / heads;
    let ((qmh, qmw), (kmh, kmw)) = match scope {
        AttentionScope::Windowed => ((cfg.query_window(), cfg.query_window()), (cfg.window, cfg.window)),
        AttentionScope::Global => ((qs.h, qs.w), (ks.h, ks.w)),
    };
    let windows = qs.n * (qs.h / qmh) * (qs.w / qmw);
    let (rows, cols) = (qmh * qmw, kmh * kmw);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut merged = vec![T::zero(); q.len()];
    for h in 0..heads {
        let qt = head_tokens(&q, qs, h, d, qmh, qmw)?;
        let kt = head_tokens(&k, ks, h, d, kmh, kmw)?;
        let vt = head_tokens(&v, ks, h, d, kmh, kmw)?;
        session.set_category(Category::Logits);
        let mut weights = kernels::matmul_nt(&qt, &kt, windows, rows, d, cols);
        ledger.alloc(weights.len());
        session.set_category(Category::Other);
        weights.iter_mut().for_each(|w| *w = *w * scale);
        crate::counter::record_overhead(weights.len() as u64);
        let weights = kernels::softmax_rows(&weights, cols);
        session.set_category(Category::Aggregate);
        let out = kernels::matmul_nn(&weights, &vt, windows, rows, cols, d);
        ledger.free(weights.len());
        scatter_head(&mut merged, qs, h, d, qmh, qmw, &out)?;
    }
    ledger.free(q.len() + k.len() + v.len());

    session.set_category(Category::OutputConv);
    let (out, os) = conv_slice(store, decoder.conv_out(), &merged, qs)?;
    let tally = session.tally();
    Ok(InstrumentedRun {
        output: Tensor::from_vec(os, out)?,
        tally,
        peak_elems: ledger.peak,
    })
}

/// FLOPs of the subset the closed forms describe: query and key projections
/// plus the query-key logits product.
pub fn comparison_flops(tally: &Tally) -> u64 {
    2 * (tally.macs(Category::QueryProjection) + tally.macs(Category::KeyProjection) + tally.macs(Category::Logits))
}

pub fn total_flops(tally: &Tally) -> u64 {
    2 * tally.total_macs() + tally.overhead_flops
}

/// Build a random decoder and inputs for `cfg` and compare the instrumented
/// counts against the closed forms.
pub fn measure(op: OpKind, cfg: &CostConfig, seed: u64) -> Result<CostReport> {
    cfg.validate()?;
    if op == OpKind::Wad && (!cfg.h2.is_multiple_of(cfg.m2) || !cfg.w2.is_multiple_of(cfg.m2)) {
        return Err(WauError::dim(
            "measure",
            format!("H2={} W2={} not divisible by window {}", cfg.h2, cfg.w2, cfg.m2),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let decoder = AttentionDecoder::new(&mut store, "measure", &cfg.wau_config(), cfg.c, cfg.c, &mut rng)?;
    let lateral = Tensor::uniform(Shape::new(1, cfg.c, cfg.n * cfg.h2, cfg.n * cfg.w2), -1.0, 1.0, &mut rng);
    let z = Tensor::uniform(Shape::new(1, cfg.c, cfg.h2, cfg.w2), -1.0, 1.0, &mut rng);
    let scope = match op {
        OpKind::Ad => AttentionScope::Global,
        OpKind::Wad => AttentionScope::Windowed,
    };
    let run = instrumented_forward(&decoder, &store, &lateral, &z, scope)?;
    Ok(CostReport {
        op,
        config: *cfg,
        analytic_flops: cfg.analytic_flops(op)?,
        analytic_mem_elems: cfg.analytic_mem(op)?,
        measured_flops: comparison_flops(&run.tally),
        measured_peak_elems: run.peak_elems,
        total_flops: total_flops(&run.tally),
        peak_bytes: run.peak_elems * <f64 as Scalar>::DTYPE.width() as u64,
    })
}

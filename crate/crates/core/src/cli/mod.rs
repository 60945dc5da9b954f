//! The `wau` command line: gradient checks, cost reports, training,
//! evaluation and visualization export.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

pub mod config;
pub mod pgm;
pub mod viz;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{GradcheckTarget, RunConfig};

use crate::analysis::{flops, gradcheck, measure, CostReport, GradcheckReport, OpKind};
use crate::attention::{AttentionDecoder, WauConfig};
use crate::conv::TransposedUpsample;
use crate::error::{Result, WauError};
use crate::params::{Graph, ParamStore};
use crate::tensor::{CustomBackward, Shape, Tensor, Var};
use crate::toyseg::{self, build_toynet, checkpoint, gen_sample, train::forward_sample, ToyNetConfig};
use crate::wau::{UpsamplerKind, WauStage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "wau", version, about = "Window attention upsampling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `[train] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "wau-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Central-difference gradient check of the configured target.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Analytic and measured FLOP / memory counts as CSV.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Double H2 and W2 over four points.
        #[arg(long)]
        sweep: bool,
    },
    /// Train the toy segmentation net; writes metrics.csv and checkpoint/.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from OUT/checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Mean DSC and HD of a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to OUT/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the freshly initialized model instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
    },
    /// Write one PGM per decoder stage for a validation sample.
    ExportViz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation sample index.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Average attention of windows with ground-truth positives.
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        attn: bool,
        /// Channel mean of each upsampler output.
        #[arg(long)]
        features: bool,
    },
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, WauError::Config(_)) {
                let _ = writeln!(err, "run `wau --help` for usage");
                EXIT_USAGE
            } else {
                EXIT_CHECK_FAILED
            }
        }
    }
}

/// Load, override and validate the configuration.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| WauError::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gradcheck { common } => cmd_gradcheck(&load_config(common)?, out),
        Command::Flops { common, sweep } => cmd_flops(&load_config(common)?, *sweep, out),
        Command::Train { common, resume } => cmd_train(&load_config(common)?, &common.out, *resume, out),
        Command::Eval {
            common,
            checkpoint,
            untrained,
        } => {
            let cfg = load_config(common)?;
            let dir = checkpoint.clone().unwrap_or_else(|| common.out.join("checkpoint"));
            cmd_eval(&cfg, (!untrained).then_some(dir.as_path()), out)
        }
        Command::ExportViz {
            common,
            checkpoint,
            sample,
            attn,
            features: _,
        } => cmd_export_viz(&load_config(common)?, checkpoint, *sample, *attn, &common.out, out, err),
    }
}

/// Identity whose backward doubles the gradient; a mutation fixture for
/// checking the checker.
struct DoubledGrad;

impl CustomBackward<f64> for DoubledGrad {
    fn backward(&self, _inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![grad.map(|g| 2.0 * g)]
    }
}

fn maybe_corrupt(g: &mut Graph<'_, f64>, y: Var, corrupt: bool) -> Result<Var> {
    if !corrupt {
        return Ok(y);
    }
    let value = g.value(y).clone();
    g.custom("corrupted_identity", &[y], value, Box::new(DoubledGrad))
}

fn gradcheck_wau_config(cfg: &RunConfig) -> WauConfig {
    WauConfig {
        window: cfg.analysis.gradcheck_window,
        heads: cfg.analysis.gradcheck_heads,
        embed_dim: None,
        ..cfg.model.wau.clone()
    }
}

/// Gradient check of the `[analysis]` target.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let a = &cfg.analysis;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParamStore::<f64>::new();
    let (c, s, n) = (a.gradcheck_channels, a.gradcheck_size, cfg.model.wau.ratio);
    let corrupt = a.corrupt_backward;
    let step = a.gradcheck_step.unwrap_or(a.gradcheck_target.default_step());
    let rand = |shape: Shape, rng: &mut ChaCha8Rng| Tensor::uniform(shape, -1.0, 1.0, rng);
    match a.gradcheck_target {
        GradcheckTarget::WauStage => {
            let stage = WauStage::new(&mut store, "stage", &gradcheck_wau_config(cfg), c, c, &mut rng)?;
            let inputs = [rand(Shape::new(1, c, n * s, n * s), &mut rng), rand(Shape::new(1, c, s, s), &mut rng)];
            gradcheck(&store, &inputs, step, |g: &mut Graph<'_, f64>, x: &[Var]| {
                let y = stage.forward(g, x[0], x[1], false)?.0;
                maybe_corrupt(g, y, corrupt)
            })
        }
        GradcheckTarget::Wad => {
            let dec = AttentionDecoder::new(&mut store, "wad", &gradcheck_wau_config(cfg), c, c, &mut rng)?;
            let inputs = [rand(Shape::new(1, c, n * s, n * s), &mut rng), rand(Shape::new(1, c, s, s), &mut rng)];
            gradcheck(&store, &inputs, step, |g: &mut Graph<'_, f64>, x: &[Var]| {
                let y = dec.wad_forward(g, x[0], x[1], false)?.0;
                maybe_corrupt(g, y, corrupt)
            })
        }
        GradcheckTarget::Bilinear => {
            let inputs = [rand(Shape::new(1, c, s, s), &mut rng)];
            gradcheck(&store, &inputs, step, |g: &mut Graph<'_, f64>, x: &[Var]| {
                let y = g.bilinear_upsample(x[0], n)?;
                maybe_corrupt(g, y, corrupt)
            })
        }
        GradcheckTarget::Transposed => {
            let t = TransposedUpsample::new(&mut store, "up", c, c, n, &mut rng)?;
            let inputs = [rand(Shape::new(1, c, s, s), &mut rng)];
            gradcheck(&store, &inputs, step, |g: &mut Graph<'_, f64>, x: &[Var]| {
                let y = t.forward(g, x[0])?;
                maybe_corrupt(g, y, corrupt)
            })
        }
        GradcheckTarget::ToyNet => {
            let upsampler = match cfg.upsampler_kind()? {
                UpsamplerKind::Wau(_) => UpsamplerKind::Wau(gradcheck_wau_config(cfg)),
                UpsamplerKind::WadOnly(_) => UpsamplerKind::WadOnly(gradcheck_wau_config(cfg)),
                other => other,
            };
            let net_cfg = ToyNetConfig {
                depth: cfg.model.depth,
                base_channels: a.gradcheck_base_channels,
                classes: cfg.model.classes,
                upsampler,
            };
            let side = a.gradcheck_image;
            let net = build_toynet(&net_cfg, side, side, &mut store, &mut rng)?;
            let spec = toyseg::DataSpec {
                height: side,
                width: side,
                classes: cfg.model.classes as u8,
                noise: cfg.data.noise,
                divisor: net_cfg.size_divisor(),
            };
            let sample = gen_sample(&spec, cfg.train.seed, 0)?;
            let labels: Vec<usize> = sample.mask.labels().iter().map(|&l| usize::from(l)).collect();
            let inputs = [sample.image.cast::<f64>()];
            gradcheck(&store, &inputs, step, |g: &mut Graph<'_, f64>, x: &[Var]| {
                let logits = net.forward(g, x[0], false)?.logits;
                let logits = maybe_corrupt(g, logits, corrupt)?;
                g.seg_loss(logits, &labels)
            })
        }
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let report = run_gradcheck(cfg)?;
    let threshold = cfg.analysis.gradcheck_threshold;
    let ok = report.passes(threshold);
    writeln!(
        out,
        "gradcheck {}: {} -> {} (threshold {threshold:e})",
        cfg.analysis.gradcheck_target.name(),
        report,
        if ok { "PASS" } else { "FAIL" }
    )?;
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub const FLOPS_HEADER_EXTRA: &str = "ratio,attn_ratio,note";

/// Attention-product part of the analytic FLOPs (total minus projections).
fn attention_term(op: OpKind, cfg: &measure::CostConfig) -> Result<u64> {
    let (h, w, c, k, n) = (cfg.h2 as u64, cfg.w2 as u64, cfg.c as u64, cfg.k as u64, cfg.n as u64);
    Ok(cfg.analytic_flops(op)? - flops::projection_flops(h, w, c, k, n)?)
}

/// CSV rows for `flops`; the bool says whether every measured row matched.
pub fn flops_csv(cfg: &RunConfig, sweep: bool) -> Result<(String, bool)> {
    let base = cfg.cost_config();
    let points = if sweep { 4 } else { 1 };
    let mut csv = format!("{},{FLOPS_HEADER_EXTRA}\n", CostReport::CSV_HEADER);
    let mut all_exact = true;
    for &op in &cfg.analysis.flops_ops {
        let mut prev: Option<(u64, u64)> = None;
        for i in 0..points {
            let pc = base.with_size(base.h2 << i, base.w2 << i);
            let analytic = pc.analytic_flops(op)?;
            let attn = attention_term(op, &pc)?;
            let mem = pc.analytic_mem(op)?;
            let (ratio, attn_ratio) = match prev {
                Some((f, a)) => (format!("{}", analytic as f64 / f as f64), format!("{}", attn as f64 / a as f64)),
                None => (String::new(), String::new()),
            };
            prev = Some((analytic, attn));
            let c = &pc;
            let row = if mem > cfg.analysis.mem_budget {
                format!(
                    "{op},{},{},{},{},{},{},{analytic},{mem},,,{ratio},{attn_ratio},mem_{op} {mem} exceeds budget {}; measurement skipped",
                    c.h2, c.w2, c.c, c.k, c.n, c.m2, cfg.analysis.mem_budget
                )
            } else {
                let report = measure::measure(op, &pc, cfg.train.seed)?;
                let note = match report.diagnostic() {
                    Some(d) => {
                        all_exact = false;
                        format!("MISMATCH {d}")
                    }
                    None => "exact".to_string(),
                };
                format!("{},{ratio},{attn_ratio},{note}", report.csv_row())
            };
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    Ok((csv, all_exact))
}

pub fn cmd_flops(cfg: &RunConfig, sweep: bool, out: &mut dyn Write) -> Result<i32> {
    let (csv, exact) = flops_csv(cfg, sweep)?;
    out.write_all(csv.as_bytes())?;
    Ok(if exact { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn cmd_train(cfg: &RunConfig, dir: &Path, resume: bool, out: &mut dyn Write) -> Result<i32> {
    let setup = cfg.setup()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.serialize())?;
    let run = if resume {
        toyseg::resume(&setup, &dir.join("checkpoint"), Some(dir))?
    } else {
        toyseg::train(&setup, Some(dir))?
    };
    match run.last() {
        Some(r) => writeln!(
            out,
            "{} epochs, {} steps: val_dsc {:.4} val_hd {:.3} ({})",
            r.epoch,
            r.step,
            r.val_dsc,
            r.val_hd,
            cfg.model.upsampler
        )?,
        None => writeln!(out, "stopped after {} steps before the first epoch ended", run.adam.step)?,
    }
    Ok(EXIT_OK)
}

fn load_model(cfg: &RunConfig, checkpoint_dir: Option<&Path>) -> Result<(toyseg::ToyNet, ParamStore<f32>)> {
    let setup = cfg.setup()?;
    let (net, store) = setup.init_model()?;
    match checkpoint_dir {
        Some(dir) => {
            let run = checkpoint::load(dir, &store)?;
            Ok((net, run.store))
        }
        None => Ok((net, store)),
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint_dir: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let setup = cfg.setup()?;
    let (net, store) = load_model(cfg, checkpoint_dir)?;
    let (_, val) = setup.datasets()?;
    let (dsc, hd) = toyseg::evaluate(&net, &store, &val, setup.train.batch_size)?;
    writeln!(out, "val_dsc={dsc:.6} val_hd={hd:.4} samples={}", val.len())?;
    Ok(EXIT_OK)
}

/// Row-stochastic tolerance checked before any aggregation.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

pub fn cmd_export_viz(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    sample: usize,
    attn: bool,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let setup = cfg.setup()?;
    if sample >= setup.data.val_count {
        return Err(WauError::Config(format!(
            "sample {sample} out of range for {} validation samples",
            setup.data.val_count
        )));
    }
    if attn && !setup.model.upsampler.needs_lateral() {
        return Err(WauError::Config(format!(
            "upsampler `{}` records no attention; use --features",
            setup.model.upsampler.name()
        )));
    }
    let (net, store) = load_model(cfg, Some(checkpoint_dir))?;
    let s = gen_sample(&setup.data_spec(), setup.seed, setup.data.train_count + sample)?;
    export_sample(&net, &store, &s, attn, dir, out, err)
}

/// Render one sample's decoder stages into `dir`; see [`cmd_export_viz`].
pub fn export_sample(
    net: &toyseg::ToyNet,
    store: &ParamStore<f32>,
    s: &toyseg::SynthSample,
    attn: bool,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let (records, features) = forward_sample(net, store, s)?;
    if !attn {
        fs::create_dir_all(dir)?;
        for (i, f) in features.iter().enumerate() {
            let map = viz::feature_map(f);
            let path = dir.join(format!("stage{i}_features.pgm"));
            pgm::write(&path, map.width, map.height, &map.values)?;
            writeln!(out, "{}", path.display())?;
        }
        return Ok(EXIT_OK);
    }
    if records.is_empty() {
        return Err(WauError::Config("the model's upsamplers record no attention; use --features".into()));
    }
    if s.mask.labels().iter().all(|&l| l == 0) {
        writeln!(
            err,
            "notice: sample {} has no ground-truth positive pixels; no attention map written",
            s.index
        )?;
        return Ok(EXIT_OK);
    }
    for rec in &records {
        let e = rec.max_row_sum_error();
        if e > ROW_SUM_TOLERANCE {
            writeln!(err, "stage {}: attention rows deviate from 1 by {e:e}", rec.layer)?;
            return Ok(EXIT_CHECK_FAILED);
        }
    }
    fs::create_dir_all(dir)?;
    for (i, rec) in records.iter().enumerate() {
        let fs = features[i].shape();
        let windows = viz::positive_windows(rec, &s.mask, fs.h, fs.w);
        let map = viz::attention_map(rec, &windows)?;
        let path = dir.join(format!("stage{i}_attn.pgm"));
        pgm::write(&path, map.width, map.height, &map.values)?;
        writeln!(out, "{} ({} of {} windows)", path.display(), windows.len(), rec.coords.len())?;
    }
    Ok(EXIT_OK)
}

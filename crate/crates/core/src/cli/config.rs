//! Run configuration: `key = value` lines under `[model]`, `[train]`,
//! `[data]` and `[analysis]` headers. `#` starts a comment. Every key is
//! optional and unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::analysis::{CostConfig, OpKind};
use crate::attention::WauConfig;
use crate::conv::ConvVariant;
use crate::error::{Result, WauError};
use crate::toyseg::{DataConfig, Setup, ToyNetConfig, TrainConfig};
use crate::wau::UpsamplerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckTarget {
    /// One WAU stage (attention branch plus bilinear residual).
    WauStage,
    /// The attention decoder alone.
    Wad,
    /// The toy network under the segmentation loss.
    ToyNet,
    Bilinear,
    Transposed,
}

impl GradcheckTarget {
    pub fn name(self) -> &'static str {
        match self {
            GradcheckTarget::WauStage => "wau_stage",
            GradcheckTarget::Wad => "wad",
            GradcheckTarget::ToyNet => "toynet",
            GradcheckTarget::Bilinear => "bilinear",
            GradcheckTarget::Transposed => "transposed",
        }
    }

    /// The toy net's ReLUs and max pools put kinks within 1e-5 of some
    /// activations for typical seeds, so it gets a smaller step.
    pub fn default_step(self) -> f64 {
        match self {
            GradcheckTarget::ToyNet => 1e-6,
            _ => 1e-5,
        }
    }
}

impl FromStr for GradcheckTarget {
    type Err = WauError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "wau_stage" => GradcheckTarget::WauStage,
            "wad" => GradcheckTarget::Wad,
            "toynet" => GradcheckTarget::ToyNet,
            "bilinear" => GradcheckTarget::Bilinear,
            "transposed" => GradcheckTarget::Transposed,
            _ => {
                return Err(WauError::Config(format!(
                    "unknown gradcheck target `{s}` (wau_stage | wad | toynet | bilinear | transposed)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub classes: usize,
    /// `bilinear | transposed | wad_only | wau`.
    pub upsampler: String,
    pub wau: WauConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSection {
    pub gradcheck_target: GradcheckTarget,
    pub gradcheck_threshold: f64,
    /// Central-difference step; `none` picks [`GradcheckTarget::default_step`].
    pub gradcheck_step: Option<f64>,
    /// Channels of the gradcheck tensors (lateral and input maps).
    pub gradcheck_channels: usize,
    /// Side of the key/value map for stage targets; the toy net uses
    /// `gradcheck_image`.
    pub gradcheck_size: usize,
    pub gradcheck_window: usize,
    pub gradcheck_heads: usize,
    pub gradcheck_image: usize,
    pub gradcheck_base_channels: usize,
    /// Testing hook: route the target output through an op whose backward
    /// rule is deliberately wrong.
    pub corrupt_backward: bool,
    pub flops_h2: usize,
    pub flops_w2: usize,
    pub flops_c: usize,
    pub flops_k: usize,
    pub flops_n: usize,
    pub flops_m2: usize,
    pub flops_ops: Vec<OpKind>,
    /// Sweep points above this many analytic memory elements are reported
    /// but not measured.
    pub mem_budget: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataConfig,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection {
                depth: 2,
                base_channels: 8,
                classes: 1,
                upsampler: "wau".into(),
                wau: WauConfig {
                    heads: 2,
                    ..WauConfig::default()
                },
            },
            train: TrainSection {
                train: TrainConfig::default(),
                seed: 7,
            },
            data: DataConfig::default(),
            analysis: AnalysisSection {
                gradcheck_target: GradcheckTarget::WauStage,
                gradcheck_threshold: 1e-4,
                gradcheck_step: None,
                gradcheck_channels: 4,
                gradcheck_size: 2,
                gradcheck_window: 2,
                gradcheck_heads: 2,
                gradcheck_image: 16,
                gradcheck_base_channels: 4,
                corrupt_backward: false,
                flops_h2: 8,
                flops_w2: 8,
                flops_c: 16,
                flops_k: 3,
                flops_n: 2,
                flops_m2: 4,
                flops_ops: vec![OpKind::Ad, OpKind::Wad],
                mem_budget: 1 << 24,
            },
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| WauError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(WauError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn ops(key: &str, v: &str) -> Result<Vec<OpKind>> {
    let list: Vec<OpKind> = v
        .split(',')
        .map(|s| match s.trim() {
            "ad" => Ok(OpKind::Ad),
            "wad" => Ok(OpKind::Wad),
            other => Err(WauError::Config(format!("`{key}`: unknown op `{other}` (ad | wad)"))),
        })
        .collect::<Result<_>>()?;
    Ok(list)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: WauError| WauError::Config(format!("line {}: {}", lineno + 1, e.to_string().trim_start_matches("config error: ")));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "train", "data", "analysis"].contains(&name) {
                    return Err(at(WauError::Config(format!("unknown section [{name}]"))));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(WauError::Config(format!("expected `key = value`, got `{line}`"))))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| at(WauError::Config(format!("`{key}` appears before any section header"))))?;
            cfg.set(sec, key, val).map_err(at)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let w = &mut m.wau;
        let t = &mut self.train.train;
        let d = &mut self.data;
        let a = &mut self.analysis;
        match (section, key) {
            ("model", "depth") => m.depth = value(key, v)?,
            ("model", "base_channels") => m.base_channels = value(key, v)?,
            ("model", "classes") => m.classes = value(key, v)?,
            ("model", "upsampler") => m.upsampler = v.to_string(),
            ("model", "ratio") => w.ratio = value(key, v)?,
            ("model", "window") => w.window = value(key, v)?,
            ("model", "heads") => w.heads = value(key, v)?,
            ("model", "proj_conv") => w.proj_conv = ConvVariant::parse(v)?,
            ("model", "proj_kernel") => w.proj_kernel = value(key, v)?,
            ("model", "proj_bias") => w.proj_bias = boolean(key, v)?,
            ("model", "out_conv") => w.out_conv = ConvVariant::parse(v)?,
            ("model", "out_kernel") => w.out_kernel = value(key, v)?,
            ("model", "ln_eps") => w.ln_eps = value(key, v)?,
            ("model", "residual_adapter") => w.residual_adapter = boolean(key, v)?,
            ("train", "epochs") => t.epochs = value(key, v)?,
            ("train", "batch_size") => t.batch_size = value(key, v)?,
            ("train", "lr") => t.lr = value(key, v)?,
            ("train", "warmup_epochs") => t.warmup_epochs = value(key, v)?,
            ("train", "augment") => t.augment = boolean(key, v)?,
            ("train", "stop_after_steps") => t.stop_after_steps = optional(key, v)?,
            ("train", "seed") => self.train.seed = value(key, v)?,
            ("data", "height") => d.height = value(key, v)?,
            ("data", "width") => d.width = value(key, v)?,
            ("data", "noise") => d.noise = value(key, v)?,
            ("data", "train_count") => d.train_count = value(key, v)?,
            ("data", "val_count") => d.val_count = value(key, v)?,
            ("analysis", "gradcheck_target") => a.gradcheck_target = v.parse()?,
            ("analysis", "gradcheck_threshold") => a.gradcheck_threshold = value(key, v)?,
            ("analysis", "gradcheck_step") => a.gradcheck_step = optional(key, v)?,
            ("analysis", "gradcheck_channels") => a.gradcheck_channels = value(key, v)?,
            ("analysis", "gradcheck_size") => a.gradcheck_size = value(key, v)?,
            ("analysis", "gradcheck_window") => a.gradcheck_window = value(key, v)?,
            ("analysis", "gradcheck_heads") => a.gradcheck_heads = value(key, v)?,
            ("analysis", "gradcheck_image") => a.gradcheck_image = value(key, v)?,
            ("analysis", "gradcheck_base_channels") => a.gradcheck_base_channels = value(key, v)?,
            ("analysis", "corrupt_backward") => a.corrupt_backward = boolean(key, v)?,
            ("analysis", "flops_h2") => a.flops_h2 = value(key, v)?,
            ("analysis", "flops_w2") => a.flops_w2 = value(key, v)?,
            ("analysis", "flops_c") => a.flops_c = value(key, v)?,
            ("analysis", "flops_k") => a.flops_k = value(key, v)?,
            ("analysis", "flops_n") => a.flops_n = value(key, v)?,
            ("analysis", "flops_m2") => a.flops_m2 = value(key, v)?,
            ("analysis", "flops_ops") => a.flops_ops = ops(key, v)?,
            ("analysis", "mem_budget") => a.mem_budget = value(key, v)?,
            _ => return Err(WauError::Config(format!("unknown key `{key}` in [{section}]"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize())` reproduces `self`.
    pub fn serialize(&self) -> String {
        let (m, w) = (&self.model, &self.model.wau);
        let t = &self.train.train;
        let d = &self.data;
        let a = &self.analysis;
        let ops: Vec<String> = a.flops_ops.iter().map(OpKind::to_string).collect();
        let sections: [(&str, Vec<(&str, String)>); 4] = [
            (
                "model",
                vec![
                    ("depth", m.depth.to_string()),
                    ("base_channels", m.base_channels.to_string()),
                    ("classes", m.classes.to_string()),
                    ("upsampler", m.upsampler.clone()),
                    ("ratio", w.ratio.to_string()),
                    ("window", w.window.to_string()),
                    ("heads", w.heads.to_string()),
                    ("proj_conv", w.proj_conv.to_string()),
                    ("proj_kernel", w.proj_kernel.to_string()),
                    ("proj_bias", w.proj_bias.to_string()),
                    ("out_conv", w.out_conv.to_string()),
                    ("out_kernel", w.out_kernel.to_string()),
                    ("ln_eps", format!("{:e}", w.ln_eps)),
                    ("residual_adapter", w.residual_adapter.to_string()),
                ],
            ),
            (
                "train",
                vec![
                    ("epochs", t.epochs.to_string()),
                    ("batch_size", t.batch_size.to_string()),
                    ("lr", format!("{:e}", t.lr)),
                    ("warmup_epochs", t.warmup_epochs.to_string()),
                    ("augment", t.augment.to_string()),
                    ("stop_after_steps", show_opt(&t.stop_after_steps)),
                    ("seed", self.train.seed.to_string()),
                ],
            ),
            (
                "data",
                vec![
                    ("height", d.height.to_string()),
                    ("width", d.width.to_string()),
                    ("noise", format!("{:e}", d.noise)),
                    ("train_count", d.train_count.to_string()),
                    ("val_count", d.val_count.to_string()),
                ],
            ),
            (
                "analysis",
                vec![
                    ("gradcheck_target", a.gradcheck_target.name().to_string()),
                    ("gradcheck_threshold", format!("{:e}", a.gradcheck_threshold)),
                    ("gradcheck_step", show_opt(&a.gradcheck_step)),
                    ("gradcheck_channels", a.gradcheck_channels.to_string()),
                    ("gradcheck_size", a.gradcheck_size.to_string()),
                    ("gradcheck_window", a.gradcheck_window.to_string()),
                    ("gradcheck_heads", a.gradcheck_heads.to_string()),
                    ("gradcheck_image", a.gradcheck_image.to_string()),
                    ("gradcheck_base_channels", a.gradcheck_base_channels.to_string()),
                    ("corrupt_backward", a.corrupt_backward.to_string()),
                    ("flops_h2", a.flops_h2.to_string()),
                    ("flops_w2", a.flops_w2.to_string()),
                    ("flops_c", a.flops_c.to_string()),
                    ("flops_k", a.flops_k.to_string()),
                    ("flops_n", a.flops_n.to_string()),
                    ("flops_m2", a.flops_m2.to_string()),
                    ("flops_ops", ops.join(",")),
                    ("mem_budget", a.mem_budget.to_string()),
                ],
            ),
        ];
        let mut s = String::new();
        for (i, (name, entries)) in sections.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn upsampler_kind(&self) -> Result<UpsamplerKind> {
        UpsamplerKind::from_name(&self.model.upsampler, &self.model.wau)
    }

    pub fn setup(&self) -> Result<Setup> {
        Ok(Setup {
            model: ToyNetConfig {
                depth: self.model.depth,
                base_channels: self.model.base_channels,
                classes: self.model.classes,
                upsampler: self.upsampler_kind()?,
            },
            data: self.data.clone(),
            train: self.train.train.clone(),
            seed: self.train.seed,
        })
    }

    pub fn cost_config(&self) -> CostConfig {
        let a = &self.analysis;
        CostConfig {
            h2: a.flops_h2,
            w2: a.flops_w2,
            c: a.flops_c,
            k: a.flops_k,
            n: a.flops_n,
            m2: a.flops_m2,
            heads: 1,
        }
    }

    /// Validate every section; run before any tensor is allocated.
    pub fn validate(&self) -> Result<()> {
        self.setup()?.validate()?;
        let a = &self.analysis;
        if !(a.gradcheck_threshold > 0.0) || a.gradcheck_step.is_some_and(|h| !(h > 0.0 && h < 1.0)) {
            return Err(WauError::Config("gradcheck threshold and step must be positive (step < 1)".into()));
        }
        if a.gradcheck_channels == 0 || a.gradcheck_size == 0 || a.gradcheck_base_channels == 0 {
            return Err(WauError::Config("gradcheck sizes must be positive".into()));
        }
        if a.gradcheck_window == 0 || !a.gradcheck_size.is_multiple_of(a.gradcheck_window) {
            return Err(WauError::Config(format!(
                "gradcheck_size {} not divisible by gradcheck_window {}",
                a.gradcheck_size, a.gradcheck_window
            )));
        }
        if a.gradcheck_heads == 0 || !a.gradcheck_channels.is_multiple_of(a.gradcheck_heads) {
            return Err(WauError::Config("gradcheck_heads must divide gradcheck_channels".into()));
        }
        if a.flops_ops.is_empty() {
            return Err(WauError::Config("flops_ops is empty".into()));
        }
        self.cost_config().validate()?;
        if a.flops_ops.contains(&OpKind::Wad) && (!a.flops_h2.is_multiple_of(a.flops_m2) || !a.flops_w2.is_multiple_of(a.flops_m2)) {
            return Err(WauError::Config(format!(
                "flops map {}x{} not divisible by window {}",
                a.flops_h2, a.flops_w2, a.flops_m2
            )));
        }
        Ok(())
    }
}

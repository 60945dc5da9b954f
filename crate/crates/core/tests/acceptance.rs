//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary so the report is always printed.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use wau::analysis::{flops, measure, CostConfig, OpKind};
use wau::attention::{AttentionDecoder, WauConfig};
use wau::cli::{self, GradcheckTarget, RunConfig};
use wau::conv::{bilinear_upsample, Conv2d, ConvSpec, ConvVariant, TransposedUpsample};
use wau::toyseg::{checkpoint, gen_sample, lr_at, train::forward_sample};
use wau::wau::WauStage;
use wau::windowing::WindowGrid;
use wau::{Graph, ParamStore, Shape, Tensor};

use common::{random, rng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn window_global_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut configs = 0;
    for h in [2, 4] {
        for c in [4, 8] {
            for heads in [1, 2] {
                for seed in 0..3u64 {
                    let cfg = WauConfig {
                        ratio: 2,
                        window: h,
                        heads,
                        ..WauConfig::default()
                    };
                    let mut store = ParamStore::<f64>::new();
                    let dec = AttentionDecoder::new(&mut store, "d", &cfg, c, c, &mut rng(seed)).map_err(e2s)?;
                    let mut g = Graph::new(&store);
                    let l = g.constant(random(Shape::new(2, c, 2 * h, 2 * h), seed + 10)).map_err(e2s)?;
                    let z = g.constant(random(Shape::new(2, c, h, h), seed + 20)).map_err(e2s)?;
                    let w = dec.wad_forward(&mut g, l, z, false).map_err(e2s)?.0;
                    let a = dec.ad_forward(&mut g, l, z).map_err(e2s)?;
                    worst = worst.max(g.value(w).max_abs_diff(g.value(a)));
                    configs += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max |wad - ad| = {worst:e}"))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("{configs} configs, max |wad - ad| = {worst:.2e}"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = WauConfig {
        window: 2,
        heads: 2,
        ..WauConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let stage = WauStage::new(&mut store, "stage", &cfg, 4, 4, &mut rng(1)).map_err(e2s)?;
    let inputs = [random(Shape::new(1, 4, 4, 4), 2), random(Shape::new(1, 4, 2, 2), 3)];
    let stage_report = wau::analysis::gradcheck(&store, &inputs, 1e-5, |g: &mut Graph<'_, f64>, x: &[wau::Var]| {
        Ok(stage.forward(g, x[0], x[1], false)?.0)
    })
    .map_err(e2s)?;
    ensure(stage_report.passes(1e-4), || format!("WAU stage: {stage_report}"))?;

    let mut run = RunConfig::default();
    run.analysis.gradcheck_target = GradcheckTarget::ToyNet;
    ensure(run.model.depth == 2 && run.analysis.gradcheck_image == 16, || "toy net config drifted".into())?;
    let net_report = cli::run_gradcheck(&run).map_err(e2s)?;
    ensure(net_report.passes(1e-4), || format!("toy net: {net_report}"))?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "stage max rel {:.2e}, toy net max rel {:.2e} over {} scalars",
        stage_report.max_rel_error, net_report.max_rel_error, net_report.checked
    ))
}

fn complexity_exactness() -> Outcome {
    let start = Instant::now();
    let base = CostConfig {
        h2: 8,
        w2: 8,
        c: 16,
        k: 3,
        n: 2,
        m2: 4,
        heads: 1,
    };
    let ad = measure(OpKind::Ad, &base, 0).map_err(e2s)?;
    let wad = measure(OpKind::Wad, &base, 0).map_err(e2s)?;
    for (r, f, m) in [(&ad, 1_998_848, 22_528), (&wad, 1_605_632, 10_240)] {
        ensure(r.analytic_flops == f && r.measured_flops == f, || format!("{} flops {r:?}", r.op))?;
        ensure(r.analytic_mem_elems == m && r.measured_peak_elems == m, || format!("{} memory {r:?}", r.op))?;
    }
    let proj = |c: &CostConfig| flops::projection_flops(c.h2 as u64, c.w2 as u64, 16, 3, 2).unwrap();
    let mut prev: Option<CostConfig> = None;
    let mut attn_ratios = Vec::new();
    for i in 0..4 {
        let c = base.with_size(8 << i, 8 << i);
        let w = measure(OpKind::Wad, &c, i).map_err(e2s)?;
        ensure(w.is_exact(), || w.diagnostic().unwrap_or_default())?;
        if i < 2 {
            let a = measure(OpKind::Ad, &c, i).map_err(e2s)?;
            ensure(a.is_exact(), || a.diagnostic().unwrap_or_default())?;
        }
        if let Some(p) = prev {
            let wr = w.analytic_flops as f64 / p.analytic_flops(OpKind::Wad).unwrap() as f64;
            ensure(wr == 4.0, || format!("WAD ratio {wr} at H2={}", c.h2))?;
            let ar = (c.analytic_flops(OpKind::Ad).unwrap() - proj(&c)) as f64
                / (p.analytic_flops(OpKind::Ad).unwrap() - proj(&p)) as f64;
            attn_ratios.push(ar);
        }
        prev = Some(c);
    }
    ensure(attn_ratios.iter().all(|&r| r == 16.0), || format!("AD attention ratios {attn_ratios:?}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("worked values exact, WAD ratio 4, AD attention ratio {attn_ratios:?}"))
}

fn residual_semantics() -> Outcome {
    let cfg = WauConfig {
        window: 2,
        heads: 2,
        ..WauConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let stage = WauStage::new(&mut store, "s", &cfg, 8, 8, &mut rng(5)).map_err(e2s)?;
    let lateral = random(Shape::new(2, 8, 8, 8), 6);
    let z = random(Shape::new(2, 8, 4, 4), 7);

    let mut g = Graph::new(&store);
    let (l, zv) = (g.constant(lateral.clone()).map_err(e2s)?, g.constant(z.clone()).map_err(e2s)?);
    let full = stage.forward(&mut g, l, zv, false).map_err(e2s)?.0;
    let att = stage.decoder().wad_forward(&mut g, l, zv, false).map_err(e2s)?.0;
    let res = stage.residual(&mut g, zv).map_err(e2s)?;
    let sum = g.add(att, res).map_err(e2s)?;
    let additivity = g.value(full).max_abs_diff(g.value(sum));
    ensure(additivity <= 1e-12, || format!("branch additivity {additivity:e}"))?;
    drop(g);

    for id in stage.decoder().conv_out().param_ids() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new(&store);
    let (l, zv) = (g.constant(lateral).map_err(e2s)?, g.constant(z.clone()).map_err(e2s)?);
    let y = stage.forward(&mut g, l, zv, false).map_err(e2s)?.0;
    let bil = bilinear_upsample(&z, 2).map_err(e2s)?;
    let same = g.value(y).data().iter().zip(bil.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same && g.value(y).shape() == bil.shape(), || "zeroed output conv is not bitwise bilinear".into())?;
    Ok(format!("zeroed branch bitwise bilinear, additivity {additivity:.1e}"))
}

fn kernel_oracles() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (i, variant) in [
        ConvVariant::Regular,
        ConvVariant::Grouped(2),
        ConvVariant::DepthwiseSeparable,
    ]
    .into_iter()
    .enumerate()
    {
        for k in [1, 3, 5] {
            for (h, w) in [(3, 3), (5, 7), (8, 8)] {
                let seed = (i * 100 + k * 10 + h) as u64;
                let mut store = ParamStore::<f64>::new();
                let conv = Conv2d::new(&mut store, "c", ConvSpec::regular(4, 6, k).with_variant(variant), &mut rng(seed))
                    .map_err(e2s)?;
                let x = random(Shape::new(2, 4, h, w), seed + 1);
                let mut g = Graph::new(&store);
                let xv = g.constant(x.clone()).map_err(e2s)?;
                let y = conv.forward(&mut g, xv).map_err(e2s)?;
                let ids = conv.kernel_ids();
                let bias = conv.bias_id().map(|b| store.get(b));
                let want = match variant {
                    ConvVariant::DepthwiseSeparable => {
                        let mid = common::conv(&x, store.get(ids[0]), None, 4);
                        common::conv(&mid, store.get(ids[1]), bias, 1)
                    }
                    ConvVariant::Grouped(gs) => common::conv(&x, store.get(ids[0]), bias, gs),
                    ConvVariant::Regular => common::conv(&x, store.get(ids[0]), bias, 1),
                };
                worst = worst.max(g.value(y).max_abs_diff(&want));
                cases += 1;
            }
        }
    }
    for factor in [2, 3] {
        for (h, w) in [(2, 2), (4, 3), (4, 4)] {
            let x = random(Shape::new(1, 3, h, w), (factor * h * w) as u64);
            let b = bilinear_upsample(&x, factor).map_err(e2s)?;
            worst = worst.max(b.max_abs_diff(&common::bilinear(&x, factor)));
            let mut store = ParamStore::<f64>::new();
            let t = TransposedUpsample::new(&mut store, "t", 3, 2, factor, &mut rng(h as u64)).map_err(e2s)?;
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone()).map_err(e2s)?;
            let y = t.forward(&mut g, xv).map_err(e2s)?;
            let want = common::transposed(&x, store.get(t.weight_id()), store.get(t.bias_id()), factor);
            worst = worst.max(g.value(y).max_abs_diff(&want));
            cases += 2;
        }
    }
    ensure(worst < 1e-6, || format!("max oracle deviation {worst:e}"))?;
    for (m, s) in [(1, Shape::new(1, 2, 3, 3)), (2, Shape::new(2, 3, 4, 8)), (4, Shape::new(1, 5, 8, 8))] {
        let x: Tensor<f64> = random(s, m as u64);
        let back = WindowGrid::partition(&x, m).map_err(e2s)?.merge();
        let same = back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("partition/merge not bitwise for m={m} {s}"))?;
    }
    Ok(format!("{cases} kernel cases, max deviation {worst:.1e}; round trips bitwise"))
}

struct TrainedRuns {
    root: tempfile::TempDir,
}

impl TrainedRuns {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
}

fn upsampler_config(kind: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.upsampler = kind.to_string();
    cfg
}

fn end_to_end(runs: &TrainedRuns) -> Outcome {
    let start = Instant::now();
    let mut dsc = Vec::new();
    for kind in ["wau", "wad_only", "bilinear", "transposed"] {
        let cfg = upsampler_config(kind);
        let dir = runs.dir(kind);
        let t = Instant::now();
        let mut sink = Vec::new();
        let code = cli::cmd_train(&cfg, &dir, false, &mut sink).map_err(|e| format!("{kind}: {e}"))?;
        ensure(code == cli::EXIT_OK, || format!("{kind}: train exit {code}"))?;
        let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(e2s)?;
        let rows = csv.lines().count() - 1;
        ensure(rows == cfg.train.train.epochs, || format!("{kind}: {rows} metric rows"))?;
        let finite = csv.lines().skip(1).flat_map(|l| l.split(',')).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite));
        ensure(finite, || format!("{kind}: non-finite metric"))?;
        let mut out = Vec::new();
        cli::cmd_eval(&cfg, Some(&dir.join("checkpoint")), &mut out).map_err(e2s)?;
        let text = String::from_utf8(out).map_err(e2s)?;
        let v: f64 = text
            .split_whitespace()
            .next()
            .and_then(|s| s.strip_prefix("val_dsc="))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("unparsable eval output `{text}`"))?;
        println!("    {kind:<10} val DSC {v:.4}  ({:.1?})", t.elapsed());
        dsc.push((kind, v));
    }
    let wau_dsc = dsc[0].1;
    ensure(wau_dsc >= 0.90, || format!("WAU val DSC {wau_dsc:.4} < 0.90"))?;
    within(Duration::from_secs(600), start)?;
    let table: Vec<String> = dsc.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    Ok(table.join(", "))
}

fn determinism(runs: &TrainedRuns) -> Outcome {
    let first = fs::read(runs.dir("wau").join("metrics.csv")).map_err(|e| format!("criterion 6 output missing: {e}"))?;
    let dir = runs.dir("wau_repeat");
    cli::cmd_train(&upsampler_config("wau"), &dir, false, &mut Vec::new()).map_err(e2s)?;
    let second = fs::read(dir.join("metrics.csv")).map_err(e2s)?;
    ensure(first == second, || "metrics CSV differs between identical runs".into())?;
    Ok(format!("{} bytes identical", first.len()))
}

fn schedule() -> Outcome {
    let (total, warmup, lr) = (1000, 100, 1e-4);
    let at_warmup = lr_at(warmup, total, warmup, lr);
    let at_end = lr_at(total, total, warmup, lr);
    ensure(at_warmup == 1e-4, || format!("lr at warmup end {at_warmup:e}"))?;
    ensure(at_end.abs() <= 1e-12, || format!("lr at final step {at_end:e}"))?;
    let mid = lr_at(warmup + (total - warmup) / 2, total, warmup, lr);
    ensure((mid - lr / 2.0).abs() < 1e-15, || format!("lr at decay midpoint {mid:e}"))?;
    Ok(format!("lr(warmup) = {at_warmup:e}, lr(total) = {at_end:e}"))
}

fn files_in(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).map_err(e2s)? {
        let e = e.map_err(e2s)?;
        v.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).map_err(e2s)?));
    }
    v.sort();
    Ok(v)
}

fn visualization(runs: &TrainedRuns) -> Outcome {
    let ck = runs.dir("wau").join("checkpoint");
    ensure(ck.join("state.txt").exists(), || "criterion 6 checkpoint missing".into())?;
    let cfg = RunConfig::default();
    let setup = cfg.setup().map_err(e2s)?;
    let (net, template) = setup.init_model().map_err(e2s)?;
    let store = checkpoint::load(&ck, &template).map_err(e2s)?.store;
    let stages = net.stages();

    let mut worst_row: f64 = 0.0;
    for i in 0..setup.data.val_count {
        let s = gen_sample(&setup.data_spec(), setup.seed, setup.data.train_count + i).map_err(e2s)?;
        let (records, _) = forward_sample(&net, &store, &s).map_err(e2s)?;
        ensure(records.len() == stages, || format!("{} attention records for {stages} stages", records.len()))?;
        for r in &records {
            worst_row = worst_row.max(r.max_row_sum_error());
        }
    }
    ensure(worst_row <= 1e-6, || format!("attention row sums deviate by {worst_row:e}"))?;

    for flag in ["--attn", "--features"] {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = runs.dir(&format!("viz{flag}{rep}"));
            let args = ["wau", "export-viz", "--checkpoint", ck.to_str().unwrap(), "--sample", "0", flag, "--out", out.to_str().unwrap()];
            let (mut o, mut e) = (Vec::new(), Vec::new());
            let code = cli::main_with_args(args, &mut o, &mut e);
            ensure(code == cli::EXIT_OK, || format!("export-viz {flag}: exit {code}: {}", String::from_utf8_lossy(&e)))?;
            outputs.push(files_in(&out)?);
        }
        let kind = flag.trim_start_matches("--");
        let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
        let want: Vec<String> = (0..stages).map(|i| format!("stage{i}_{kind}.pgm")).collect();
        ensure(names == want, || format!("{flag}: files {names:?}"))?;
        ensure(outputs[0] == outputs[1], || format!("{flag}: repeated export differs"))?;
        ensure(outputs[0].iter().all(|(_, b)| b.starts_with(b"P5\n")), || "not binary PGM".into())?;
    }
    Ok(format!("{stages} stages, max row-sum error {worst_row:.1e}, exports deterministic"))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let t = start.elapsed();
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {n} ({name}) [{t:.1?}]: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL criterion {n} ({name}) [{t:.1?}]: {why}");
            false
        }
    }
}

fn main() -> ExitCode {
    let runs = TrainedRuns {
        root: tempfile::tempdir().expect("temp dir"),
    };
    let results = [
        report(1, "window-global equivalence", window_global_equivalence),
        report(2, "gradient correctness", gradient_correctness),
        report(3, "complexity exactness", complexity_exactness),
        report(4, "residual semantics", residual_semantics),
        report(5, "kernel oracles", kernel_oracles),
        report(6, "end-to-end training", || end_to_end(&runs)),
        report(7, "determinism", || determinism(&runs)),
        report(8, "schedule", schedule),
        report(9, "visualization contract", || visualization(&runs)),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

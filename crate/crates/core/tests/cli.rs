use std::fs;
use std::path::Path;

use wau::cli::{export_sample, main_with_args, pgm, viz, RunConfig, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};
use wau::toyseg::{gen_sample, LabelMap, SynthSample};

const SMALL: &str = "\
[model]
base_channels = 4
window = 2

[train]
epochs = 2
lr = 1e-3

[data]
height = 16
width = 16
train_count = 8
val_count = 4
";

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn wau(args: &[&str]) -> Out {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let mut argv = vec!["wau"];
    argv.extend_from_slice(args);
    let code = main_with_args(argv, &mut o, &mut e);
    Out {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = wau(&["gradcheck"]);
    assert_eq!(ok.code, EXIT_OK, "{}{}", ok.stdout, ok.stderr);
    assert!(ok.stdout.contains("max relative error") && ok.stdout.contains("PASS"));

    let bad = write_config(dir.path(), "bad.conf", "[analysis]\ncorrupt_backward = true\n");
    let r = wau(&["gradcheck", "--config", &bad]);
    assert_eq!(r.code, EXIT_CHECK_FAILED);
    assert!(r.stdout.contains("FAIL"));

    let r = wau(&["gradcheck", "--config", dir.path().join("missing.conf").to_str().unwrap()]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("usage"));

    let unknown = write_config(dir.path(), "unknown.conf", "[model]\nwidth = 3\n");
    let r = wau(&["gradcheck", "--config", &unknown]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);

    assert_eq!(wau(&["gradcheck", "--bogus"]).code, EXIT_USAGE);
    assert_eq!(wau(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(wau(&["--help"]).code, EXIT_OK);
}

fn column<'a>(header: &'a str, row: &'a str, name: &str) -> &'a str {
    let i = header.split(',').position(|h| h == name).unwrap();
    row.split(',').nth(i).unwrap()
}

#[test]
fn flops_rows_and_sweep() {
    let r = wau(&["flops"]);
    assert_eq!(r.code, EXIT_OK);
    let lines: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("op,h2,w2,c,k,n,m2,analytic_flops,analytic_mem_elems,measured_flops,measured_peak_elems"));
    assert!(lines[2].starts_with("wad,") && lines[2].contains(",1605632,"));
    assert!(lines[1].contains(",1998848,"));

    let r = wau(&["flops", "--sweep"]);
    assert_eq!(r.code, EXIT_OK);
    let lines: Vec<&str> = r.stdout.lines().collect();
    let header = lines[0];
    let wad: Vec<&str> = lines.iter().copied().filter(|l| l.starts_with("wad,")).collect();
    let ad: Vec<&str> = lines.iter().copied().filter(|l| l.starts_with("ad,")).collect();
    assert_eq!((wad.len(), ad.len()), (4, 4));
    for row in &wad[1..] {
        assert_eq!(column(header, row, "ratio"), "4");
        assert_eq!(column(header, row, "note"), "exact");
    }
    for row in &ad[1..] {
        assert_eq!(column(header, row, "attn_ratio"), "16");
    }
    assert_eq!(column(header, ad[3], "h2"), "64");
    assert!(column(header, ad[3], "note").contains("exceeds budget"));
    assert_eq!(column(header, ad[3], "measured_flops"), "");
}

#[test]
fn train_eval_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "small.conf", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = wau(&["train", "--config", &conf, "--out", out.to_str().unwrap()]);
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    }
    let csv = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    let last = text.lines().last().unwrap();
    let header = text.lines().next().unwrap();

    let r = wau(&["eval", "--config", &conf, "--out", a.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let val_dsc: f64 = column(header, last, "val_dsc").parse().unwrap();
    let reported: f64 = r.stdout.split_whitespace().next().unwrap().trim_start_matches("val_dsc=").parse().unwrap();
    assert!((reported - val_dsc).abs() < 1e-6, "{} vs {last}", r.stdout);

    let r = wau(&["eval", "--config", &conf, "--out", dir.path().join("nothing").to_str().unwrap()]);
    assert_ne!(r.code, EXIT_OK);
    let r = wau(&["eval", "--config", &conf, "--untrained"]);
    assert_eq!(r.code, EXIT_OK);

    let r = wau(&["train", "--config", &conf, "--out", b.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(r.code, EXIT_OK);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert!(fs::read_to_string(b.join("config.txt")).unwrap().contains("seed = 99"));
}

#[test]
fn export_viz_files() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "small.conf", SMALL);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert_eq!(wau(&["train", "--config", &conf, "--out", run_s]).code, EXIT_OK);
    let ck = run.join("checkpoint");
    let ck_s = ck.to_str().unwrap();

    for (kind, flag) in [("features", "--features"), ("attn", "--attn")] {
        let out1 = dir.path().join(format!("{kind}1"));
        let out2 = dir.path().join(format!("{kind}2"));
        for out in [&out1, &out2] {
            let r = wau(&["export-viz", "--config", &conf, "--checkpoint", ck_s, "--sample", "1", flag, "--out", out.to_str().unwrap()]);
            assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
        }
        let mut names: Vec<_> = fs::read_dir(&out1).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, [format!("stage0_{kind}.pgm"), format!("stage1_{kind}.pgm")]);
        for n in &names {
            let bytes = fs::read(out1.join(n)).unwrap();
            assert!(bytes.starts_with(b"P5\n"));
            assert_eq!(bytes, fs::read(out2.join(n)).unwrap());
        }
    }

    let r = wau(&["export-viz", "--config", &conf, "--checkpoint", ck_s, "--sample", "9", "--attn"]);
    assert_eq!(r.code, EXIT_USAGE);
    let r = wau(&["export-viz", "--config", &conf, "--checkpoint", ck_s]);
    assert_eq!(r.code, EXIT_USAGE);
    let bil = write_config(dir.path(), "bil.conf", &SMALL.replace("window = 2", "upsampler = bilinear"));
    let r = wau(&["export-viz", "--config", &bil, "--checkpoint", ck_s, "--attn"]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn empty_selection_writes_nothing() {
    let cfg = RunConfig::parse(SMALL).unwrap();
    let setup = cfg.setup().unwrap();
    let (net, store) = setup.init_model().unwrap();
    let s = gen_sample(&setup.data_spec(), 1, 0).unwrap();
    let empty = SynthSample {
        mask: LabelMap::new(16, 16, vec![0; 256]).unwrap(),
        ..s
    };
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("viz");
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = export_sample(&net, &store, &empty, true, &out, &mut o, &mut e).unwrap();
    assert_eq!(code, EXIT_OK);
    assert!(String::from_utf8(e).unwrap().contains("no ground-truth positive pixels"));
    assert!(!out.exists());
}

#[test]
fn attention_maps_are_convex_combinations() {
    let cfg = RunConfig::parse(SMALL).unwrap();
    let setup = cfg.setup().unwrap();
    let (net, store) = setup.init_model().unwrap();
    let s = gen_sample(&setup.data_spec(), 3, 60).unwrap();
    let (records, feats) = wau::toyseg::train::forward_sample(&net, &store, &s).unwrap();
    assert_eq!(records.len(), 2);
    for (rec, f) in records.iter().zip(&feats) {
        assert!(rec.max_row_sum_error() <= 1e-6);
        let windows = viz::positive_windows(rec, &s.mask, f.shape().h, f.shape().w);
        assert!(!windows.is_empty());
        let all: Vec<usize> = (0..rec.coords.len()).collect();
        let map = viz::attention_map(rec, &all).unwrap();
        assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let side = rec.query_window * rec.kv_window;
        assert_eq!((map.width, map.height), (side, side));
        // each query's tile is one softmax row, so tiles sum to one
        let total: f64 = map.values.iter().sum();
        assert!((total - (rec.query_window * rec.query_window) as f64).abs() < 1e-4);
    }
}

#[test]
fn constant_feature_map_is_mid_gray() {
    assert!(pgm::normalize(&[0.3; 9]).iter().all(|&p| p == 128));
    assert_eq!(pgm::normalize(&[1.0, 2.0, 3.0]), [0, 128, 255]);
}

#[test]
fn shipped_default_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let text = fs::read_to_string(path).unwrap();
    let parsed = RunConfig::parse(&text).unwrap();
    assert_eq!(parsed, RunConfig::default());
    assert_eq!(RunConfig::parse(&parsed.serialize()).unwrap(), parsed);
}

#[test]
fn untrained_model_is_near_chance() {
    let r = wau(&["eval", "--untrained"]);
    assert_eq!(r.code, EXIT_OK);
    let dsc: f64 = r.stdout.split_whitespace().next().unwrap().trim_start_matches("val_dsc=").parse().unwrap();
    assert!(dsc < 0.3, "{}", r.stdout);
}

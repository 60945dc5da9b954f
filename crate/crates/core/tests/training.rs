mod common;

use std::fs;

use wau::attention::WauConfig;
use wau::toyseg::{checkpoint, resume, train, DataConfig, Setup, ToyNetConfig, TrainConfig, TrainRun, METRICS_HEADER};
use wau::wau::UpsamplerKind;
use wau::WauError;

fn small(train_count: usize, epochs: usize) -> Setup {
    Setup {
        model: ToyNetConfig {
            depth: 2,
            base_channels: 4,
            classes: 1,
            upsampler: UpsamplerKind::Wau(WauConfig {
                window: 2,
                heads: 2,
                ..WauConfig::default()
            }),
        },
        data: DataConfig {
            height: 16,
            width: 16,
            train_count,
            val_count: 3,
            ..DataConfig::default()
        },
        train: TrainConfig {
            epochs,
            batch_size: 4,
            warmup_epochs: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        seed: 11,
    }
}

fn param_bits(run: &TrainRun) -> Vec<u32> {
    run.store.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn one_epoch_on_four_samples() {
    let run = train(&small(4, 1), None).unwrap();
    assert_eq!(run.history.len(), 1);
    assert_eq!(run.history[0].step, 1);
    let run = train(&small(10, 3), None).unwrap();
    let steps: Vec<u64> = run.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, [3, 6, 9]);
    for r in &run.history {
        assert!((0.0..=1.0).contains(&r.val_dsc) && r.val_hd >= 0.0 && r.loss >= 0.0);
    }
}

#[test]
fn metrics_file_and_checkpoint_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(&small(8, 2), Some(dir.path())).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2], run.history[1].csv());
    let (net, template) = small(8, 2).init_model().unwrap();
    let loaded = checkpoint::load(&dir.path().join("checkpoint"), &template).unwrap();
    assert_eq!(param_bits(&loaded), param_bits(&run));
    assert_eq!(loaded.history, run.history);
    drop(net);
}

#[test]
fn resume_mid_epoch_matches_uninterrupted_bitwise() {
    let setup = small(12, 2);
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&setup, Some(full_dir.path())).unwrap();
    for stop in [1, 4] {
        let dir = tempfile::tempdir().unwrap();
        let mut first = setup.clone();
        first.train.stop_after_steps = Some(stop);
        let partial = train(&first, Some(dir.path())).unwrap();
        assert_eq!(partial.adam.step, stop);
        assert!(partial.batch > 0, "stop {stop} should land mid-epoch");
        let resumed = resume(&setup, &dir.path().join("checkpoint"), Some(dir.path())).unwrap();
        assert_eq!(param_bits(&resumed), param_bits(&full), "stop {stop}");
        assert_eq!(
            fs::read(dir.path().join("metrics.csv")).unwrap(),
            fs::read(full_dir.path().join("metrics.csv")).unwrap()
        );
    }
}

#[test]
fn divergence_aborts_with_a_diagnostic_checkpoint() {
    let mut setup = small(8, 3);
    setup.train.lr = 1e30;
    setup.train.warmup_epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&setup, Some(dir.path())).unwrap_err();
    assert!(matches!(err, WauError::NonFinite { .. }), "{err}");
    let diag = dir.path().join("diagnostic");
    assert!(diag.join("state.txt").exists());
    let (_, template) = setup.init_model().unwrap();
    let snap = checkpoint::load(&diag, &template).unwrap();
    assert!(snap.store.tensors().iter().all(|t| t.is_finite()));
}

#[test]
fn invalid_setups_are_rejected_before_training() {
    let mut s = small(0, 1);
    assert!(train(&s, None).is_err());
    s = small(4, 1);
    s.data.height = 20;
    assert!(train(&s, None).is_err());
    s = small(4, 1);
    s.train.batch_size = 0;
    assert!(train(&s, None).is_err());
}

#[test]
fn checkpoint_from_another_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    train(&small(4, 1), Some(dir.path())).unwrap();
    let mut other = small(4, 1);
    other.model.upsampler = UpsamplerKind::Bilinear { factor: 2 };
    assert!(resume(&other, &dir.path().join("checkpoint"), None).is_err());
}

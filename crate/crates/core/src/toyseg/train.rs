//! Deterministic training loop with resumable state.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::data::{gen_dataset_from, DataSpec, LabelMap, SynthSample, Transform};
use super::metrics::{mean_dsc, mean_hd};
use super::model::{build_toynet, ToyNet, ToyNetConfig};
use super::optim::Adam;
use super::schedule::lr_at;
use crate::error::{Result, WauError};
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tensor, Var};

/// RNG streams reserved for model init and epoch shuffling; data samples use
/// their index as stream.
const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX - 1;

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,train_dsc,val_dsc,val_hd";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 32,
            width: 32,
            noise: 0.1,
            train_count: 200,
            val_count: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Random quarter turns and flips on training batches.
    pub augment: bool,
    /// Stop (and checkpoint) once this many updates are done.
    pub stop_after_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: 1e-4,
            warmup_epochs: 2,
            augment: true,
            stop_after_steps: None,
        }
    }
}

/// Everything that determines a run besides the checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub model: ToyNetConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Setup {
    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            height: self.data.height,
            width: self.data.width,
            classes: self.model.classes as u8,
            noise: self.data.noise,
            divisor: self.model.size_divisor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate_input(self.data.height, self.data.width)?;
        let t = &self.train;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return Err(WauError::Config("train and validation sets must be non-empty".into()));
        }
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return Err(WauError::Config("noise must be finite and >= 0".into()));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(WauError::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(WauError::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if t.warmup_epochs > t.epochs {
            return Err(WauError::Config("warmup_epochs exceeds epochs".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train_count.div_ceil(self.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.train.epochs * self.batches_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.train.warmup_epochs * self.batches_per_epoch()
    }

    /// Train and validation splits on disjoint sample indices.
    pub fn datasets(&self) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
        let spec = self.data_spec();
        let train = gen_dataset_from(&spec, self.data.train_count, self.seed, 0)?;
        let val = gen_dataset_from(&spec, self.data.val_count, self.seed, self.data.train_count)?;
        Ok((train, val))
    }

    /// Freshly initialized model.
    pub fn init_model(&self) -> Result<(ToyNet, ParamStore<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let net = build_toynet(&self.model, self.data.height, self.data.width, &mut store, &mut rng)?;
        Ok((net, store))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_dsc: f64,
    pub val_dsc: f64,
    pub val_hd: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{:.6},{:.6},{:.4}",
            self.epoch, self.step, self.lr, self.loss, self.train_dsc, self.val_dsc, self.val_hd
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Complete resumable training state.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches of the current epoch.
    pub batch: usize,
    /// Sample order of the current epoch; empty between epochs.
    pub order: Vec<usize>,
    pub rng: ChaCha8Rng,
    pub loss_sum: f64,
    pub dsc_sum: f64,
    pub seen: usize,
    pub history: Vec<MetricRow>,
}

impl TrainRun {
    pub fn fresh(setup: &Setup, store: ParamStore<f32>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        rng.set_stream(SHUFFLE_STREAM);
        TrainRun {
            adam: Adam::new(store.tensors()),
            store,
            epoch: 0,
            batch: 0,
            order: Vec::new(),
            rng,
            loss_sum: 0.0,
            dsc_sum: 0.0,
            seen: 0,
            history: Vec::new(),
        }
    }

    pub fn finished(&self, setup: &Setup) -> bool {
        self.epoch >= setup.train.epochs
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.history.last()
    }
}

/// Per-pixel argmax of `N x C x H x W` logits.
pub fn argmax_labels(logits: &Tensor<f32>) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if logits.data()[(n * s.c + c) * plane + p] > logits.data()[(n * s.c + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(s.h, s.w, labels)
        })
        .collect()
}

fn batch_inputs(samples: &[&SynthSample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples.iter().flat_map(|s| s.mask.labels().iter().map(|&l| usize::from(l))).collect();
    Ok((Tensor::stack_batch(&images)?, labels))
}

/// Logits of the net for a batch of `N x 1 x H x W` images.
pub fn infer(net: &ToyNet, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new(store);
    let x = g.constant(images.clone())?;
    let out = net.forward(&mut g, x, false)?;
    Ok(g.value(out.logits).clone())
}

/// Mean DSC and mean HD over `samples`.
pub fn evaluate(net: &ToyNet, store: &ParamStore<f32>, samples: &[SynthSample], batch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(WauError::contract("evaluate", "no samples"));
    }
    let k = net.config().classes as u8;
    let (mut dsc, mut hd) = (0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (images, _) = batch_inputs(&refs)?;
        let preds = argmax_labels(&infer(net, store, &images)?)?;
        for (p, s) in preds.iter().zip(chunk) {
            dsc += mean_dsc(p, &s.mask, k);
            hd += mean_hd(p, &s.mask, k);
        }
    }
    let n = samples.len() as f64;
    Ok((dsc / n, hd / n))
}

struct StepOut {
    loss: f64,
    dsc_sum: f64,
}

fn train_step(net: &ToyNet, run: &mut TrainRun, batch: &[SynthSample], lr: f64) -> Result<StepOut> {
    let refs: Vec<_> = batch.iter().collect();
    let (images, labels) = batch_inputs(&refs)?;
    let mut g = Graph::new(&run.store);
    let x = g.constant(images)?;
    let out = net.forward(&mut g, x, false)?;
    let loss = g.seg_loss(out.logits, &labels)?;
    let loss_val = f64::from(g.value(loss).item());
    if !loss_val.is_finite() {
        return Err(WauError::NonFinite { op: "train", role: "loss" });
    }
    let k = net.config().classes as u8;
    let preds = argmax_labels(g.value(out.logits))?;
    let dsc_sum = preds.iter().zip(batch).map(|(p, s)| mean_dsc(p, &s.mask, k)).sum();
    g.backward(loss)?;
    let grads = g.param_grads();
    drop(g);
    run.adam.update(run.store.tensors_mut(), &grads, lr)?;
    Ok(StepOut { loss: loss_val, dsc_sum })
}

fn augmented(samples: &[SynthSample], idx: &[usize], run: &mut TrainRun, augment: bool) -> Vec<SynthSample> {
    idx.iter()
        .map(|&i| {
            let s = &samples[i];
            if !augment {
                return s.clone();
            }
            let t = Transform::random(&mut run.rng, s.mask.height() == s.mask.width());
            SynthSample {
                image: t.apply_image(&s.image),
                mask: t.apply_labels(&s.mask),
                seed: s.seed,
                index: s.index,
            }
        })
        .collect()
}

fn write_outputs(out: Option<&Path>, run: &TrainRun, setup: &Setup) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&run.history))?;
        checkpoint::save(&dir.join("checkpoint"), run, setup.seed)?;
    }
    Ok(())
}

/// Run from scratch. With `out`, writes `metrics.csv` and `checkpoint/` after
/// every epoch (and at `stop_after_steps`).
pub fn train(setup: &Setup, out: Option<&Path>) -> Result<TrainRun> {
    setup.validate()?;
    let (net, store) = setup.init_model()?;
    let run = TrainRun::fresh(setup, store);
    continue_run(setup, &net, run, out)
}

/// Continue from a checkpoint written by [`train`] under the same setup.
pub fn resume(setup: &Setup, checkpoint_dir: &Path, out: Option<&Path>) -> Result<TrainRun> {
    setup.validate()?;
    let (net, template) = setup.init_model()?;
    let run = checkpoint::load(checkpoint_dir, &template)?;
    continue_run(setup, &net, run, out)
}

fn continue_run(setup: &Setup, net: &ToyNet, mut run: TrainRun, out: Option<&Path>) -> Result<TrainRun> {
    let (train_set, val_set) = setup.datasets()?;
    let bs = setup.train.batch_size;
    let per_epoch = setup.batches_per_epoch();
    let (total, warmup) = (setup.total_steps(), setup.warmup_steps());
    let mut last_lr = 0.0;
    while run.epoch < setup.train.epochs {
        if run.order.is_empty() {
            run.order = (0..train_set.len()).collect();
            run.order.shuffle(&mut run.rng);
            run.loss_sum = 0.0;
            run.dsc_sum = 0.0;
            run.seen = 0;
        }
        while run.batch < per_epoch {
            if setup.train.stop_after_steps.is_some_and(|s| run.adam.step >= s) {
                write_outputs(out, &run, setup)?;
                return Ok(run);
            }
            let lo = run.batch * bs;
            let idx: Vec<usize> = run.order[lo..(lo + bs).min(train_set.len())].to_vec();
            let snapshot = out.map(|_| run.clone());
            let batch = augmented(&train_set, &idx, &mut run, setup.train.augment);
            let lr = lr_at(run.adam.step as usize, total, warmup, setup.train.lr);
            match train_step(net, &mut run, &batch, lr) {
                Ok(step) => {
                    run.loss_sum += step.loss * idx.len() as f64;
                    run.dsc_sum += step.dsc_sum;
                    run.seen += idx.len();
                    run.batch += 1;
                    last_lr = lr;
                }
                Err(e @ WauError::NonFinite { .. }) => {
                    if let (Some(dir), Some(snap)) = (out, snapshot) {
                        checkpoint::save(&dir.join("diagnostic"), &snap, setup.seed)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let (val_dsc, val_hd) = evaluate(net, &run.store, &val_set, bs)?;
        let seen = run.seen.max(1) as f64;
        run.history.push(MetricRow {
            epoch: run.epoch + 1,
            step: run.adam.step,
            lr: last_lr,
            loss: run.loss_sum / seen,
            train_dsc: run.dsc_sum / seen,
            val_dsc,
            val_hd,
        });
        run.epoch += 1;
        run.batch = 0;
        run.order.clear();
        write_outputs(out, &run, setup)?;
    }
    Ok(run)
}

/// Forward a single sample with attention recording; used for visualization.
pub fn forward_sample(
    net: &ToyNet,
    store: &ParamStore<f32>,
    sample: &SynthSample,
) -> Result<(Vec<crate::attention::AttentionRecord<f32>>, Vec<Tensor<f32>>)> {
    let mut g = Graph::new(store);
    let x: Var = g.constant(sample.image.clone())?;
    let out = net.forward(&mut g, x, true)?;
    let feats = out.stage_outputs.iter().map(|&v| g.value(v).clone()).collect();
    Ok((out.attention, feats))
}

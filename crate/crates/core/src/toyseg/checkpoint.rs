//! Checkpoint directory: `params.bin` and `adam.bin` hold concatenated tensor
//! dumps, `state.txt` holds the scalars as `key = value` lines. Floats are
//! stored as IEEE bit patterns so a reload is exact.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Adam;
use super::train::{MetricRow, TrainRun};
use crate::error::{Result, WauError};
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor, Tensor};

const FORMAT: &str = "wau-checkpoint 1";

fn write_all<'a>(path: &Path, tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_n(path: &Path, n: usize) -> Result<Vec<Tensor<f32>>> {
    let mut r = BufReader::new(File::open(path)?);
    (0..n).map(|_| read_tensor(&mut r)).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || WauError::Format(format!("bad rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| WauError::Format(format!("bad float bits `{s}`")))
}

/// Write `run` to `dir`, replacing any previous checkpoint there.
pub fn save(dir: &Path, run: &TrainRun, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_all(&dir.join("params.bin"), run.store.tensors())?;
    write_all(&dir.join("adam.bin"), run.adam.m.iter().chain(&run.adam.v))?;
    let mut s = String::new();
    let _ = writeln!(s, "format = {FORMAT}");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "params = {}", run.store.len());
    for id in run.store.ids() {
        let _ = writeln!(s, "param = {} {}", run.store.name(id), run.store.get(id).shape());
    }
    let _ = writeln!(s, "epoch = {}", run.epoch);
    let _ = writeln!(s, "batch = {}", run.batch);
    let _ = writeln!(s, "adam_step = {}", run.adam.step);
    let _ = writeln!(s, "rng_seed = {}", hex(&run.rng.get_seed()));
    let _ = writeln!(s, "rng_stream = {}", run.rng.get_stream());
    let _ = writeln!(s, "rng_word_pos = {}", run.rng.get_word_pos());
    let _ = writeln!(s, "loss_sum = {}", bits(run.loss_sum));
    let _ = writeln!(s, "dsc_sum = {}", bits(run.dsc_sum));
    let _ = writeln!(s, "seen = {}", run.seen);
    let order: Vec<String> = run.order.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "order = {}", order.join(" "));
    for r in &run.history {
        let _ = writeln!(
            s,
            "row = {} {} {} {} {} {} {}",
            r.epoch,
            r.step,
            bits(r.lr),
            bits(r.loss),
            bits(r.train_dsc),
            bits(r.val_dsc),
            bits(r.val_hd)
        );
    }
    fs::write(dir.join("state.txt"), s)?;
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| WauError::Format(format!("checkpoint `{key}`: cannot parse `{v}`")))
}

/// Seed recorded in a checkpoint, without loading tensors.
#[allow(dead_code)]
fn saved_seed(dir: &Path) -> Result<u64> {
    let text = fs::read_to_string(dir.join("state.txt"))?;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("seed = ") {
            return parse("seed", v);
        }
    }
    Err(WauError::Format("checkpoint has no seed".into()))
}

/// Load a checkpoint whose parameter layout must match `template`.
pub fn load(dir: &Path, template: &ParamStore<f32>) -> Result<TrainRun> {
    let text = fs::read_to_string(dir.join("state.txt"))?;
    let mut params = Vec::new();
    let mut kv = std::collections::HashMap::new();
    let mut history = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
            .ok_or_else(|| WauError::Format(format!("checkpoint line `{line}`")))?;
        match k {
            "param" => params.push(v.to_string()),
            "row" => {
                let f: Vec<&str> = v.split(' ').collect();
                if f.len() != 7 {
                    return Err(WauError::Format(format!("checkpoint row `{v}`")));
                }
                history.push(MetricRow {
                    epoch: parse("row", f[0])?,
                    step: parse("row", f[1])?,
                    lr: unbits(f[2])?,
                    loss: unbits(f[3])?,
                    train_dsc: unbits(f[4])?,
                    val_dsc: unbits(f[5])?,
                    val_hd: unbits(f[6])?,
                });
            }
            _ => {
                kv.insert(k.to_string(), v.to_string());
            }
        }
    }
    let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| WauError::Format(format!("checkpoint missing `{k}`")));
    if get("format")? != FORMAT {
        return Err(WauError::Format(format!("unsupported checkpoint format `{}`", get("format")?)));
    }
    let expected: Vec<String> = template
        .ids()
        .map(|id| format!("{} {}", template.name(id), template.get(id).shape()))
        .collect();
    if params != expected {
        return Err(WauError::Format(
            "checkpoint parameters do not match the configured model".into(),
        ));
    }
    let n = template.len();
    let values = read_n(&dir.join("params.bin"), n)?;
    let mut moments = read_n(&dir.join("adam.bin"), 2 * n)?;
    let v = moments.split_off(n);
    let mut store = template.clone();
    for (slot, val) in store.tensors_mut().iter_mut().zip(values) {
        if slot.shape() != val.shape() {
            return Err(WauError::Format("checkpoint tensor shape mismatch".into()));
        }
        *slot = val;
    }
    let mut adam = Adam::new(store.tensors());
    adam.step = parse("adam_step", get("adam_step")?)?;
    adam.m = moments;
    adam.v = v;
    let mut rng = ChaCha8Rng::from_seed(unhex(get("rng_seed")?)?);
    rng.set_stream(parse("rng_stream", get("rng_stream")?)?);
    rng.set_word_pos(parse("rng_word_pos", get("rng_word_pos")?)?);
    let order = get("order")?
        .split_whitespace()
        .map(|t| parse("order", t))
        .collect::<Result<Vec<usize>>>()?;
    Ok(TrainRun {
        store,
        adam,
        epoch: parse("epoch", get("epoch")?)?,
        batch: parse("batch", get("batch")?)?,
        order,
        rng,
        loss_sum: unbits(get("loss_sum")?)?,
        dsc_sum: unbits(get("dsc_sum")?)?,
        seen: parse("seen", get("seen")?)?,
        history,
    })
}

//! Synthetic segmentation samples: noisy images of filled ellipses and
//! rectangles, one intensity level per class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, WauError};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Integer class per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(WauError::dim("label map", format!("{} labels for {h}x{w}", labels.len())));
        }
        Ok(LabelMap { h, w, labels })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `1 x 1 x H x W` intensities.
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub seed: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub height: usize,
    pub width: usize,
    /// Foreground classes `K`.
    pub classes: u8,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// `H` and `W` must be multiples of this (encoder depth and windows).
    pub divisor: usize,
}

fn paint(labels: &mut [u8], h: usize, w: usize, class: u8, rng: &mut ChaCha8Rng) {
    let (hf, wf) = (h as f64, w as f64);
    let cy = rng.random_range(0.15..0.85) * hf;
    let cx = rng.random_range(0.15..0.85) * wf;
    let ry = rng.random_range(0.06..0.18) * hf;
    let rx = rng.random_range(0.06..0.18) * wf;
    let ellipse = rng.random_bool(0.5);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let inside = if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                labels[y * w + x] = class;
            }
        }
    }
}

/// Sample `index` of the dataset seeded by `seed`; a pure function of both.
pub fn gen_sample(spec: &DataSpec, seed: u64, index: usize) -> Result<SynthSample> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut labels = vec![0u8; h * w];
    for class in 1..=spec.classes {
        for _ in 0..rng.random_range(1..=3) {
            paint(&mut labels, h, w, class, &mut rng);
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0))
        .map_err(|e| WauError::Config(format!("noise level: {e}")))?;
    let k = f64::from(spec.classes);
    let data = labels
        .iter()
        .map(|&l| {
            let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (f64::from(l) / k + n) as f32
        })
        .collect();
    Ok(SynthSample {
        image: Tensor::from_vec(Shape::new(1, 1, h, w), data)?,
        mask: LabelMap::new(h, w, labels)?,
        seed,
        index,
    })
}

/// `count` samples starting at `first_index`.
pub fn gen_dataset_from(spec: &DataSpec, count: usize, seed: u64, first_index: usize) -> Result<Vec<SynthSample>> {
    if spec.classes == 0 {
        return Err(WauError::Config("need at least one foreground class".into()));
    }
    if spec.height == 0 || spec.width == 0 || !spec.height.is_multiple_of(spec.divisor) || !spec.width.is_multiple_of(spec.divisor) {
        return Err(WauError::Config(format!(
            "image {}x{} must be a positive multiple of {}",
            spec.height, spec.width, spec.divisor
        )));
    }
    par::map_range(count, |i| gen_sample(spec, seed, first_index + i))
        .into_iter()
        .collect()
}

pub fn gen_dataset(spec: &DataSpec, count: usize, seed: u64) -> Result<Vec<SynthSample>> {
    gen_dataset_from(spec, count, seed, 0)
}

/// Dihedral transform: `rot` quarter turns, then optional flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub rot: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Transform {
    /// Quarter turns are only drawn for square images.
    pub fn random(rng: &mut impl Rng, square: bool) -> Self {
        let rot = if square { rng.random_range(0..4) } else { 2 * rng.random_range(0..2) };
        Transform {
            rot,
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
        }
    }

    /// Source pixel read by destination `(y, x)` of an `h x w` image.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        if self.flip_v {
            y = h - 1 - y;
        }
        if self.flip_h {
            x = w - 1 - x;
        }
        match self.rot % 4 {
            0 => (y, x),
            1 => (w - 1 - x, y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (x, h - 1 - y),
        }
    }

    fn check(&self, h: usize, w: usize) {
        assert!(self.rot.is_multiple_of(2) || h == w, "quarter turns need square images");
    }

    pub fn apply_labels(&self, m: &LabelMap) -> LabelMap {
        self.check(m.h, m.w);
        let labels = (0..m.h * m.w)
            .map(|i| {
                let (sy, sx) = self.source(i / m.w, i % m.w, m.h, m.w);
                m.labels[sy * m.w + sx]
            })
            .collect();
        LabelMap { h: m.h, w: m.w, labels }
    }

    pub fn apply_image(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let s = t.shape();
        self.check(s.h, s.w);
        Tensor::from_fn(s, |n, c, y, x| {
            let (sy, sx) = self.source(y, x, s.h, s.w);
            t.at(n, c, sy, sx)
        })
    }
}

//! Naive-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wau::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Same-padded grouped convolution, one output scalar at a time.
pub fn conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, groups: usize) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let pad = (ws.h / 2) as isize;
    let out_per_group = ws.n / groups;
    Tensor::from_fn(Shape::new(xs.n, ws.n, xs.h, xs.w), |n, co, y, xo| {
        let g = co / out_per_group;
        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
        for ci in 0..ws.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = y as isize + ky as isize - pad;
                    let ix = xo as isize + kx as isize - pad;
                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        continue;
                    }
                    acc += x.at(n, g * ws.c + ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                }
            }
        }
        acc
    })
}

/// Half-pixel bilinear interpolation with edge clamping.
pub fn bilinear(x: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let s = x.shape();
    let src = |d: usize, len: usize| ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0).min((len - 1) as f64);
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * factor, s.w * factor), |n, c, y, xo| {
        let (sy, sx) = (src(y, s.h), src(xo, s.w));
        let mut acc = 0.0;
        for iy in 0..s.h {
            for ix in 0..s.w {
                let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                acc += wy * wx * x.at(n, c, iy, ix);
            }
        }
        acc
    })
}

/// Scatter form of the kernel-2n, stride-n transposed convolution with low
/// padding `n / 2`, cropped to `n` times the input.
pub fn transposed(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let s = x.shape();
    let ws = w.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let pad = (factor / 2) as isize;
    let mut out = Tensor::from_fn(Shape::new(s.n, ws.c, oh, ow), |_, co, _, _| bias.data()[co]);
    let os = out.shape();
    for n in 0..s.n {
        for ci in 0..s.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    for co in 0..ws.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let oy = (iy * factor + ky) as isize - pad;
                                let ox = (ix * factor + kx) as isize - pad;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let i = os.index(n, co, oy as usize, ox as usize);
                                out.data_mut()[i] += x.at(n, ci, iy, ix) * w.at(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

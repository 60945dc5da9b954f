//! Non-overlapping square window partitioning.
//!
//! Windows are ordered batch-major, then raster (top-left to bottom-right).
//! Inside a window, tokens are row-major pixels; each token carries the
//! feature map's channels.

use crate::error::{Result, WauError};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Top-left corner and batch item of one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowCoord {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
}

fn check_divisible(op: &'static str, s: Shape, mh: usize, mw: usize) -> Result<()> {
    if mh == 0 || mw == 0 || !s.h.is_multiple_of(mh) || !s.w.is_multiple_of(mw) {
        return Err(WauError::dim(
            op,
            format!("H={} W={} not divisible by window {mh}x{mw}", s.h, s.w),
        ));
    }
    Ok(())
}

/// Gather index that lays `s` out as `(N * windows, heads, mh*mw, C/heads)`.
pub(crate) fn window_gather_index(s: Shape, mh: usize, mw: usize, heads: usize) -> Result<(Vec<usize>, Shape)> {
    check_divisible("window partition", s, mh, mw)?;
    if heads == 0 || !s.c.is_multiple_of(heads) {
        return Err(WauError::dim(
            "window partition",
            format!("{} channels not divisible by {heads} heads", s.c),
        ));
    }
    let (wy, wx) = (s.h / mh, s.w / mw);
    let d = s.c / heads;
    let out = Shape::new(s.n * wy * wx, heads, mh * mw, d);
    let mut index = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for by in 0..wy {
            for bx in 0..wx {
                for h in 0..heads {
                    for ty in 0..mh {
                        for tx in 0..mw {
                            for j in 0..d {
                                index.push(s.index(n, h * d + j, by * mh + ty, bx * mw + tx));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((index, out))
}

/// Inverse of [`window_gather_index`]: for each element of `s`, its position
/// in the windowed layout.
pub(crate) fn window_scatter_index(s: Shape, mh: usize, mw: usize, heads: usize) -> Result<Vec<usize>> {
    let (gather, _) = window_gather_index(s, mh, mw, heads)?;
    let mut inv = vec![0; gather.len()];
    for (pos, &src) in gather.iter().enumerate() {
        inv[src] = pos;
    }
    Ok(inv)
}

/// Coordinates of every window of an `s`-shaped map, in window order.
pub fn window_coords(s: Shape, m: usize) -> Vec<WindowCoord> {
    let (wy, wx) = (s.h / m, s.w / m);
    (0..s.n)
        .flat_map(|batch| {
            (0..wy).flat_map(move |by| {
                (0..wx).map(move |bx| WindowCoord {
                    batch,
                    row: by * m,
                    col: bx * m,
                })
            })
        })
        .collect()
}

/// Record a window partition on the tape (see [`window_gather_index`]).
pub fn to_windows<T: Scalar>(tape: &mut Tape<T>, x: Var, m: usize, heads: usize) -> Result<Var> {
    let (index, shape) = window_gather_index(tape.shape(x), m, m, heads)?;
    tape.gather(x, index, shape)
}

/// Record the merge of windowed tokens back into a `target`-shaped map.
pub fn from_windows<T: Scalar>(tape: &mut Tape<T>, t: Var, target: Shape, m: usize, heads: usize) -> Result<Var> {
    let index = window_scatter_index(target, m, m, heads)?;
    let ts = tape.shape(t);
    if ts.numel() != target.numel() {
        return Err(WauError::dim("window merge", format!("{ts} cannot merge into {target}")));
    }
    tape.gather(t, index, target)
}

/// A feature map split into `M x M` windows of `M^2` tokens by `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<T> {
    source_shape: Shape,
    window: usize,
    /// `(windows, 1, M^2, C)`.
    tokens: Tensor<T>,
}

impl<T: Scalar> WindowGrid<T> {
    pub fn partition(x: &Tensor<T>, m: usize) -> Result<Self> {
        let (index, shape) = window_gather_index(x.shape(), m, m, 1)?;
        let src = x.data();
        let tokens = Tensor::from_vec(shape, index.iter().map(|&i| src[i]).collect())?;
        Ok(WindowGrid {
            source_shape: x.shape(),
            window: m,
            tokens,
        })
    }

    pub fn merge(&self) -> Tensor<T> {
        let index = window_scatter_index(self.source_shape, self.window, self.window, 1)
            .expect("grid was validated at partition");
        let src = self.tokens.data();
        Tensor::from_vec(self.source_shape, index.iter().map(|&i| src[i]).collect())
            .expect("permutation preserves length")
    }

    pub fn source_shape(&self) -> Shape {
        self.source_shape
    }

    pub fn window_size(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.tokens.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Token block of window `i`, row-major `M^2 x C`.
    pub fn window(&self, i: usize) -> &[T] {
        let len = self.tokens_per_window() * self.source_shape.c;
        &self.tokens.data()[i * len..(i + 1) * len]
    }

    pub fn coords(&self) -> Vec<WindowCoord> {
        window_coords(self.source_shape, self.window)
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }
}

/// Partition a query map with window `n * m2` and a key/value map with
/// window `m2` so that window `i` of each covers the same region.
pub fn paired_partition<T: Scalar>(
    query_map: &Tensor<T>,
    kv_map: &Tensor<T>,
    m2: usize,
    n: usize,
) -> Result<(WindowGrid<T>, WindowGrid<T>)> {
    check_ratio(query_map.shape(), kv_map.shape(), n)?;
    let q = WindowGrid::partition(query_map, n * m2)?;
    let kv = WindowGrid::partition(kv_map, m2)?;
    Ok((q, kv))
}

pub(crate) fn check_ratio(query: Shape, kv: Shape, n: usize) -> Result<()> {
    if n == 0 || query.n != kv.n || query.h != n * kv.h || query.w != n * kv.w {
        return Err(WauError::dim(
            "paired windows",
            format!("query map {query} must be exactly {n}x the key/value map {kv}"),
        ));
    }
    Ok(())
}

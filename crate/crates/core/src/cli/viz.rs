//! Images derived from recorded attention weights and decoder features.

use crate::attention::AttentionRecord;
use crate::error::{Result, WauError};
use crate::tensor::Tensor;
use crate::toyseg::LabelMap;

/// Row-major greyscale map before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Channel mean of a `1 x C x H x W` feature tensor.
pub fn feature_map(t: &Tensor<f32>) -> Map {
    let s = t.shape();
    let values = (0..s.plane())
        .map(|p| (0..s.c).map(|c| f64::from(t.data()[c * s.plane() + p])).sum::<f64>() / s.c as f64)
        .collect();
    Map {
        width: s.w,
        height: s.h,
        values,
    }
}

/// Indices of the windows whose query footprint covers a positive pixel of
/// `mask` (any foreground class). `stage_h x stage_w` is the query map size;
/// the mask is mapped onto it by integer scaling.
pub fn positive_windows(rec: &AttentionRecord<f32>, mask: &LabelMap, stage_h: usize, stage_w: usize) -> Vec<usize> {
    let (sy, sx) = (mask.height() / stage_h, mask.width() / stage_w);
    let m1 = rec.query_window;
    rec.coords
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let (y0, x0) = (c.row * sy, c.col * sx);
            (y0..y0 + m1 * sy).any(|y| (x0..x0 + m1 * sx).any(|x| mask.labels()[y * mask.width() + x] != 0))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Attention weights averaged over `windows` and heads, tiled so the
/// `M2 x M2` key map of query position `(qy, qx)` sits at tile `(qy, qx)` of
/// an `(M1*M2) x (M1*M2)` image. Every value is a convex combination of
/// softmax weights and so lies in `[0, 1]`.
pub fn attention_map(rec: &AttentionRecord<f32>, windows: &[usize]) -> Result<Map> {
    if windows.is_empty() {
        return Err(WauError::contract("attention map", "no windows selected"));
    }
    let (m1, m2) = (rec.query_window, rec.kv_window);
    let side = m1 * m2;
    let mut values = vec![0.0f64; side * side];
    let scale = 1.0 / (windows.len() * rec.heads) as f64;
    for &w in windows {
        for h in 0..rec.heads {
            let wh = rec.window_head(w, h);
            for q in 0..m1 * m1 {
                let (qy, qx) = (q / m1, q % m1);
                for k in 0..m2 * m2 {
                    let (ky, kx) = (k / m2, k % m2);
                    values[(qy * m2 + ky) * side + qx * m2 + kx] += scale * f64::from(wh[q * m2 * m2 + k]);
                }
            }
        }
    }
    Ok(Map {
        width: side,
        height: side,
        values,
    })
}

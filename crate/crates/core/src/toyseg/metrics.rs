//! Dice similarity and Hausdorff distance on label maps.

use super::data::LabelMap;

/// `2|A and B| / (|A| + |B|)` for class `class`; 1 when both are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class: u8) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (pa, gb) = (p == class, g == class);
        a += usize::from(pa);
        b += usize::from(gb);
        inter += usize::from(pa && gb);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Dice averaged over foreground classes `1..=classes`.
pub fn mean_dsc(pred: &LabelMap, gt: &LabelMap, classes: u8) -> f64 {
    (1..=classes).map(|c| dice_score(pred, gt, c)).sum::<f64>() / f64::from(classes)
}

fn points(mask: &[bool], w: usize) -> Vec<(f64, f64)> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| ((i / w) as f64, (i % w) as f64))
        .collect()
}

fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|&(ay, ax)| {
            b.iter()
                .map(|&(by, bx)| (ay - by).powi(2) + (ax - bx).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance in pixels between two `h x w` foreground
/// masks, by exhaustive pairwise scan. Both empty gives 0; exactly one empty
/// gives the image diagonal `sqrt((h-1)^2 + (w-1)^2)`.
pub fn hausdorff(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
    debug_assert_eq!(pred.len(), h * w);
    let (a, b) = (points(pred, w), points(gt, w));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt(),
        (false, false) => directed(&a, &b).max(directed(&b, &a)),
    }
}

/// Hausdorff distance averaged over foreground classes `1..=classes`.
pub fn mean_hd(pred: &LabelMap, gt: &LabelMap, classes: u8) -> f64 {
    (1..=classes)
        .map(|c| hausdorff(&pred.mask(c), &gt.mask(c), gt.height(), gt.width()))
        .sum::<f64>()
        / f64::from(classes)
}

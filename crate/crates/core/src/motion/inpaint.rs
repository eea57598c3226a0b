use ndarray::Array3;

use crate::error::{Result, TtmError};
use crate::tensor::Mask;

/// Fills every hole pixel with the color of its nearest non-hole pixel
/// (Euclidean distance; ties go to the first candidate in row-major order).
pub fn nn_inpaint(frame: &Array3<f32>, hole: &Mask) -> Result<Array3<f32>> {
    nn_inpaint_excluding(frame, hole, None)
}

/// Like [`nn_inpaint`], but pixels set in `exclude` are never used as a
/// color source either.
pub fn nn_inpaint_excluding(
    frame: &Array3<f32>,
    hole: &Mask,
    exclude: Option<&Mask>,
) -> Result<Array3<f32>> {
    let (c, h, w) = frame.dim();
    if hole.dim() != (h, w) || exclude.is_some_and(|e| e.dim() != (h, w)) {
        return Err(TtmError::Shape(format!("masks must be {h}x{w}")));
    }
    let is_source = |y: usize, x: usize| !hole[[y, x]] && !exclude.is_some_and(|e| e[[y, x]]);
    if !hole.iter().any(|&v| v) {
        return Ok(frame.clone());
    }
    if !(0..h).any(|y| (0..w).any(|x| is_source(y, x))) {
        return Err(TtmError::Degenerate("no pixel is available as an inpainting source".into()));
    }

    let mut out = frame.clone();
    let max_r = h.max(w) as i64;
    for ((y0, x0), &is_hole) in hole.indexed_iter() {
        if !is_hole {
            continue;
        }
        let (y0, x0) = (y0 as i64, x0 as i64);
        // (squared distance, y, x); lexicographic order gives the tie-break.
        let mut best: Option<(i64, i64, i64)> = None;
        for r in 1..=max_r {
            if best.is_some_and(|(d2, _, _)| r * r > d2) {
                break;
            }
            let mut consider = |y: i64, x: i64| {
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    return;
                }
                if !is_source(y as usize, x as usize) {
                    return;
                }
                let cand = ((y - y0).pow(2) + (x - x0).pow(2), y, x);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            };
            for x in (x0 - r)..=(x0 + r) {
                consider(y0 - r, x);
                consider(y0 + r, x);
            }
            for y in (y0 - r + 1)..=(y0 + r - 1) {
                consider(y, x0 - r);
                consider(y, x0 + r);
            }
        }
        let (_, sy, sx) = best.expect("a source pixel exists");
        for ch in 0..c {
            out[[ch, y0 as usize, x0 as usize]] = frame[[ch, sy as usize, sx as usize]];
        }
    }
    Ok(out)
}

use ndarray::{Array3, ArrayView3, Axis};
use rayon::prelude::*;

use super::{nn_inpaint_excluding, rasterize_trajectory, FrameTransform, MotionSpec};
use crate::error::{Result, TtmError};
use crate::tensor::{mask_count, Mask, MaskVideo, SourceImage, Video};

/// A crude reference video and its per-frame guidance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedReference {
    pub frames: Video,
    pub mask: MaskVideo,
    /// Non-fatal conditions, e.g. a region leaving the frame.
    pub warnings: Vec<String>,
}

impl WarpedReference {
    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = sha2::Sha256::default();
        use sha2::Digest;
        hasher.update(crate::tensor::video_hash(&self.frames));
        hasher.update(crate::tensor::mask_video_hash(&self.mask));
        hex::encode(hasher.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub frame: Array3<f32>,
    pub moved: Mask,
    pub hole: Mask,
    /// Set when no part of the region lands inside the frame.
    pub out_of_frame: bool,
}

/// Splats the region's pixels from `src` into `dst` at their rounded
/// destinations, marking `moved`. Source pixels are visited in row-major
/// order, so on collisions the later source pixel wins. Returns the number
/// of in-bounds splats.
fn splat_region(
    src: ArrayView3<'_, f32>,
    dst: &mut Array3<f32>,
    moved: &mut Mask,
    mask0: &Mask,
    transform: &FrameTransform,
) -> usize {
    let (_, h, w) = src.dim();
    let mut landed = 0;
    for ((y, x), &m) in mask0.indexed_iter() {
        if !m {
            continue;
        }
        let (tx, ty) = transform.apply(x as f64, y as f64);
        let (qx, qy) = (tx.round(), ty.round());
        if qx < 0.0 || qy < 0.0 || qx >= w as f64 || qy >= h as f64 {
            continue;
        }
        let (qx, qy) = (qx as usize, qy as usize);
        let mut rgb = [src[[0, y, x]], src[[1, y, x]], src[[2, y, x]]];
        if let Some(color) = &transform.color {
            rgb = color.apply(rgb);
        }
        for c in 0..3 {
            dst[[c, qy, qx]] = rgb[c];
        }
        moved[[qy, qx]] = true;
        landed += 1;
    }
    landed
}

/// Forward-warps the masked region of `image` by `transform`, leaving every
/// other pixel untouched. The hole mask holds vacated source pixels that the
/// moved region does not cover again; they are not filled here.
pub fn forward_warp(
    image: &SourceImage,
    mask0: &Mask,
    transform: &FrameTransform,
) -> Result<WarpResult> {
    let (h, w) = (image.height(), image.width());
    if mask0.dim() != (h, w) {
        return Err(TtmError::Shape(format!("mask {:?} vs image {h}x{w}", mask0.dim())));
    }
    if mask_count(mask0) == 0 {
        return Err(TtmError::invalid("region mask is empty"));
    }
    if !transform.is_finite() {
        return Err(TtmError::invalid("transform has non-finite values"));
    }
    let mut frame = image.pixels().clone();
    let mut moved = Mask::from_elem((h, w), false);
    let landed = splat_region(image.view(), &mut frame, &mut moved, mask0, transform);
    let hole = Mask::from_shape_fn((h, w), |(y, x)| mask0[[y, x]] && !moved[[y, x]]);
    Ok(WarpResult { frame, moved, hole, out_of_frame: landed == 0 })
}

fn render_frame(
    image: &SourceImage,
    spec: &MotionSpec,
    transforms: &[Vec<FrameTransform>],
    f: usize,
) -> Result<(Array3<f32>, Mask, bool)> {
    let (h, w) = (image.height(), image.width());
    let mut frame = image.pixels().clone();
    let mut moved = Mask::from_elem((h, w), false);
    let mut vacated = Mask::from_elem((h, w), false);
    let mut lost = false;
    for (region, per_frame) in spec.regions.iter().zip(transforms) {
        let tr = &per_frame[f];
        if tr.is_identity() {
            // Fast path keeps identity frames bit-exact without rounding.
            for ((y, x), &m) in region.mask.indexed_iter() {
                if m {
                    for c in 0..3 {
                        frame[[c, y, x]] = image.pixels()[[c, y, x]];
                    }
                    moved[[y, x]] = true;
                }
            }
            continue;
        }
        if splat_region(image.view(), &mut frame, &mut moved, &region.mask, tr) == 0 {
            lost = true;
        }
        vacated.zip_mut_with(&region.mask, |v, &m| *v |= m);
    }
    let hole = Mask::from_shape_fn((h, w), |(y, x)| vacated[[y, x]] && !moved[[y, x]]);
    let filled = if hole.iter().any(|&v| v) {
        nn_inpaint_excluding(&frame, &hole, Some(&moved))?
    } else {
        frame
    };
    Ok((filled, moved, lost))
}

/// Builds the warped reference for `spec`: per frame, every region is
/// splatted (with its color override), then disocclusions are filled by
/// nearest-neighbor inpainting from pixels that are neither holes nor moved.
pub fn build_warped_reference(image: &SourceImage, spec: &MotionSpec) -> Result<WarpedReference> {
    let (h, w) = (image.height(), image.width());
    spec.validate(h, w)?;
    let transforms = spec
        .regions
        .iter()
        .map(|r| rasterize_trajectory(r, spec.frame_count))
        .collect::<Result<Vec<_>>>()?;

    let rendered: Vec<_> = (0..spec.frame_count)
        .into_par_iter()
        .map(|f| render_frame(image, spec, &transforms, f))
        .collect::<Result<_>>()?;

    let mut frames = Video::zeros((spec.frame_count, 3, h, w));
    let mut mask = MaskVideo::from_elem((spec.frame_count, h, w), false);
    let mut warnings = Vec::new();
    for (f, (frame, moved, lost)) in rendered.into_iter().enumerate() {
        frames.index_axis_mut(Axis(0), f).assign(&frame);
        mask.index_axis_mut(Axis(0), f).assign(&moved);
        if lost {
            warnings.push(format!("frame {f}: a region left the frame entirely"));
        }
    }
    Ok(WarpedReference { frames, mask, warnings })
}

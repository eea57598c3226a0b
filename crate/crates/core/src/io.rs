//! Artifact files: PNG frame sequences and a lossless raw tensor container.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;

use crate::error::{Result, TtmError};
use crate::tensor::{mask_from_luma8, mask_to_luma8, to_rgb8, MaskVideo, SourceImage, Video};

const VIDEO_MAGIC: &[u8; 8] = b"TTMVID1\0";

/// `frame_0000.png`, `frame_0001.png`, ...
pub fn frame_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:04}.png")
}

fn png<P, C>(img: &image::ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("in-memory PNG encoding does not fail");
    out
}

/// PNG bytes of every frame, 8-bit quantized.
pub fn frame_pngs(video: &Video) -> Vec<Vec<u8>> {
    video.outer_iter().map(|f| png(&to_rgb8(f))).collect()
}

pub fn mask_pngs(mask: &MaskVideo) -> Vec<Vec<u8>> {
    mask.outer_iter().map(|m| png(&mask_to_luma8(&m.to_owned()))).collect()
}

fn write_all(dir: &Path, prefix: &str, pngs: Vec<Vec<u8>>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    pngs.into_iter()
        .enumerate()
        .map(|(i, bytes)| {
            let p = dir.join(frame_name(prefix, i));
            fs::write(&p, bytes)?;
            Ok(p)
        })
        .collect()
}

pub fn write_frames(dir: &Path, prefix: &str, video: &Video) -> Result<Vec<PathBuf>> {
    write_all(dir, prefix, frame_pngs(video))
}

pub fn write_mask_frames(dir: &Path, prefix: &str, mask: &MaskVideo) -> Result<Vec<PathBuf>> {
    write_all(dir, prefix, mask_pngs(mask))
}

fn numbered(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for i in 0.. {
        let p = dir.join(frame_name(prefix, i));
        if !p.exists() {
            break;
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(TtmError::invalid(format!("no {prefix}_NNNN.png frames in {}", dir.display())));
    }
    Ok(out)
}

pub fn read_frames(dir: &Path, prefix: &str) -> Result<Video> {
    let frames = numbered(dir, prefix)?.iter().map(SourceImage::load).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| TtmError::Shape(e.to_string()))
}

pub fn read_mask_frames(dir: &Path, prefix: &str) -> Result<MaskVideo> {
    let masks = numbered(dir, prefix)?
        .iter()
        .map(|p| Ok(mask_from_luma8(&image::load_from_memory(&fs::read(p)?)?.to_luma8())))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| TtmError::Shape(e.to_string()))
}

/// Raw little-endian container: magic, four u64 dims, then f32 values.
pub fn encode_video(video: &Video) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 32 + video.len() * 4);
    out.extend_from_slice(VIDEO_MAGIC);
    let (f, c, h, w) = video.dim();
    for d in [f, c, h, w] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in video.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_video(bytes: &[u8]) -> Result<Video> {
    if bytes.len() < 40 || &bytes[..8] != VIDEO_MAGIC {
        return Err(TtmError::invalid("not a raw video container"));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let shape = (dim(0), dim(1), dim(2), dim(3));
    let n = shape.0.checked_mul(shape.1).and_then(|v| v.checked_mul(shape.2)).and_then(|v| v.checked_mul(shape.3));
    if n.is_none_or(|n| bytes.len() != 40 + 4 * n) {
        return Err(TtmError::invalid("raw video length does not match its header"));
    }
    let values = bytes[40..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Video::from_shape_vec(shape, values).map_err(|e| TtmError::Shape(e.to_string()))
}

pub fn save_video(path: &Path, video: &Video) -> Result<()> {
    fs::write(path, encode_video(video))?;
    Ok(())
}

pub fn load_video(path: &Path) -> Result<Video> {
    decode_video(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_exact() {
        let v = Video::from_shape_fn((2, 3, 4, 5), |(a, b, c, d)| (a * 7 + b * 3 + c) as f32 / 9.0 - d as f32 * 1e-7);
        assert_eq!(decode_video(&encode_video(&v)).unwrap(), v);
        let mut bad = encode_video(&v);
        bad.pop();
        assert!(decode_video(&bad).is_err());
    }

    #[test]
    fn frames_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let v = Video::from_shape_fn((3, 3, 8, 8), |(f, c, y, x)| (((f + c + y + x) % 5) * 60) as f32 / 255.0);
        write_frames(dir.path(), "frame", &v).unwrap();
        assert_eq!(read_frames(dir.path(), "frame").unwrap(), v);
        let m = MaskVideo::from_shape_fn((3, 8, 8), |(f, y, x)| (f + y * x) % 3 == 0);
        write_mask_frames(dir.path(), "mask", &m).unwrap();
        assert_eq!(read_mask_frames(dir.path(), "mask").unwrap(), m);
    }
}

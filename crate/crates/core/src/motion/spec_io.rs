//! JSON document form of [`MotionSpec`]. Masks travel as row-major run
//! lengths that alternate unset/set, starting with an unset run (which may
//! be zero-length).

use serde::{Deserialize, Serialize};

use super::{ColorTransform, Keyframe, MotionSpec, Region};
use crate::error::{Result, TtmError};
use crate::tensor::Mask;

pub const SPEC_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

impl MaskRle {
    pub fn encode(mask: &Mask) -> Self {
        let (height, width) = mask.dim();
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &v in mask.iter() {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        Self { height, width, runs }
    }

    pub fn decode(&self) -> Result<Mask> {
        let total: usize = self.runs.iter().sum();
        if total != self.height * self.width {
            return Err(TtmError::invalid(format!(
                "mask runs cover {total} pixels, expected {}",
                self.height * self.width
            )));
        }
        let mut flat = Vec::with_capacity(total);
        for (i, &len) in self.runs.iter().enumerate() {
            flat.extend(std::iter::repeat_n(i % 2 == 1, len));
        }
        Mask::from_shape_vec((self.height, self.width), flat)
            .map_err(|e| TtmError::Shape(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDocument {
    pub mask: MaskRle,
    pub keyframes: Vec<Keyframe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance_override: Option<Vec<ColorTransform>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpecDocument {
    pub version: u32,
    /// Path or content hash of the source image this spec was authored on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub frame_count: usize,
    pub regions: Vec<RegionDocument>,
}

impl MotionSpecDocument {
    pub fn from_spec(spec: &MotionSpec, image: Option<String>) -> Self {
        Self {
            version: SPEC_FORMAT_VERSION,
            image,
            frame_count: spec.frame_count,
            regions: spec
                .regions
                .iter()
                .map(|r| RegionDocument {
                    mask: MaskRle::encode(&r.mask),
                    keyframes: r.keyframes.clone(),
                    appearance_override: r.appearance_override.clone(),
                })
                .collect(),
        }
    }

    pub fn to_spec(&self) -> Result<MotionSpec> {
        if self.version != SPEC_FORMAT_VERSION {
            return Err(TtmError::invalid(format!(
                "unsupported spec version {} (expected {SPEC_FORMAT_VERSION})",
                self.version
            )));
        }
        let regions = self
            .regions
            .iter()
            .map(|r| {
                Ok(Region {
                    mask: r.mask.decode()?,
                    keyframes: r.keyframes.clone(),
                    appearance_override: r.appearance_override.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MotionSpec { frame_count: self.frame_count, regions })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec documents always serialize")
    }
}

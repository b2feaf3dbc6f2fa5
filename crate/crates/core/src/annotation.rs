//! JSON annotation documents: tracks of RLE-encoded masks with visibility flags.
//!
//! ```json
//! {"height": 64, "width": 64,
//!  "tracks": [{"object_id": "s3_o1_ego2exo",
//!              "frames": [{"frame_index": 0, "visible": true, "rle": [12, 4, 48]}]}]}
//! ```
//!
//! `rle` is column-major with a leading 0-run (see [`crate::mask::RleMask`]) and
//! is `null` for frames without a mask.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{rle_decode, rle_encode, BinaryMask, MaskError, MaskTrack, RleMask};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{context}: {reason}")]
    Schema { context: String, reason: String },
}

fn schema(context: impl Into<String>, reason: impl Into<String>) -> AnnotationError {
    AnnotationError::Schema {
        context: context.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_index: u32,
    pub visible: bool,
    pub rle: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub object_id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub height: usize,
    pub width: usize,
    pub tracks: Vec<TrackRecord>,
}

impl FrameRecord {
    pub fn from_mask(frame_index: u32, visible: bool, mask: Option<&BinaryMask>) -> Self {
        Self {
            frame_index,
            visible,
            rle: mask.map(|m| rle_encode(m).runs),
        }
    }
}

impl AnnotationFile {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            tracks: Vec::new(),
        }
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self, AnnotationError> {
        let file: AnnotationFile =
            serde_json::from_str(text).map_err(|source| AnnotationError::Json {
                path: context.to_string(),
                source,
            })?;
        file.validate(context)?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotationError> {
        let text = serde_json::to_string(self).expect("annotation serializes");
        fs::write(path, text).map_err(|source| AnnotationError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Structural checks: positive dimensions, strictly increasing frame
    /// indices, decodable RLE, and visibility consistent with mask content.
    pub fn validate(&self, context: &str) -> Result<(), AnnotationError> {
        if self.height == 0 || self.width == 0 {
            return Err(schema(context, "height and width must be positive"));
        }
        for (t, track) in self.tracks.iter().enumerate() {
            let mut last: Option<u32> = None;
            for (f, frame) in track.frames.iter().enumerate() {
                let where_ = format!("{context}: tracks[{t}].frames[{f}]");
                if let Some(prev) = last {
                    if frame.frame_index <= prev {
                        return Err(schema(where_, "frame_index must be strictly increasing"));
                    }
                }
                last = Some(frame.frame_index);
                let mask = self
                    .decode_frame(frame)
                    .map_err(|e| schema(format!("{where_}.rle"), e.to_string()))?;
                let nonempty = mask.as_ref().is_some_and(|m| !m.is_empty());
                if frame.visible && !nonempty {
                    return Err(schema(where_, "visible frame requires a nonempty mask"));
                }
            }
        }
        Ok(())
    }

    pub fn decode_frame(&self, frame: &FrameRecord) -> Result<Option<BinaryMask>, MaskError> {
        frame
            .rle
            .as_ref()
            .map(|runs| {
                rle_decode(&RleMask {
                    height: self.height,
                    width: self.width,
                    runs: runs.clone(),
                })
            })
            .transpose()
    }

    pub fn track(&self, object_id: &str) -> Option<&TrackRecord> {
        self.tracks.iter().find(|t| t.object_id == object_id)
    }

    /// Decode one track into a [`MaskTrack`]. Invisible frames keep their
    /// mask only when it is empty-or-absent, per the track invariant.
    pub fn mask_track(&self, track: &TrackRecord) -> Result<MaskTrack, MaskError> {
        let mut out = MaskTrack::new();
        for frame in &track.frames {
            let mask = self.decode_frame(frame)?;
            let mask = if frame.visible {
                mask
            } else {
                mask.filter(|m| m.is_empty())
            };
            out.insert(frame.frame_index, mask, frame.visible)?;
        }
        Ok(out)
    }
}

//! Dataset directories on disk.
//!
//! ```text
//! images/s{scene_seed}_{ego|exo}.png
//! {split}/index.json            sample metadata and image paths
//! {split}/{direction}_query.json  query masks (annotation format)
//! {split}/{direction}_gt.json     target ground truth (annotation format)
//! ```
//! Every sample is a one-frame track whose `object_id` is the sample id.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{split, CorrespondenceSample, Direction, Frame, Scenario, Scene, View};
use crate::annotation::{AnnotationError, AnnotationFile, FrameRecord, TrackRecord};
use crate::mask::BinaryMask;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: String, reason: String },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("{path}: {field}: {reason}")]
    Schema {
        path: String,
        field: String,
        reason: String,
    },
    #[error(transparent)]
    Dataset(#[from] super::DatasetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub scenario: Scenario,
    pub direction: Direction,
    pub category: usize,
    /// Paths relative to the dataset root.
    pub query_image: String,
    pub target_image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIndex {
    pub split: String,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<IndexEntry>,
}

impl SplitIndex {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| StoreError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn index_path(root: &Path, split: &str) -> PathBuf {
    root.join(split).join("index.json")
}

pub fn query_path(root: &Path, split: &str, direction: Direction) -> PathBuf {
    root.join(split).join(format!("{direction}_query.json"))
}

pub fn gt_path(root: &Path, split: &str, direction: Direction) -> PathBuf {
    root.join(split).join(format!("{direction}_gt.json"))
}

fn image_name(scene_seed: u64, view: View) -> String {
    let v = match view {
        View::Ego => "ego",
        View::Exo => "exo",
    };
    format!("images/s{scene_seed}_{v}.png")
}

fn other(view: View) -> View {
    match view {
        View::Ego => View::Exo,
        View::Exo => View::Ego,
    }
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<(), StoreError> {
    image::save_buffer_with_format(
        path,
        &frame.to_rgb8(),
        frame.width as u32,
        frame.height as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| StoreError::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_png(path: &Path) -> Result<Frame, StoreError> {
    let img = image::open(path).map_err(|e| StoreError::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(Frame::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw()))
}

/// Per-split sample counts.
pub type SplitCounts = BTreeMap<String, usize>;

/// Render `scenes`, split their samples by scenario, and write the layout.
/// Returns the sample count of every split and the written file paths.
pub fn write_dataset(
    root: &Path,
    scenes: &[Scene],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(SplitCounts, Vec<PathBuf>), StoreError> {
    let mut written = Vec::new();
    fs::create_dir_all(root.join("images")).map_err(io_err(root))?;
    let mut entries: Vec<(IndexEntry, CorrespondenceSample)> = Vec::new();
    let (mut height, mut width) = (0, 0);
    for scene in scenes {
        for view in [View::Ego, View::Exo] {
            let path = root.join(image_name(scene.spec.seed, view));
            let frame = &scene.view(view).frame;
            (height, width) = (frame.height, frame.width);
            write_png(&path, frame)?;
            written.push(path);
        }
        for s in scene.samples() {
            let qv = s.direction.query_view();
            entries.push((
                IndexEntry {
                    id: s.id.clone(),
                    scenario: s.scenario,
                    direction: s.direction,
                    category: s.category,
                    query_image: image_name(scene.spec.seed, qv),
                    target_image: image_name(scene.spec.seed, other(qv)),
                },
                s,
            ));
        }
    }
    let (a, b, c) = split(&entries, |e| e.0.scenario, fractions, seed)?;
    let mut counts = SplitCounts::new();
    for (name, part) in SPLITS.iter().zip([a, b, c]) {
        fs::create_dir_all(root.join(name)).map_err(io_err(root))?;
        counts.insert(name.to_string(), part.len());
        let index = SplitIndex {
            split: name.to_string(),
            height,
            width,
            samples: part.iter().map(|(e, _)| e.clone()).collect(),
        };
        let path = index_path(root, name);
        fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes"))
            .map_err(io_err(&path))?;
        written.push(path);
        for direction in Direction::BOTH {
            let mut query = AnnotationFile::new(height, width);
            let mut gt = AnnotationFile::new(height, width);
            for (e, s) in part.iter().filter(|(e, _)| e.direction == direction) {
                query.tracks.push(TrackRecord {
                    object_id: e.id.clone(),
                    frames: vec![FrameRecord::from_mask(0, true, Some(&s.query_mask))],
                });
                gt.tracks.push(TrackRecord {
                    object_id: e.id.clone(),
                    frames: vec![FrameRecord::from_mask(0, s.gt_visible, s.gt_target_mask.as_ref())],
                });
            }
            let qp = query_path(root, name, direction);
            let gp = gt_path(root, name, direction);
            query.save(&qp)?;
            gt.save(&gp)?;
            written.extend([qp, gp]);
        }
    }
    Ok((counts, written))
}

/// The single frame of `id` in an annotation file.
pub fn single_frame(
    file: &AnnotationFile,
    id: &str,
    path: &Path,
) -> Result<(bool, Option<BinaryMask>), StoreError> {
    let schema = |field: String, reason: &str| StoreError::Schema {
        path: path.display().to_string(),
        field,
        reason: reason.to_string(),
    };
    let (t, track) = file
        .tracks
        .iter()
        .enumerate()
        .find(|(_, t)| t.object_id == id)
        .ok_or_else(|| schema("tracks".into(), &format!("no track with object_id {id:?}")))?;
    let frame = match track.frames.as_slice() {
        [f] => f,
        _ => return Err(schema(format!("tracks[{t}].frames"), "expected exactly one frame")),
    };
    let mask = file
        .decode_frame(frame)
        .map_err(|e| schema(format!("tracks[{t}].frames[0].rle"), &e.to_string()))?;
    Ok((frame.visible, mask))
}

/// Reload one split as samples. Frames shared by several samples are loaded once.
pub fn load_split(root: &Path, split_name: &str) -> Result<Vec<CorrespondenceSample>, StoreError> {
    let ipath = index_path(root, split_name);
    let index = SplitIndex::load(&ipath)?;
    let mut frames: HashMap<String, Arc<Frame>> = HashMap::new();
    let mut frame = |rel: &str| -> Result<Arc<Frame>, StoreError> {
        if let Some(f) = frames.get(rel) {
            return Ok(f.clone());
        }
        let f = Arc::new(read_png(&root.join(rel))?);
        frames.insert(rel.to_string(), f.clone());
        Ok(f)
    };
    let mut files = HashMap::new();
    for direction in Direction::BOTH {
        let qp = query_path(root, split_name, direction);
        let gp = gt_path(root, split_name, direction);
        let q = AnnotationFile::load(&qp)?;
        let g = AnnotationFile::load(&gp)?;
        files.insert(direction, ((qp, q), (gp, g)));
    }
    let mut out = Vec::with_capacity(index.samples.len());
    for (i, e) in index.samples.iter().enumerate() {
        let ((qp, q), (gp, g)) = &files[&e.direction];
        let (_, query_mask) = single_frame(q, &e.id, qp)?;
        let query_mask = query_mask.filter(|m| !m.is_empty()).ok_or_else(|| StoreError::Schema {
            path: qp.display().to_string(),
            field: format!("track {:?}", e.id),
            reason: "query mask is missing or empty".into(),
        })?;
        let (gt_visible, gt_mask) = single_frame(g, &e.id, gp)?;
        if e.category >= super::VOCAB_SIZE {
            return Err(StoreError::Schema {
                path: ipath.display().to_string(),
                field: format!("samples[{i}].category"),
                reason: format!("must be below {}", super::VOCAB_SIZE),
            });
        }
        out.push(CorrespondenceSample {
            id: e.id.clone(),
            query_frame: frame(&e.query_image)?,
            target_frame: frame(&e.target_image)?,
            query_mask,
            gt_target_mask: if gt_visible { gt_mask } else { None },
            gt_visible,
            category: e.category,
            scenario: e.scenario,
            direction: e.direction,
        });
    }
    Ok(out)
}

//! Correspondence metrics: IoU, location error (LE), contour accuracy (CA) and
//! balanced visibility accuracy (VA), plus per-scenario aggregation.
//!
//! Conventions not fixed by the benchmark definition are pinned here and
//! echoed in every report (see [`MetricConventions`]):
//! - LE is the centroid distance divided by the image diagonal.
//! - An empty prediction scores LE = 1 and CA = 0.
//! - IoU of two empty masks is 1.
//! - CA aligns centroids with a rounded integer shift.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{centroid, translate, BinaryMask, MaskError, MaskTrack};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("only one visibility class present; plain accuracy {accuracy}")]
    DegenerateLabels { accuracy: f64 },
    #[error("no visibility labels")]
    NoLabels,
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    pred.same_dims(gt)?;
    let union = pred.union_count(gt);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(pred.intersection_count(gt) as f64 / union as f64)
}

pub fn location_error(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    pred.same_dims(gt)?;
    let (gr, gc) = centroid(gt).map_err(|_| MetricsError::EmptyGroundTruth)?;
    let Ok((pr, pc)) = centroid(pred) else {
        return Ok(1.0);
    };
    let (h, w) = (gt.height() as f64, gt.width() as f64);
    Ok(((pr - gr).powi(2) + (pc - gc).powi(2)).sqrt() / (h * h + w * w).sqrt())
}

pub fn contour_accuracy(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    pred.same_dims(gt)?;
    let g = pixel_sums(gt);
    if g.0 == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let p = pixel_sums(pred);
    if p.0 == 0 {
        return Ok(0.0);
    }
    // Exact rational centroid difference, so half-pixel ties round the same
    // way regardless of floating-point error.
    let shift = |gs: i128, ps: i128| round_half_away(gs * p.0 - ps * g.0, g.0 * p.0);
    let aligned = translate(pred, shift(g.1, p.1), shift(g.2, p.2));
    iou(&aligned, gt)
}

/// (count, sum of rows, sum of columns) of the set pixels.
fn pixel_sums(m: &BinaryMask) -> (i128, i128, i128) {
    let w = m.width();
    m.bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .fold((0, 0, 0), |(n, r, c), (i, _)| (n + 1, r + (i / w) as i128, c + (i % w) as i128))
}

fn round_half_away(num: i128, den: i128) -> i64 {
    let q = (2 * num.abs() + den) / (2 * den);
    (if num < 0 { -q } else { q }) as i64
}

/// Balanced accuracy `(TPR + TNR) / 2` of visibility decisions.
///
/// With a single class in `gts`, returns [`MetricsError::DegenerateLabels`]
/// carrying the plain accuracy.
pub fn visibility_accuracy(preds: &[bool], gts: &[bool]) -> Result<f64, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), gts.len()));
    }
    if gts.is_empty() {
        return Err(MetricsError::NoLabels);
    }
    let (mut tp, mut fneg, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(gts) {
        match (g, p) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let pos = tp + fneg;
    let neg = tn + fp;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::DegenerateLabels {
            accuracy: (tp + tn) as f64 / gts.len() as f64,
        });
    }
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Mean of the two direction IoUs.
pub fn final_score(ego2exo_iou: f64, exo2ego_iou: f64) -> f64 {
    (ego2exo_iou + exo2ego_iou) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_index: u32,
    pub predicted_visible: bool,
    pub predicted_mask: Option<BinaryMask>,
}

/// The four metrics over one frame set. A field is `None` when its frame set is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub iou: Option<f64>,
    pub le: Option<f64>,
    pub ca: Option<f64>,
    pub va: Option<f64>,
    pub va_degenerate: bool,
    pub n_eval_frames: usize,
    pub n_visibility_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    pub le_normalization: String,
    pub empty_prediction_le: f64,
    pub empty_prediction_ca: f64,
    pub ca_alignment: String,
}

impl Default for MetricConventions {
    fn default() -> Self {
        Self {
            le_normalization: "image_diagonal".into(),
            empty_prediction_le: 1.0,
            empty_prediction_ca: 0.0,
            ca_alignment: "rounded_integer_centroid_shift".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: Option<f64>,
    pub le: Option<f64>,
    pub ca: Option<f64>,
    pub va: Option<f64>,
    pub va_degenerate: bool,
    pub per_scenario: BTreeMap<String, MetricValues>,
    pub n_eval_frames: usize,
    pub n_visibility_frames: usize,
    pub conventions: MetricConventions,
}

/// Frame-level record collected by [`MetricsAccumulator`].
#[derive(Debug, Clone, Copy, PartialEq)]
struct FrameRecord {
    covisible: Option<(f64, f64, f64)>,
    visibility: (bool, bool),
}

/// Pools frame-level results across tracks; IoU/LE/CA are averaged over
/// co-visible frames and VA over every frame with a query mask.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    frames: Vec<(String, FrameRecord)>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one frame that has a query mask. `gt_mask` is required when
    /// `gt_visible`.
    pub fn add_frame(
        &mut self,
        scenario: &str,
        query_visible: bool,
        gt_visible: bool,
        gt_mask: Option<&BinaryMask>,
        predicted_visible: bool,
        predicted_mask: Option<&BinaryMask>,
    ) -> Result<(), MetricsError> {
        let covisible = if query_visible && gt_visible {
            let gt = gt_mask.ok_or(MetricsError::EmptyGroundTruth)?;
            let empty = BinaryMask::empty(gt.height(), gt.width());
            // An invisible prediction counts as an empty mask.
            let pred = match predicted_mask {
                Some(m) if predicted_visible => m,
                _ => &empty,
            };
            Some((
                iou(pred, gt)?,
                location_error(pred, gt)?,
                contour_accuracy(pred, gt)?,
            ))
        } else {
            None
        };
        self.frames.push((
            scenario.to_string(),
            FrameRecord {
                covisible,
                visibility: (predicted_visible, gt_visible),
            },
        ));
        Ok(())
    }

    fn values<'a>(records: impl Iterator<Item = &'a FrameRecord> + Clone) -> MetricValues {
        let eval: Vec<(f64, f64, f64)> = records.clone().filter_map(|r| r.covisible).collect();
        let n = eval.len();
        let mean = |f: fn(&(f64, f64, f64)) -> f64| {
            (n > 0).then(|| eval.iter().map(f).sum::<f64>() / n as f64)
        };
        let (preds, gts): (Vec<bool>, Vec<bool>) = records.map(|r| r.visibility).unzip();
        let (va, va_degenerate) = match visibility_accuracy(&preds, &gts) {
            Ok(v) => (Some(v), false),
            Err(MetricsError::DegenerateLabels { accuracy }) => (Some(accuracy), true),
            Err(_) => (None, false),
        };
        MetricValues {
            iou: mean(|t| t.0),
            le: mean(|t| t.1),
            ca: mean(|t| t.2),
            va,
            va_degenerate,
            n_eval_frames: n,
            n_visibility_frames: gts.len(),
        }
    }

    pub fn finish(&self) -> MetricsReport {
        let all = Self::values(self.frames.iter().map(|(_, r)| r));
        let mut scenarios: Vec<&str> = self.frames.iter().map(|(s, _)| s.as_str()).collect();
        scenarios.sort_unstable();
        scenarios.dedup();
        let per_scenario = scenarios
            .into_iter()
            .map(|s| {
                let v = Self::values(
                    self.frames
                        .iter()
                        .filter(move |(name, _)| name == s)
                        .map(|(_, r)| r),
                );
                (s.to_string(), v)
            })
            .collect();
        MetricsReport {
            iou: all.iou,
            le: all.le,
            ca: all.ca,
            va: all.va,
            va_degenerate: all.va_degenerate,
            per_scenario,
            n_eval_frames: all.n_eval_frames,
            n_visibility_frames: all.n_visibility_frames,
            conventions: MetricConventions::default(),
        }
    }
}

/// Evaluate one track pair. Frames without a query mask are ignored; frames
/// without a prediction count as predicted-invisible.
pub fn evaluate_track(
    preds: &[FramePrediction],
    gt: &MaskTrack,
    query: &MaskTrack,
    scenario: &str,
) -> Result<MetricsReport, MetricsError> {
    let mut acc = MetricsAccumulator::new();
    let by_frame: BTreeMap<u32, &FramePrediction> =
        preds.iter().map(|p| (p.frame_index, p)).collect();
    for (idx, q) in query.iter() {
        let Some(qmask) = q.mask.as_ref() else {
            continue;
        };
        if qmask.is_empty() {
            continue;
        }
        let (gt_visible, gt_mask) = match gt.get(idx) {
            Some(f) => (f.visible, f.mask.as_ref()),
            None => (false, None),
        };
        let (pv, pm) = match by_frame.get(&idx) {
            Some(p) => (p.predicted_visible, p.predicted_mask.as_ref()),
            None => (false, None),
        };
        acc.add_frame(scenario, q.visible, gt_visible, gt_mask, pv, pm)?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, cw: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| r >= r0 && r < r0 + rh && c >= c0 && c < c0 + cw)
    }

    #[test]
    fn iou_examples() {
        let a = rect(4, 4, 0, 0, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &rect(4, 4, 2, 2, 2, 2)).unwrap(), 0.0);
        let top = rect(4, 4, 0, 0, 2, 4);
        assert_eq!(iou(&top, &BinaryMask::full(4, 4)).unwrap(), 0.5);
        assert_eq!(iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)).unwrap(), 1.0);
        assert!(matches!(
            iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 4)),
            Err(MetricsError::Mask(MaskError::DimensionMismatch(..)))
        ));
    }

    #[test]
    fn location_error_examples() {
        let a = rect(8, 6, 1, 1, 3, 2);
        assert_eq!(location_error(&a, &a).unwrap(), 0.0);
        let (h, w) = (8usize, 6usize);
        let p = BinaryMask::from_pixels(h, w, &[(0, 0)]);
        let g = BinaryMask::from_pixels(h, w, &[(h - 1, w - 1)]);
        let expected = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt()
            / ((h * h + w * w) as f64).sqrt();
        assert!((location_error(&p, &g).unwrap() - expected).abs() < 1e-15);
        assert_eq!(location_error(&BinaryMask::empty(h, w), &g).unwrap(), 1.0);
    }

    #[test]
    fn contour_accuracy_examples() {
        let a = rect(10, 10, 1, 1, 3, 2);
        let b = rect(10, 10, 5, 6, 3, 2);
        assert_eq!(contour_accuracy(&a, &b).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&BinaryMask::empty(10, 10), &b).unwrap(), 0.0);
        // 2x2 square vs 2x3 rectangle: centroids (0.5, 0.5) and (4.5, 5.0)
        // -> rounded shift (4, 5) -> square covers cols 5..7 rows 4..6,
        // rectangle covers cols 4..7; overlap 4, union 6.
        let sq = rect(10, 10, 0, 0, 2, 2);
        let re = rect(10, 10, 4, 4, 2, 3);
        assert!((contour_accuracy(&sq, &re).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn visibility_examples() {
        let labels = [true, false, true, false];
        assert_eq!(visibility_accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(visibility_accuracy(&[true; 4], &labels).unwrap(), 0.5);
        // TP=3, FN=1, TN=2, FP=2
        let gts = [true, true, true, true, false, false, false, false];
        let preds = [true, true, true, false, false, false, true, true];
        assert!((visibility_accuracy(&preds, &gts).unwrap() - 0.625).abs() < 1e-15);
        assert_eq!(
            visibility_accuracy(&[true, false], &[true, true]),
            Err(MetricsError::DegenerateLabels { accuracy: 0.5 })
        );
        assert!(matches!(
            visibility_accuracy(&[true], &[true, false]),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn final_score_examples() {
        assert!((final_score(0.35, 0.40) - 0.375).abs() < 1e-12);
        assert_eq!(final_score(0.3, 0.3), 0.3);
        assert!((final_score(0.19, 0.27) - 0.23).abs() < 1e-12);
    }

    fn track_of(masks: &[Option<BinaryMask>]) -> MaskTrack {
        let mut t = MaskTrack::new();
        for (i, m) in masks.iter().enumerate() {
            let vis = m.as_ref().is_some_and(|m| !m.is_empty());
            t.insert(i as u32, m.clone(), vis).unwrap();
        }
        t
    }

    #[test]
    fn perfect_track() {
        let masks: Vec<Option<BinaryMask>> =
            (0..5).map(|i| Some(rect(8, 8, i, i, 2, 3))).collect();
        let gt = track_of(&masks);
        let preds: Vec<FramePrediction> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| FramePrediction {
                frame_index: i as u32,
                predicted_visible: true,
                predicted_mask: m.clone(),
            })
            .collect();
        // Five visible frames only: VA is degenerate but equals 1 as accuracy.
        let r = evaluate_track(&preds, &gt, &gt, "x").unwrap();
        assert_eq!((r.iou, r.le, r.ca, r.va), (Some(1.0), Some(0.0), Some(1.0), Some(1.0)));
        assert_eq!(r.n_eval_frames, 5);
    }

    #[test]
    fn invisible_track_has_no_eval_frames() {
        let q = track_of(&vec![Some(rect(8, 8, 0, 0, 2, 2)); 4]);
        let gt = track_of(&[None, None, None, None]);
        let preds: Vec<FramePrediction> = (0..4)
            .map(|i| FramePrediction {
                frame_index: i,
                predicted_visible: false,
                predicted_mask: None,
            })
            .collect();
        let r = evaluate_track(&preds, &gt, &q, "x").unwrap();
        assert_eq!((r.iou, r.le, r.ca), (None, None, None));
        assert_eq!(r.va, Some(1.0));
        assert!(r.va_degenerate);
        assert_eq!(r.n_eval_frames, 0);
        assert_eq!(r.n_visibility_frames, 4);
    }
}

//! Pixel decoder and mask generator.
//!
//! The pixel decoder merges the three backbone levels top-down (1x1 lateral
//! projections plus nearest upsampling) into a per-pixel embedding map at
//! half resolution. Mask logits are dot products of that map with
//! `fused + mask_token`; visibility comes from a two-layer perceptron on
//! `fused ⊙ mean(pixel embeddings)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoder::Multiscale;
use crate::mask::BinaryMask;
use crate::nn::{bce_with_logits, sigmoid, upsample2, upsample2_backward};

/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmenterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("visible ground truth requires a mask")]
    MissingMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams {
    /// Lateral 1x1 projections `(C_level, d)` for the three levels.
    pub laterals: [Array2<f64>; 3],
    pub pixel_bias: Array1<f64>,
    pub mask_token: Array1<f64>,
    pub vis_w1: Array2<f64>,
    pub vis_b1: Array1<f64>,
    pub vis_w2: Array1<f64>,
    pub vis_b2: f64,
}

impl SegmenterParams {
    pub fn init(channels: [usize; 3], embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut mat = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
        };
        let laterals = channels.map(|c| mat(c, embed_dim, (1.0 / c as f64).sqrt()));
        let vis_w1 = mat(embed_dim, embed_dim, (2.0 / embed_dim as f64).sqrt());
        let vis_w2 = mat(1, embed_dim, (1.0 / embed_dim as f64).sqrt()).row(0).to_owned();
        let mask_token = mat(1, embed_dim, 0.1).row(0).to_owned();
        Self {
            laterals,
            pixel_bias: Array1::zeros(embed_dim),
            mask_token,
            vis_w1,
            vis_b1: Array1::zeros(embed_dim),
            vis_w2,
            vis_b2: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            laterals: self.laterals.clone().map(|l| Array2::zeros(l.raw_dim())),
            pixel_bias: Array1::zeros(self.pixel_bias.len()),
            mask_token: Array1::zeros(self.mask_token.len()),
            vis_w1: Array2::zeros(self.vis_w1.raw_dim()),
            vis_b1: Array1::zeros(self.vis_b1.len()),
            vis_w2: Array1::zeros(self.vis_w2.len()),
            vis_b2: 0.0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.mask_token.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    /// Row-major logits at half resolution.
    pub mask_logits: Array1<f64>,
    pub logits_height: usize,
    pub logits_width: usize,
    pub visibility_logit: f64,
    /// `logit > threshold`, nearest-upsampled to the input frame size.
    pub upsampled_mask: BinaryMask,
}

impl SegPrediction {
    pub fn visible(&self, threshold: f64) -> bool {
        self.visibility_logit > threshold
    }
}

/// Forward intermediates for [`backward`].
#[derive(Debug, Clone)]
pub struct SegCache {
    pixel_embeddings: Array2<f64>,
    query: Array1<f64>,
    fused: Array1<f64>,
    global: Array1<f64>,
    vis_in: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
    dims: [(usize, usize); 3],
}

fn pixel_decoder(features: &Multiscale, params: &SegmenterParams) -> Array2<f64> {
    let [l0, l1, l2] = &features.levels;
    let p2 = l2.data.dot(&params.laterals[2]);
    let mut p1 = l1.data.dot(&params.laterals[1]);
    p1 += &upsample2(&p2, l2.height, l2.width);
    let mut p0 = l0.data.dot(&params.laterals[0]);
    p0 += &upsample2(&p1, l1.height, l1.width);
    p0 += &params.pixel_bias;
    p0
}

pub fn predict_mask_with_cache(
    features: &Multiscale,
    fused: &Array1<f64>,
    params: &SegmenterParams,
    mask_threshold: f64,
) -> Result<(SegPrediction, SegCache), SegmenterError> {
    let d = params.embed_dim();
    if fused.len() != d {
        return Err(SegmenterError::DimensionMismatch(format!(
            "fused embedding has length {}, expected {d}",
            fused.len()
        )));
    }
    for (i, lvl) in features.levels.iter().enumerate() {
        if lvl.channels() != params.laterals[i].nrows() {
            return Err(SegmenterError::DimensionMismatch(format!(
                "level {i} has {} channels, expected {}",
                lvl.channels(),
                params.laterals[i].nrows()
            )));
        }
    }
    let pixel_embeddings = pixel_decoder(features, params);
    let query = fused + &params.mask_token;
    let mask_logits = pixel_embeddings.dot(&query);
    let global = pixel_embeddings.mean_axis(Axis(0)).expect("nonempty map");
    let vis_in = fused * &global;
    let hidden_pre = vis_in.dot(&params.vis_w1) + &params.vis_b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let visibility_logit = hidden.dot(&params.vis_w2) + params.vis_b2;

    let (h, w) = (features.levels[0].height, features.levels[0].width);
    let coarse = BinaryMask::new(h, w, mask_logits.iter().map(|&v| v > mask_threshold).collect())
        .expect("logit grid is nonempty");
    let prediction = SegPrediction {
        mask_logits,
        logits_height: h,
        logits_width: w,
        visibility_logit,
        upsampled_mask: coarse.upsample_nearest(2),
    };
    let cache = SegCache {
        pixel_embeddings,
        query,
        fused: fused.clone(),
        global,
        vis_in,
        hidden_pre,
        hidden,
        dims: [0, 1, 2].map(|i| (features.levels[i].height, features.levels[i].width)),
    };
    Ok((prediction, cache))
}

pub fn predict_mask(
    features: &Multiscale,
    fused: &Array1<f64>,
    params: &SegmenterParams,
) -> Result<SegPrediction, SegmenterError> {
    Ok(predict_mask_with_cache(features, fused, params, 0.0)?.0)
}

/// Gradients produced by [`backward`] beyond the parameter gradients.
#[derive(Debug, Clone)]
pub struct SegInputGrads {
    pub fused: Array1<f64>,
    /// Gradients on the three feature levels, when requested.
    pub levels: Option<[Array2<f64>; 3]>,
}

/// Backpropagate `(dL/dlogits, dL/dvisibility)`; accumulates into `grads`.
pub fn backward(
    cache: &SegCache,
    grad_logits: &Array1<f64>,
    grad_visibility: f64,
    params: &SegmenterParams,
    grads: &mut SegmenterParams,
    features: &Multiscale,
    want_feature_grads: bool,
) -> SegInputGrads {
    // Visibility head.
    grads.vis_b2 += grad_visibility;
    grads.vis_w2.scaled_add(grad_visibility, &cache.hidden);
    let mut dhidden = &params.vis_w2 * grad_visibility;
    dhidden.zip_mut_with(&cache.hidden_pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    grads.vis_b1 += &dhidden;
    grads.vis_w1 += &cache
        .vis_in
        .view()
        .insert_axis(Axis(1))
        .dot(&dhidden.view().insert_axis(Axis(0)));
    let dvis_in = params.vis_w1.dot(&dhidden);
    let mut dfused = &dvis_in * &cache.global;
    let dglobal = &dvis_in * &cache.fused;

    // Mask logits.
    let dquery = cache.pixel_embeddings.t().dot(grad_logits);
    dfused += &dquery;
    grads.mask_token += &dquery;
    let n = cache.pixel_embeddings.nrows() as f64;
    let mut dp0 = grad_logits
        .view()
        .insert_axis(Axis(1))
        .dot(&cache.query.view().insert_axis(Axis(0)));
    dp0 += &(dglobal / n);

    // Pixel decoder.
    let [l0, l1, l2] = &features.levels;
    grads.pixel_bias += &dp0.sum_axis(Axis(0));
    grads.laterals[0] += &l0.data.t().dot(&dp0);
    let dp1 = upsample2_backward(&dp0, cache.dims[1].0, cache.dims[1].1);
    grads.laterals[1] += &l1.data.t().dot(&dp1);
    let dp2 = upsample2_backward(&dp1, cache.dims[2].0, cache.dims[2].1);
    grads.laterals[2] += &l2.data.t().dot(&dp2);

    let levels = want_feature_grads.then(|| {
        [
            dp0.dot(&params.laterals[0].t()),
            dp1.dot(&params.laterals[1].t()),
            dp2.dot(&params.laterals[2].t()),
        ]
    });
    SegInputGrads {
        fused: dfused,
        levels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLoss {
    pub bce: f64,
    pub dice: f64,
    pub visibility: f64,
}

impl MaskLoss {
    pub fn total(&self) -> f64 {
        self.bce + self.dice + self.visibility
    }
}

/// Bring a ground-truth mask to logit resolution (majority downsampling
/// when it is at frame resolution).
pub fn gt_at_logit_resolution(
    pred: &SegPrediction,
    gt: &BinaryMask,
) -> Result<BinaryMask, SegmenterError> {
    let (h, w) = (pred.logits_height, pred.logits_width);
    if gt.height() == h && gt.width() == w {
        Ok(gt.clone())
    } else if gt.height() == 2 * h && gt.width() == 2 * w {
        Ok(gt.downsample_majority(2))
    } else {
        Err(SegmenterError::DimensionMismatch(format!(
            "ground truth {}x{} vs logits {h}x{w}",
            gt.height(),
            gt.width()
        )))
    }
}

/// Per-pixel BCE (mean) + Dice on the mask logits and BCE on the visibility
/// logit when the target is visible; only the visibility BCE otherwise.
pub fn mask_loss(
    pred: &SegPrediction,
    gt: Option<&BinaryMask>,
    gt_visible: bool,
) -> Result<MaskLoss, SegmenterError> {
    Ok(mask_loss_with_grad(pred, gt, gt_visible)?.0)
}

/// [`mask_loss`] plus `(dL/dlogits, dL/dvisibility)`.
pub fn mask_loss_with_grad(
    pred: &SegPrediction,
    gt: Option<&BinaryMask>,
    gt_visible: bool,
) -> Result<(MaskLoss, Array1<f64>, f64), SegmenterError> {
    let vis_target = if gt_visible { 1.0 } else { 0.0 };
    let visibility = bce_with_logits(pred.visibility_logit, vis_target);
    let grad_vis = sigmoid(pred.visibility_logit) - vis_target;
    let n = pred.mask_logits.len();
    if !gt_visible {
        let loss = MaskLoss {
            bce: 0.0,
            dice: 0.0,
            visibility,
        };
        return Ok((loss, Array1::zeros(n), grad_vis));
    }
    let gt = gt_at_logit_resolution(pred, gt.ok_or(SegmenterError::MissingMask)?)?;
    let targets: Vec<f64> = gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let probs: Vec<f64> = pred.mask_logits.iter().map(|&x| sigmoid(x)).collect();

    let bce = pred
        .mask_logits
        .iter()
        .zip(&targets)
        .map(|(&x, &y)| bce_with_logits(x, y))
        .sum::<f64>()
        / n as f64;
    let inter: f64 = probs.iter().zip(&targets).map(|(p, y)| p * y).sum();
    let denom = probs.iter().sum::<f64>() + targets.iter().sum::<f64>() + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let dice = 1.0 - numer / denom;

    let grad = Array1::from_iter(probs.iter().zip(&targets).map(|(&p, &y)| {
        let dbce = (p - y) / n as f64;
        let ddice_dp = -(2.0 * y * denom - numer) / (denom * denom);
        dbce + ddice_dp * p * (1.0 - p)
    }));
    Ok((
        MaskLoss {
            bce,
            dice,
            visibility,
        },
        grad,
        grad_vis,
    ))
}

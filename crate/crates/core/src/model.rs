//! The full correspondence model and its per-sample forward/backward.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::VOCAB_SIZE;
use crate::encoder::{
    embed_pooled, embed_pooled_backward, encode_text_backward, pool_object, Backbone,
    BackboneCache, Branch, ConditionEmbedding, EncoderError, EncoderParams, Multiscale,
};
use crate::mask::BinaryMask;
use crate::mcfuse::{fuse, fuse_backward, DimensionMismatch, McFuseParams};
use crate::segmenter::{
    backward as seg_backward, mask_loss_with_grad, predict_mask_with_cache, MaskLoss,
    SegPrediction, SegmenterError, SegmenterParams,
};
use crate::xobjalign::DistanceKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] DimensionMismatch),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error("MCFuse is enabled but no text token was given")]
    MissingText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub channels: [usize; 3],
    pub vocab_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            channels: [16, 32, 64],
            vocab_size: VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The convolutional visual encoder.
    Backbone,
    /// Mask-pool projection and text table.
    ConditionHeads,
    McFuse,
    Segmenter,
}

/// Counts calls into the target-mask embedding path.
#[derive(Debug, Default)]
pub struct Instrumentation {
    target_embedding_calls: AtomicU64,
}

impl Instrumentation {
    pub fn target_embedding_calls(&self) -> u64 {
        self.target_embedding_calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub encoder: EncoderParams,
    pub mcfuse: McFuseParams,
    pub segmenter: SegmenterParams,
    pub instrumentation: Instrumentation,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch,
            encoder: self.encoder.clone(),
            mcfuse: self.mcfuse.clone(),
            segmenter: self.segmenter.clone(),
            instrumentation: Instrumentation::default(),
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.encoder == other.encoder
            && self.mcfuse == other.mcfuse
            && self.segmenter == other.segmenter
    }
}

/// A named view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn arr2<'a>(name: impl Into<String>, group: ParamGroup, a: &'a Array2<f64>) -> ParamView<'a> {
    ParamView {
        name: name.into(),
        group,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

fn arr1<'a>(name: impl Into<String>, group: ParamGroup, a: &'a Array1<f64>) -> ParamView<'a> {
    ParamView {
        name: name.into(),
        group,
        shape: vec![a.len()],
        data: a.as_slice().expect("standard layout"),
    }
}

fn scalar<'a>(name: impl Into<String>, group: ParamGroup, v: &'a f64) -> ParamView<'a> {
    ParamView {
        name: name.into(),
        group,
        shape: vec![],
        data: std::slice::from_ref(v),
    }
}

fn arr2_mut<'a>(name: impl Into<String>, group: ParamGroup, a: &'a mut Array2<f64>) -> ParamViewMut<'a> {
    ParamViewMut {
        name: name.into(),
        group,
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
    }
}

fn arr1_mut<'a>(name: impl Into<String>, group: ParamGroup, a: &'a mut Array1<f64>) -> ParamViewMut<'a> {
    ParamViewMut {
        name: name.into(),
        group,
        shape: vec![a.len()],
        data: a.as_slice_mut().expect("standard layout"),
    }
}

fn scalar_mut<'a>(name: impl Into<String>, group: ParamGroup, v: &'a mut f64) -> ParamViewMut<'a> {
    ParamViewMut {
        name: name.into(),
        group,
        shape: vec![],
        data: std::slice::from_mut(v),
    }
}

/// Per-sample training inputs. Features come from the frozen backbone.
pub struct SampleInputs<'a> {
    pub query_features: &'a Multiscale,
    pub query_mask: &'a BinaryMask,
    pub target_features: &'a Multiscale,
    pub gt_mask: Option<&'a BinaryMask>,
    pub gt_visible: bool,
    /// Description token; required when MCFuse is enabled.
    pub text_token: Option<usize>,
}

/// Loss weights and switches for one backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub enable_mcfuse: bool,
    /// Weight of the alignment term; `None` disables it.
    pub xobj_weight: Option<f64>,
    pub xobj_distance: DistanceKind,
    /// Scale applied to this sample's mask loss (e.g. `1 / batch_size`).
    pub mask_scale: f64,
    /// Scale applied to this sample's alignment term (e.g. `1 / n_pairs`).
    pub xobj_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub mask_loss: MaskLoss,
    /// Unscaled distance between query and target embeddings, when the
    /// target is visible and the target path ran.
    pub embed_distance: Option<f64>,
    pub fusion_weight: f64,
}

/// Backbone caches for full backward passes (gradient checks only).
pub struct BackboneTrace<'a> {
    pub query: &'a BackboneCache,
    pub target: &'a BackboneCache,
}

impl Model {
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(arch.channels, arch.embed_dim, arch.vocab_size, &mut rng);
        let mcfuse = McFuseParams::init(arch.embed_dim, &mut rng);
        let segmenter = SegmenterParams::init(arch.channels, arch.embed_dim, &mut rng);
        Self {
            arch,
            encoder,
            mcfuse,
            segmenter,
            instrumentation: Instrumentation::default(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            encoder: self.encoder.zeros_like(),
            mcfuse: self.mcfuse.zeros_like(),
            segmenter: self.segmenter.zeros_like(),
            instrumentation: Instrumentation::default(),
        }
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        use ParamGroup::*;
        let mut out = Vec::new();
        for (i, st) in self.encoder.backbone.stages.iter().enumerate() {
            out.push(arr2(format!("encoder.backbone.stage{i}.weight"), Backbone, &st.weight));
            out.push(arr1(format!("encoder.backbone.stage{i}.bias"), Backbone, &st.bias));
        }
        out.push(arr2("encoder.pool_projection", ConditionHeads, &self.encoder.pool_projection));
        out.push(arr2("encoder.text_table", ConditionHeads, &self.encoder.text_table));
        out.push(arr2("mcfuse.text_projection", McFuse, &self.mcfuse.text_projection));
        out.push(scalar("mcfuse.fusion_logit", McFuse, &self.mcfuse.fusion_logit));
        let s = &self.segmenter;
        for (i, l) in s.laterals.iter().enumerate() {
            out.push(arr2(format!("segmenter.lateral{i}"), Segmenter, l));
        }
        out.push(arr1("segmenter.pixel_bias", Segmenter, &s.pixel_bias));
        out.push(arr1("segmenter.mask_token", Segmenter, &s.mask_token));
        out.push(arr2("segmenter.vis_w1", Segmenter, &s.vis_w1));
        out.push(arr1("segmenter.vis_b1", Segmenter, &s.vis_b1));
        out.push(arr1("segmenter.vis_w2", Segmenter, &s.vis_w2));
        out.push(scalar("segmenter.vis_b2", Segmenter, &s.vis_b2));
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        use ParamGroup::*;
        let mut out = Vec::new();
        for (i, st) in self.encoder.backbone.stages.iter_mut().enumerate() {
            out.push(arr2_mut(format!("encoder.backbone.stage{i}.weight"), Backbone, &mut st.weight));
            out.push(arr1_mut(format!("encoder.backbone.stage{i}.bias"), Backbone, &mut st.bias));
        }
        out.push(arr2_mut("encoder.pool_projection", ConditionHeads, &mut self.encoder.pool_projection));
        out.push(arr2_mut("encoder.text_table", ConditionHeads, &mut self.encoder.text_table));
        out.push(arr2_mut("mcfuse.text_projection", McFuse, &mut self.mcfuse.text_projection));
        out.push(scalar_mut("mcfuse.fusion_logit", McFuse, &mut self.mcfuse.fusion_logit));
        let s = &mut self.segmenter;
        for (i, l) in s.laterals.iter_mut().enumerate() {
            out.push(arr2_mut(format!("segmenter.lateral{i}"), Segmenter, l));
        }
        out.push(arr1_mut("segmenter.pixel_bias", Segmenter, &mut s.pixel_bias));
        out.push(arr1_mut("segmenter.mask_token", Segmenter, &mut s.mask_token));
        out.push(arr2_mut("segmenter.vis_w1", Segmenter, &mut s.vis_w1));
        out.push(arr1_mut("segmenter.vis_b1", Segmenter, &mut s.vis_b1));
        out.push(arr1_mut("segmenter.vis_w2", Segmenter, &mut s.vis_w2));
        out.push(scalar_mut("segmenter.vis_b2", Segmenter, &mut s.vis_b2));
        out
    }

    /// Number of scalars in the given groups.
    pub fn count_params(&self, groups: &[ParamGroup]) -> usize {
        self.params()
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.data.len())
            .sum()
    }

    /// Every scalar parameter of the model.
    pub fn total_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Bit patterns of every parameter in `group`, for freeze checks.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<(String, Vec<u64>)> {
        self.params()
            .into_iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name, p.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    /// `self += scale * other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) {
        let src = other.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(s.data) {
                *d += scale * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Visual embedding of the query object.
    pub fn query_embedding(
        &self,
        query_features: &Multiscale,
        query_mask: &BinaryMask,
    ) -> Result<ConditionEmbedding, ModelError> {
        Ok(embed_pooled(&pool_object(query_features.deepest(), query_mask)?, &self.encoder))
    }

    /// Visual embedding of the ground-truth target object. Train-time only;
    /// every call is counted in [`Instrumentation`].
    pub fn target_embedding(
        &self,
        target_features: &Multiscale,
        gt_mask: &BinaryMask,
    ) -> Result<ConditionEmbedding, ModelError> {
        self.instrumentation
            .target_embedding_calls
            .fetch_add(1, Ordering::Relaxed);
        Ok(embed_pooled(&pool_object(target_features.deepest(), gt_mask)?, &self.encoder))
    }

    /// Condition vector: fused when a text token is given, visual otherwise.
    pub fn condition(
        &self,
        query_features: &Multiscale,
        query_mask: &BinaryMask,
        text_token: Option<usize>,
    ) -> Result<ConditionEmbedding, ModelError> {
        let visual = self.query_embedding(query_features, query_mask)?;
        match text_token {
            Some(t) => {
                let text = self.text_embedding(t)?;
                Ok(fuse(&visual, &text, &self.mcfuse)?)
            }
            None => Ok(visual),
        }
    }

    fn text_embedding(&self, token: usize) -> Result<ConditionEmbedding, ModelError> {
        if token >= self.encoder.text_table.nrows() {
            return Err(EncoderError::UnknownToken(token, self.encoder.text_table.nrows()).into());
        }
        Ok(ConditionEmbedding {
            vector: self.encoder.text_table.row(token).to_owned(),
            branch: Branch::Text,
        })
    }

    /// Inference: condition on the query and predict in the target frame.
    pub fn predict(
        &self,
        query_features: &Multiscale,
        query_mask: &BinaryMask,
        target_features: &Multiscale,
        text_token: Option<usize>,
        mask_threshold: f64,
    ) -> Result<SegPrediction, ModelError> {
        let cond = self.condition(query_features, query_mask, text_token)?;
        Ok(predict_mask_with_cache(target_features, &cond.vector, &self.segmenter, mask_threshold)?.0)
    }

    /// Loss of one sample and its gradients accumulated into `grads`.
    ///
    /// The scalar objective is
    /// `mask_scale * L_mask + xobj_weight * xobj_scale * dist(e_query, e_target)`.
    /// Backbone gradients are only produced when `trace` is given.
    pub fn accumulate_gradients(
        &self,
        inputs: &SampleInputs<'_>,
        settings: &LossSettings,
        grads: &mut Model,
        trace: Option<BackboneTrace<'_>>,
    ) -> Result<SampleOutcome, ModelError> {
        let qdeep = inputs.query_features.deepest();
        let q_pool = pool_object(qdeep, inputs.query_mask)?;
        let visual = embed_pooled(&q_pool, &self.encoder);

        let text = if settings.enable_mcfuse {
            let token = inputs.text_token.ok_or(ModelError::MissingText)?;
            Some((token, self.text_embedding(token)?))
        } else {
            None
        };
        let fused = match &text {
            Some((_, t)) => fuse(&visual, t, &self.mcfuse)?,
            None => visual.clone(),
        };

        let (pred, cache) =
            predict_mask_with_cache(inputs.target_features, &fused.vector, &self.segmenter, 0.0)?;
        let (loss, mut dlogits, mut dvis) =
            mask_loss_with_grad(&pred, inputs.gt_mask, inputs.gt_visible)?;
        dlogits *= settings.mask_scale;
        dvis *= settings.mask_scale;
        let seg_grads = seg_backward(
            &cache,
            &dlogits,
            dvis,
            &self.segmenter,
            &mut grads.segmenter,
            inputs.target_features,
            trace.is_some(),
        );

        let mut dvisual = match &text {
            Some((token, t)) => {
                let fg = fuse_backward(&seg_grads.fused, &visual, t, &self.mcfuse)?;
                grads.mcfuse.text_projection += &fg.text_projection;
                grads.mcfuse.fusion_logit += fg.fusion_logit;
                encode_text_backward(*token, &fg.text, &mut grads.encoder);
                fg.visual
            }
            None => seg_grads.fused.clone(),
        };

        let mut embed_distance = None;
        let mut target_deep_grad = None;
        if let (Some(weight), true, Some(gt)) =
            (settings.xobj_weight, inputs.gt_visible, inputs.gt_mask)
        {
            self.instrumentation
                .target_embedding_calls
                .fetch_add(1, Ordering::Relaxed);
            let tdeep = inputs.target_features.deepest();
            let t_pool = pool_object(tdeep, gt)?;
            let target = embed_pooled(&t_pool, &self.encoder);
            let diff = &visual.vector - &target.vector;
            let dist = diff.dot(&diff).sqrt();
            embed_distance = Some(dist);
            let scale = weight * settings.xobj_scale;
            let gq = match settings.xobj_distance {
                DistanceKind::Euclidean if dist > 0.0 => diff * (scale / dist),
                DistanceKind::Euclidean => Array1::zeros(diff.len()),
                DistanceKind::SquaredEuclidean => diff * (2.0 * scale),
            };
            dvisual += &gq;
            let gt_grad = -gq;
            let dims = (tdeep.data.nrows(), tdeep.data.ncols());
            target_deep_grad = Some(embed_pooled_backward(
                &t_pool,
                &gt_grad,
                &self.encoder,
                &mut grads.encoder,
                dims,
            ));
        }
        let qdims = (qdeep.data.nrows(), qdeep.data.ncols());
        let query_deep_grad =
            embed_pooled_backward(&q_pool, &dvisual, &self.encoder, &mut grads.encoder, qdims);

        if let Some(trace) = trace {
            let zeros = |ms: &Multiscale, i: usize| {
                Array2::<f64>::zeros((ms.levels[i].data.nrows(), ms.levels[i].data.ncols()))
            };
            let q = inputs.query_features;
            Backbone::backward(
                &self.encoder.backbone,
                trace.query,
                [zeros(q, 0), zeros(q, 1), query_deep_grad],
                &mut grads.encoder.backbone,
            );
            let [g0, g1, mut g2] = seg_grads.levels.expect("feature grads requested");
            if let Some(t) = target_deep_grad {
                g2 += &t;
            }
            Backbone::backward(
                &self.encoder.backbone,
                trace.target,
                [g0, g1, g2],
                &mut grads.encoder.backbone,
            );
        }

        Ok(SampleOutcome {
            mask_loss: loss,
            embed_distance,
            fusion_weight: self.mcfuse.weight(),
        })
    }

    /// Scalar objective matching [`Model::accumulate_gradients`], recomputed
    /// from scratch (backbone included). Used by finite-difference checks.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        query_frame: &crate::nn::FeatureMap,
        target_frame: &crate::nn::FeatureMap,
        query_mask: &BinaryMask,
        gt_mask: Option<&BinaryMask>,
        gt_visible: bool,
        text_token: Option<usize>,
        settings: &LossSettings,
    ) -> Result<f64, ModelError> {
        let qf = self.encoder.backbone.forward(query_frame);
        let tf = self.encoder.backbone.forward(target_frame);
        let cond = self.condition(&qf, query_mask, text_token.filter(|_| settings.enable_mcfuse))?;
        let (pred, _) = predict_mask_with_cache(&tf, &cond.vector, &self.segmenter, 0.0)?;
        let (loss, _, _) = mask_loss_with_grad(&pred, gt_mask, gt_visible)?;
        let mut total = settings.mask_scale * loss.total();
        if let (Some(w), true, Some(gt)) = (settings.xobj_weight, gt_visible, gt_mask) {
            let q = self.query_embedding(&qf, query_mask)?;
            let t = embed_pooled(&pool_object(tf.deepest(), gt)?, &self.encoder);
            let d = (&q.vector - &t.vector).mapv(|v| v * v).sum();
            let dist = match settings.xobj_distance {
                DistanceKind::Euclidean => d.sqrt(),
                DistanceKind::SquaredEuclidean => d,
            };
            total += w * settings.xobj_scale * dist;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_registry_is_consistent() {
        let mut m = Model::init(ArchConfig::default(), 0);
        let names: Vec<String> = m.params().into_iter().map(|p| p.name).collect();
        let names_mut: Vec<String> = m.params_mut().into_iter().map(|p| p.name).collect();
        assert_eq!(names, names_mut);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let d = 64;
        let backbone = 27 * 16 + 16 + 144 * 32 + 32 + 288 * 64 + 64;
        assert_eq!(m.count_params(&[ParamGroup::Backbone]), backbone);
        assert_eq!(m.count_params(&[ParamGroup::ConditionHeads]), 64 * d + 32 * d);
        assert_eq!(m.count_params(&[ParamGroup::McFuse]), d * d + 1);
        assert_eq!(
            m.count_params(&[ParamGroup::Segmenter]),
            (16 + 32 + 64) * d + d + d + d * d + d + d + 1
        );
    }

    #[test]
    fn clone_resets_instrumentation() {
        let m = Model::init(ArchConfig::default(), 0);
        m.instrumentation
            .target_embedding_calls
            .fetch_add(3, Ordering::Relaxed);
        assert_eq!(m.clone().instrumentation.target_embedding_calls(), 0);
        assert_eq!(m.clone(), m);
    }
}

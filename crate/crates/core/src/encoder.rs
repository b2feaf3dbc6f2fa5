//! Condition encoder: a three-stage convolutional backbone producing
//! multiscale features, the mask-pooled visual object embedding, and the
//! category-token text embedding.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Frame;
use crate::mask::BinaryMask;
use crate::nn::{
    avg_pool2, avg_pool2_backward, col2im3, im2col3, leaky_relu, leaky_relu_grad, FeatureMap,
};
use crate::text::TextDescription;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("input pixel values must be finite and in [0, 1]")]
    BadInputRange,
    #[error("frame {0}x{1} must have both sides divisible by 8")]
    BadFrameSize(usize, usize),
    #[error("mask {0}x{1} does not match frame {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("object mask is empty")]
    EmptyMask,
    #[error("token {0} outside vocabulary of {1}")]
    UnknownToken(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Visual,
    Text,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub vector: Array1<f64>,
    pub branch: Branch,
}

/// 3x3 convolution stored as an im2col weight matrix `(9 * C_in, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv3x3 {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Array2::from_shape_simple_fn((9 * c_in, c_out), || normal.sample(rng)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// Three stages of conv3x3 -> leaky ReLU -> 2x2 average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: [Conv3x3; 3],
}

/// Features at 1/2, 1/4 and 1/8 resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiscale {
    pub levels: [FeatureMap; 3],
}

impl Multiscale {
    pub fn deepest(&self) -> &FeatureMap {
        &self.levels[2]
    }
}

#[derive(Debug, Clone)]
struct StageCache {
    cols: Array2<f64>,
    pre: Array2<f64>,
    in_height: usize,
    in_width: usize,
    in_channels: usize,
}

/// Intermediate values needed by [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct BackboneCache {
    stages: Vec<StageCache>,
}

impl BackboneCache {
    /// Smallest absolute pre-activation across all stages.
    pub fn kink_margin(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| s.pre.iter())
            .fold(f64::INFINITY, |m, &z| m.min(z.abs()))
    }
}

pub fn frame_to_features(frame: &Frame) -> Result<FeatureMap, EncoderError> {
    if !frame.height.is_multiple_of(8) || !frame.width.is_multiple_of(8) || frame.height == 0 || frame.width == 0 {
        return Err(EncoderError::BadFrameSize(frame.height, frame.width));
    }
    if frame.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(EncoderError::BadInputRange);
    }
    let data = Array2::from_shape_vec(
        (frame.height * frame.width, 3),
        frame.pixels.iter().map(|&v| v as f64).collect(),
    )
    .expect("frame buffer is h*w*3");
    Ok(FeatureMap::new(frame.height, frame.width, data))
}

impl Backbone {
    pub fn init(channels: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            stages: [
                Conv3x3::init(3, channels[0], rng),
                Conv3x3::init(channels[0], channels[1], rng),
                Conv3x3::init(channels[1], channels[2], rng),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: [
                self.stages[0].zeros_like(),
                self.stages[1].zeros_like(),
                self.stages[2].zeros_like(),
            ],
        }
    }

    fn run(&self, input: &FeatureMap, mut cache: Option<&mut BackboneCache>) -> Multiscale {
        let mut x = input.clone();
        let mut levels = Vec::with_capacity(3);
        for conv in &self.stages {
            let cols = im2col3(&x);
            let mut pre = cols.dot(&conv.weight);
            pre += &conv.bias;
            let act = FeatureMap::new(x.height, x.width, pre.mapv(leaky_relu));
            let pooled = avg_pool2(&act);
            if let Some(c) = cache.as_deref_mut() {
                c.stages.push(StageCache {
                    cols,
                    pre,
                    in_height: x.height,
                    in_width: x.width,
                    in_channels: x.channels(),
                });
            }
            levels.push(pooled.clone());
            x = pooled;
        }
        let [a, b, c]: [FeatureMap; 3] = levels.try_into().expect("three stages");
        Multiscale { levels: [a, b, c] }
    }

    pub fn forward(&self, input: &FeatureMap) -> Multiscale {
        self.run(input, None)
    }

    pub fn forward_with_cache(&self, input: &FeatureMap) -> (Multiscale, BackboneCache) {
        let mut cache = BackboneCache { stages: Vec::new() };
        let out = self.run(input, Some(&mut cache));
        (out, cache)
    }

    /// Accumulate parameter gradients into `grads` given gradients on each
    /// output level.
    pub fn backward(&self, cache: &BackboneCache, level_grads: [Array2<f64>; 3], grads: &mut Backbone) {
        let [g0, g1, g2] = level_grads;
        let mut incoming = [Some(g0), Some(g1), Some(g2)];
        let mut carry: Option<Array2<f64>> = None;
        for i in (0..3).rev() {
            let st = &cache.stages[i];
            let mut g = incoming[i].take().expect("level gradient");
            if let Some(c) = carry.take() {
                g += &c;
            }
            let (oh, ow) = (st.in_height / 2, st.in_width / 2);
            let mut dpre = avg_pool2_backward(&g, oh, ow);
            dpre.zip_mut_with(&st.pre, |d, &z| *d *= leaky_relu_grad(z));
            grads.stages[i].weight += &st.cols.t().dot(&dpre);
            grads.stages[i].bias += &dpre.sum_axis(Axis(0));
            if i > 0 {
                let dcols = dpre.dot(&self.stages[i].weight.t());
                carry = Some(col2im3(&dcols, st.in_height, st.in_width, st.in_channels));
            }
        }
    }

    /// Receptive field `(size, stride)` of one deepest-level cell, in input pixels.
    pub fn receptive_field() -> (usize, usize) {
        let (mut size, mut stride) = (1usize, 1usize);
        for _ in 0..3 {
            size += 2 * stride; // conv 3x3
            size += stride; // 2x2 pool
            stride *= 2;
        }
        (size, stride)
    }
}

pub fn encode_image(frame: &Frame, backbone: &Backbone) -> Result<Multiscale, EncoderError> {
    Ok(backbone.forward(&frame_to_features(frame)?))
}

/// Encoder parameters: backbone, mask-pool projection and text table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub backbone: Backbone,
    /// `(C_deep, d)`.
    pub pool_projection: Array2<f64>,
    /// `(vocab, d)`.
    pub text_table: Array2<f64>,
}

impl EncoderParams {
    pub fn init(channels: [usize; 3], embed_dim: usize, vocab: usize, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::init(channels, rng);
        let proj = Normal::new(0.0, (1.0 / channels[2] as f64).sqrt()).expect("valid std");
        let pool_projection =
            Array2::from_shape_simple_fn((channels[2], embed_dim), || proj.sample(rng));
        let text = Normal::new(0.0, (1.0 / embed_dim as f64).sqrt()).expect("valid std");
        let text_table = Array2::from_shape_simple_fn((vocab, embed_dim), || text.sample(rng));
        Self {
            backbone,
            pool_projection,
            text_table,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            pool_projection: Array2::zeros(self.pool_projection.raw_dim()),
            text_table: Array2::zeros(self.text_table.raw_dim()),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.pool_projection.ncols()
    }
}

/// Mask footprint on the deepest level and the mean feature over it.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledObject {
    pub cells: Vec<usize>,
    pub pooled: Array1<f64>,
}

/// Average deepest-level features over the max-pooled mask footprint; an
/// empty footprint falls back to the whole map.
pub fn pool_object(deep: &FeatureMap, mask: &BinaryMask) -> Result<PooledObject, EncoderError> {
    if mask.is_empty() {
        return Err(EncoderError::EmptyMask);
    }
    let factor = mask.height() / deep.height;
    if factor == 0 || deep.height * factor != mask.height() || deep.width * factor != mask.width() {
        return Err(EncoderError::DimensionMismatch(
            mask.height(),
            mask.width(),
            deep.height * factor.max(1),
            deep.width * factor.max(1),
        ));
    }
    let footprint = mask.downsample_any(factor);
    let mut cells: Vec<usize> = footprint.pixels().map(|(r, c)| r * deep.width + c).collect();
    if cells.is_empty() {
        cells = (0..deep.height * deep.width).collect();
    }
    let mut pooled = Array1::<f64>::zeros(deep.channels());
    for &i in &cells {
        pooled += &deep.data.row(i);
    }
    pooled /= cells.len() as f64;
    Ok(PooledObject { cells, pooled })
}

/// Visual embedding from precomputed image features.
pub fn embed_pooled(pooled: &PooledObject, params: &EncoderParams) -> ConditionEmbedding {
    ConditionEmbedding {
        vector: pooled.pooled.dot(&params.pool_projection),
        branch: Branch::Visual,
    }
}

pub fn encode_object(
    frame: &Frame,
    mask: &BinaryMask,
    params: &EncoderParams,
) -> Result<ConditionEmbedding, EncoderError> {
    if mask.height() != frame.height || mask.width() != frame.width {
        return Err(EncoderError::DimensionMismatch(
            mask.height(),
            mask.width(),
            frame.height,
            frame.width,
        ));
    }
    let features = encode_image(frame, &params.backbone)?;
    Ok(embed_pooled(&pool_object(features.deepest(), mask)?, params))
}

/// Gradients of a visual embedding: accumulates into the projection and
/// returns the gradient on the deepest feature map.
pub fn embed_pooled_backward(
    pooled: &PooledObject,
    grad_embedding: &Array1<f64>,
    params: &EncoderParams,
    grads: &mut EncoderParams,
    deep_shape: (usize, usize),
) -> Array2<f64> {
    let outer = pooled
        .pooled
        .view()
        .insert_axis(Axis(1))
        .dot(&grad_embedding.view().insert_axis(Axis(0)));
    grads.pool_projection += &outer;
    let dpooled = params.pool_projection.dot(grad_embedding) / pooled.cells.len() as f64;
    let mut ddeep = Array2::<f64>::zeros(deep_shape);
    for &i in &pooled.cells {
        ddeep.row_mut(i).assign(&dpooled);
    }
    ddeep
}

pub fn encode_text(
    desc: &TextDescription,
    params: &EncoderParams,
) -> Result<ConditionEmbedding, EncoderError> {
    let vocab = params.text_table.nrows();
    if desc.token_id >= vocab {
        return Err(EncoderError::UnknownToken(desc.token_id, vocab));
    }
    Ok(ConditionEmbedding {
        vector: params.text_table.row(desc.token_id).to_owned(),
        branch: Branch::Text,
    })
}

pub fn encode_text_backward(token_id: usize, grad: &Array1<f64>, grads: &mut EncoderParams) {
    let mut row = grads.text_table.row_mut(token_id);
    row += grad;
}

//! Multimodal condition fusion: the visual embedding is the primary branch
//! and the projected text embedding joins through a residual gated by a
//! learnable scalar, `fused = visual + sigmoid(logit) * (P · text)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoder::{Branch, ConditionEmbedding};
use crate::nn::sigmoid;

/// Initial fusion logit; `sigmoid(-2) ≈ 0.12` keeps the visual branch dominant.
pub const INITIAL_FUSION_LOGIT: f64 = -2.0;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("dimension mismatch: {what} has length {got}, expected {expected}")]
pub struct DimensionMismatch {
    pub what: &'static str,
    pub got: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McFuseParams {
    /// `(d, d)`, applied as `P · text`.
    pub text_projection: Array2<f64>,
    pub fusion_logit: f64,
}

impl McFuseParams {
    pub fn init(embed_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / embed_dim as f64).sqrt()).expect("valid std");
        Self {
            text_projection: Array2::from_shape_simple_fn((embed_dim, embed_dim), || {
                normal.sample(rng)
            }),
            fusion_logit: INITIAL_FUSION_LOGIT,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            text_projection: Array2::zeros(self.text_projection.raw_dim()),
            fusion_logit: 0.0,
        }
    }

    /// Fusion weight `w = sigmoid(fusion_logit)`.
    pub fn weight(&self) -> f64 {
        sigmoid(self.fusion_logit)
    }

    fn check(&self, visual: &Array1<f64>, text: &Array1<f64>) -> Result<(), DimensionMismatch> {
        let d = self.text_projection.nrows();
        for (what, v) in [("visual", visual), ("text", text)] {
            if v.len() != d {
                return Err(DimensionMismatch {
                    what,
                    got: v.len(),
                    expected: d,
                });
            }
        }
        Ok(())
    }
}

pub fn fuse(
    visual: &ConditionEmbedding,
    text: &ConditionEmbedding,
    params: &McFuseParams,
) -> Result<ConditionEmbedding, DimensionMismatch> {
    params.check(&visual.vector, &text.vector)?;
    let projected = params.text_projection.dot(&text.vector);
    let mut vector = visual.vector.clone();
    vector.scaled_add(params.weight(), &projected);
    Ok(ConditionEmbedding {
        vector,
        branch: Branch::Fused,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseGrads {
    pub visual: Array1<f64>,
    pub text: Array1<f64>,
    pub text_projection: Array2<f64>,
    pub fusion_logit: f64,
}

pub fn fuse_backward(
    grad_out: &Array1<f64>,
    visual: &ConditionEmbedding,
    text: &ConditionEmbedding,
    params: &McFuseParams,
) -> Result<FuseGrads, DimensionMismatch> {
    params.check(&visual.vector, &text.vector)?;
    if grad_out.len() != visual.vector.len() {
        return Err(DimensionMismatch {
            what: "grad_out",
            got: grad_out.len(),
            expected: visual.vector.len(),
        });
    }
    let w = params.weight();
    let projected = params.text_projection.dot(&text.vector);
    let text_projection = grad_out
        .view()
        .insert_axis(Axis(1))
        .dot(&text.vector.view().insert_axis(Axis(0)))
        * w;
    Ok(FuseGrads {
        visual: grad_out.clone(),
        text: params.text_projection.t().dot(grad_out) * w,
        text_projection,
        fusion_logit: w * (1.0 - w) * grad_out.dot(&projected),
    })
}

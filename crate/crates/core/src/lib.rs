//! Cross-view object correspondence at desk scale.
//!
//! Given an object mask in one view of a synchronized ego/exo frame pair,
//! predict the same object's mask and visibility in the other view. The
//! model conditions a pixel decoder on a fused visual+text object embedding
//! and is trained with an additional cross-view embedding alignment loss.

pub mod annotation;
pub mod dataset;
pub mod mask;
pub mod metrics;
pub mod encoder;
pub mod mcfuse;
pub mod model;
pub mod nn;
pub mod segmenter;
pub mod text;
pub mod xobjalign;
pub mod optim;
pub mod training;
pub mod checkpoint;
pub mod cli;

//! Analytic gradients against central finite differences (h = 1e-4).
mod common;

use common::gradcheck::*;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xview_core::mask::BinaryMask;
use xview_core::model::Model;
use xview_core::segmenter::{mask_loss, SegPrediction};
use xview_core::xobjalign::{xobj_loss, AlignmentBatch, DistanceKind};

fn assert_ok(o: Outcome) {
    assert!(o.ok(), "{}\n{}", o.summary(), o.failures.join("\n"));
}

#[test]
fn mcfuse_gradients_match_finite_differences() {
    assert_ok(mcfuse());
}

#[test]
fn xobjalign_gradients_match_finite_differences() {
    assert_ok(xobjalign());
}

#[test]
fn mask_loss_gradients_match_finite_differences() {
    assert_ok(mask_loss_grads());
}

#[test]
fn text_embedding_row_gradient() {
    assert_ok(text_embedding());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let t = toy(1);
    let o = full_model(&t, &settings(true, true), true);
    assert_eq!(o.checked, t.model.total_params());
    assert_ok(o);
}

#[test]
fn invisible_target_gradients_match_finite_differences() {
    assert_ok(full_model(&toy(2), &settings(true, true), false));
}

#[test]
fn visual_only_gradients_match_finite_differences() {
    assert_ok(full_model(&toy(3), &settings(false, false), true));
}

#[test]
fn xobj_loss_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = || ndarray::Array2::from_shape_simple_fn((16, 8), || rng.gen_range(-1.0f64..1.0));
    let (q, t) = (m(), m());
    let mut total = 0.0;
    for r in 0..16 {
        let mut s = 0.0;
        for c in 0..8 {
            s += (q[[r, c]] - t[[r, c]]).powi(2);
        }
        total += s.sqrt();
    }
    let got = xobj_loss(&AlignmentBatch::new(q, t).unwrap(), DistanceKind::Euclidean);
    assert!((got - total / 16.0).abs() < 1e-9);
}

#[test]
fn mask_loss_matches_scripted_oracle() {
    let logits = Array1::from_shape_fn(16, |i| (i as f64 * 0.37).sin() * 2.0);
    let vis = 0.37;
    let gt = BinaryMask::from_fn(4, 4, |r, c| (r + c) % 3 == 0);
    // Naive per-pixel formulas.
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (mut bce, mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..16 {
        let y = if gt.bits()[i] { 1.0 } else { 0.0 };
        let p = sig(logits[i]);
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        inter += p * y;
        psum += p;
        ysum += y;
    }
    let dice = 1.0 - (2.0 * inter + 1.0) / (psum + ysum + 1.0);
    let expected = bce / 16.0 + dice - sig(vis).ln();
    let pred = SegPrediction {
        mask_logits: logits,
        logits_height: 4,
        logits_width: 4,
        visibility_logit: vis,
        upsampled_mask: BinaryMask::empty(8, 8),
    };
    let got = mask_loss(&pred, Some(&gt), true).unwrap().total();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn every_parameter_receives_gradient() {
    // Accumulate over a small batch with visible and invisible targets.
    let mut total: Option<Model> = None;
    for seed in 10..14 {
        let g = analytic(&toy(seed), &settings(true, true), seed % 2 == 0);
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => acc.add_scaled(&g, 1.0),
        }
    }
    for p in total.unwrap().params() {
        if p.name == "encoder.text_table" {
            continue; // only the looked-up rows are reachable
        }
        assert!(p.data.iter().any(|&v| v != 0.0), "{} has an all-zero gradient", p.name);
    }
}

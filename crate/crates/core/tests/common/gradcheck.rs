//! Analytic gradients against central finite differences (h = 1e-4).
//! Each check returns the list of mismatching entries.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xview_core::encoder::{Branch, ConditionEmbedding};
use xview_core::mask::BinaryMask;
use xview_core::mcfuse::{fuse, fuse_backward, McFuseParams};
use xview_core::model::{ArchConfig, BackboneTrace, LossSettings, Model, SampleInputs};
use xview_core::nn::FeatureMap;
use xview_core::segmenter::{mask_loss, mask_loss_with_grad, SegPrediction};
use xview_core::xobjalign::{xobj_loss, xobj_loss_backward, AlignmentBatch, DistanceKind};

pub const H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Below this absolute difference a gradient entry counts as matching; it
/// sits above the O(h^2) truncation error of near-zero gradients.
pub const ABS_FLOOR: f64 = 1e-8;
/// Pairs closer than this are skipped by the alignment check: the Euclidean
/// distance is not differentiable at zero.
pub const XOBJ_EXCLUSION: f64 = 1e-2;

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

pub fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0))
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
}

#[derive(Default)]
pub struct Outcome {
    pub checked: usize,
    pub failures: Vec<String>,
}

impl Outcome {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        if !close(analytic, numeric) {
            self.failures.push(format!("{}: analytic {analytic:e} numeric {numeric:e}", what()));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{} entries, {} mismatches{}",
            self.checked,
            self.failures.len(),
            self.failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        )
    }
}

/// Fusion output contracted with a random probe, d = 8.
pub fn mcfuse() -> Outcome {
    let d = 8;
    let mut out = Outcome::default();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = rand_vec(&mut rng, d);
        let text = rand_vec(&mut rng, d);
        let params = McFuseParams {
            text_projection: rand_mat(&mut rng, d, d),
            fusion_logit: rng.gen_range(-2.0..2.0),
        };
        let probe = rand_vec(&mut rng, d);
        let emb = |v: &Array1<f64>, b| ConditionEmbedding { vector: v.clone(), branch: b };
        let loss = |v: &Array1<f64>, t: &Array1<f64>, p: &McFuseParams| {
            fuse(&emb(v, Branch::Visual), &emb(t, Branch::Text), p).unwrap().vector.dot(&probe)
        };
        let g = fuse_backward(&probe, &emb(&visual, Branch::Visual), &emb(&text, Branch::Text), &params)
            .unwrap();
        for i in 0..d {
            let n = central(|x| { let mut v = visual.clone(); v[i] = x; loss(&v, &text, &params) }, visual[i]);
            out.record(|| format!("visual[{i}]"), g.visual[i], n);
            let n = central(|x| { let mut t = text.clone(); t[i] = x; loss(&visual, &t, &params) }, text[i]);
            out.record(|| format!("text[{i}]"), g.text[i], n);
            for j in 0..d {
                let n = central(
                    |x| {
                        let mut p = params.clone();
                        p.text_projection[[i, j]] = x;
                        loss(&visual, &text, &p)
                    },
                    params.text_projection[[i, j]],
                );
                out.record(|| format!("text_projection[{i},{j}]"), g.text_projection[[i, j]], n);
            }
        }
        let n = central(
            |x| loss(&visual, &text, &McFuseParams { fusion_logit: x, ..params.clone() }),
            params.fusion_logit,
        );
        out.record(|| "fusion_logit".into(), g.fusion_logit, n);
    }
    out
}

/// Alignment loss over a (16, 8) batch, both distance kinds, with one
/// near-coincident pair planted in the exclusion zone.
pub fn xobjalign() -> Outcome {
    let (b, d) = (16, 8);
    let mut out = Outcome::default();
    for kind in [DistanceKind::Euclidean, DistanceKind::SquaredEuclidean] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_mat(&mut rng, b, d);
        let mut t = rand_mat(&mut rng, b, d);
        for c in 0..d {
            t[[3, c]] = q[[3, c]] + 1e-4;
        }
        let batch = AlignmentBatch::new(q.clone(), t.clone()).unwrap();
        let dists = batch.distances();
        let (gq, gt) = xobj_loss_backward(&batch, kind);
        for r in 0..b {
            if kind == DistanceKind::Euclidean && dists[r] <= XOBJ_EXCLUSION {
                continue;
            }
            for c in 0..d {
                let nq = central(
                    |x| {
                        let mut qq = q.clone();
                        qq[[r, c]] = x;
                        xobj_loss(&AlignmentBatch::new(qq, t.clone()).unwrap(), kind)
                    },
                    q[[r, c]],
                );
                let nt = central(
                    |x| {
                        let mut tt = t.clone();
                        tt[[r, c]] = x;
                        xobj_loss(&AlignmentBatch::new(q.clone(), tt).unwrap(), kind)
                    },
                    t[[r, c]],
                );
                out.record(|| format!("{kind:?} q[{r},{c}]"), gq[[r, c]], nq);
                out.record(|| format!("{kind:?} t[{r},{c}]"), gt[[r, c]], nt);
            }
        }
    }
    out
}

fn prediction(logits: Array1<f64>, side: usize, vis: f64) -> SegPrediction {
    SegPrediction {
        mask_logits: logits,
        logits_height: side,
        logits_width: side,
        visibility_logit: vis,
        upsampled_mask: BinaryMask::empty(2 * side, 2 * side),
    }
}

/// Mask loss (BCE + Dice + visibility) on 8x8 logits, visible and invisible targets.
pub fn mask_loss_grads() -> Outcome {
    let side = 8;
    let mut out = Outcome::default();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_vec(&mut rng, side * side) * 3.0;
        let vis = rng.gen_range(-2.0..2.0);
        let gt = BinaryMask::from_fn(side, side, |_, _| rng.gen_bool(0.4));
        for visible in [true, false] {
            let gt_ref = visible.then_some(&gt);
            let (_, g, gv) =
                mask_loss_with_grad(&prediction(logits.clone(), side, vis), gt_ref, visible).unwrap();
            for i in 0..side * side {
                let n = central(
                    |x| {
                        let mut l = logits.clone();
                        l[i] = x;
                        mask_loss(&prediction(l, side, vis), gt_ref, visible).unwrap().total()
                    },
                    logits[i],
                );
                out.record(|| format!("logit[{i}] visible={visible}"), g[i], n);
            }
            let n = central(
                |x| mask_loss(&prediction(logits.clone(), side, x), gt_ref, visible).unwrap().total(),
                vis,
            );
            out.record(|| format!("visibility visible={visible}"), gv, n);
        }
    }
    out
}

pub struct Toy {
    pub model: Model,
    pub query: FeatureMap,
    pub target: FeatureMap,
    pub query_mask: BinaryMask,
    pub gt_mask: BinaryMask,
    pub token: usize,
}

/// d = 8 model on 16x16 inputs (8x8 mask logits).
pub fn toy(seed: u64) -> Toy {
    let arch = ArchConfig {
        embed_dim: 8,
        channels: [4, 5, 6],
        vocab_size: 32,
    };
    let mut model = Model::init(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Nonzero biases so every bias has a non-trivial gradient path.
    for st in model.encoder.backbone.stages.iter_mut() {
        st.bias.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
    model.mcfuse.fusion_logit = 0.3;
    let frame = |rng: &mut ChaCha8Rng| {
        FeatureMap::new(16, 16, Array2::from_shape_simple_fn((256, 3), || rng.gen_range(0.0..1.0)))
    };
    // Resample inputs until no leaky-ReLU unit sits within reach of its kink,
    // where a central difference would straddle two slopes.
    let (query, target) = loop {
        let q = frame(&mut rng);
        let t = frame(&mut rng);
        let margin = |f: &FeatureMap| model.encoder.backbone.forward_with_cache(f).1.kink_margin();
        if margin(&q).min(margin(&t)) > 3e-4 {
            break (q, t);
        }
    };
    let query_mask = BinaryMask::from_fn(16, 16, |r, c| (3..9).contains(&r) && (2..7).contains(&c));
    let gt_mask = BinaryMask::from_fn(16, 16, |r, c| (8..14).contains(&r) && (6..13).contains(&c));
    Toy {
        model,
        query,
        target,
        query_mask,
        gt_mask,
        token: 5,
    }
}

pub fn settings(mcfuse: bool, xobj: bool) -> LossSettings {
    LossSettings {
        enable_mcfuse: mcfuse,
        xobj_weight: xobj.then_some(1.0),
        xobj_distance: DistanceKind::Euclidean,
        mask_scale: 1.0,
        xobj_scale: 1.0,
    }
}

pub fn analytic(toy: &Toy, s: &LossSettings, visible: bool) -> Model {
    let m = &toy.model;
    let (qf, qc) = m.encoder.backbone.forward_with_cache(&toy.query);
    let (tf, tc) = m.encoder.backbone.forward_with_cache(&toy.target);
    let mut grads = m.zeros_like();
    m.accumulate_gradients(
        &SampleInputs {
            query_features: &qf,
            query_mask: &toy.query_mask,
            target_features: &tf,
            gt_mask: visible.then_some(&toy.gt_mask),
            gt_visible: visible,
            text_token: Some(toy.token),
        },
        s,
        &mut grads,
        Some(BackboneTrace { query: &qc, target: &tc }),
    )
    .unwrap();
    grads
}

pub fn objective(toy: &Toy, model: &Model, s: &LossSettings, visible: bool) -> f64 {
    model
        .objective(
            &toy.query,
            &toy.target,
            &toy.query_mask,
            visible.then_some(&toy.gt_mask),
            visible,
            Some(toy.token),
            s,
        )
        .unwrap()
}

/// Every scalar of every parameter tensor, through the whole model.
pub fn full_model(toy: &Toy, s: &LossSettings, visible: bool) -> Outcome {
    full_model_filtered(toy, s, visible, |_| true)
}

pub fn full_model_filtered(
    toy: &Toy,
    s: &LossSettings,
    visible: bool,
    keep: impl Fn(&str) -> bool,
) -> Outcome {
    let grads = analytic(toy, s, visible);
    let grad_views = grads.params();
    let mut out = Outcome::default();
    let names: Vec<String> = toy.model.params().into_iter().map(|p| p.name).collect();
    for (pi, name) in names.iter().enumerate() {
        if !keep(name) {
            continue;
        }
        for k in 0..grad_views[pi].data.len() {
            let mut probe = toy.model.clone();
            let base = probe.params()[pi].data[k];
            let num = central(
                |x| {
                    probe.params_mut()[pi].data[k] = x;
                    objective(toy, &probe, s, visible)
                },
                base,
            );
            out.record(|| format!("{name}[{k}]"), grad_views[pi].data[k], num);
        }
    }
    out
}

/// The looked-up text-table row gets the finite-difference gradient and
/// every other row gets exactly zero.
pub fn text_embedding() -> Outcome {
    let t = toy(4);
    let s = settings(true, false);
    let grads = analytic(&t, &s, true);
    let mut out = Outcome::default();
    for tok in 0..32 {
        if tok != t.token && grads.encoder.text_table.row(tok).iter().any(|&v| v != 0.0) {
            out.failures.push(format!("row {tok} received a gradient"));
        }
    }
    let row = grads.encoder.text_table.row(t.token);
    for j in 0..8 {
        let mut probe = t.model.clone();
        let num = central(
            |x| {
                probe.encoder.text_table[[t.token, j]] = x;
                objective(&t, &probe, &s, true)
            },
            t.model.encoder.text_table[[t.token, j]],
        );
        out.record(|| format!("text_table[{},{j}]", t.token), row[j], num);
    }
    out
}

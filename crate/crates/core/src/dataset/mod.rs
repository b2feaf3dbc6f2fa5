//! Synthetic synchronized ego/exo pairs with exact ground truth.
//!
//! A scene is a flat-textured world of categorized objects plus distractor
//! clutter. The exo frame rasterizes the whole canvas; the ego frame is a
//! rotated, anisotropically zoomed crop centered on the camera wearer. Every
//! queried object yields up to two samples, one per direction.

mod render;
pub mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;

pub use render::{
    category_color, EgoWarp, Frame, RenderedView, Shape, ShapeKind, View, World,
    CATEGORY_NAMES, VOCAB_SIZE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown direction {0:?}")]
    UnknownDirection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Cooking,
    BikeRepair,
    Health,
    Music,
    Basketball,
    Soccer,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Cooking,
        Scenario::BikeRepair,
        Scenario::Health,
        Scenario::Music,
        Scenario::Basketball,
        Scenario::Soccer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Cooking => "cooking",
            Scenario::BikeRepair => "bike_repair",
            Scenario::Health => "health",
            Scenario::Music => "music",
            Scenario::Basketball => "basketball",
            Scenario::Soccer => "soccer",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| DatasetError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ego2Exo,
    Exo2Ego,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Ego2Exo, Direction::Exo2Ego];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Ego2Exo => "ego2exo",
            Direction::Exo2Ego => "exo2ego",
        }
    }

    pub fn query_view(self) -> View {
        match self {
            Direction::Ego2Exo => View::Ego,
            Direction::Exo2Ego => View::Exo,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::BOTH
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| DatasetError::UnknownDirection(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    /// `(height, width)` of both views.
    pub canvas: (usize, usize),
    pub clutter_density: f64,
    /// Ego zoom factor relative to the exo view.
    pub scale_ratio: f64,
    pub occlusion_rate: f64,
    pub scenario: Scenario,
}

impl SceneSpec {
    /// Difficulty preset for a scenario on a 64x64 canvas.
    pub fn preset(scenario: Scenario, seed: u64) -> Self {
        let (n_objects, clutter_density, scale_ratio, occlusion_rate) = match scenario {
            Scenario::Cooking => (4, 0.8, 2.5, 0.15),
            Scenario::BikeRepair => (3, 0.6, 3.0, 0.2),
            Scenario::Health => (3, 0.3, 2.0, 0.1),
            Scenario::Music => (2, 0.2, 2.0, 0.1),
            Scenario::Basketball => (3, 0.4, 3.5, 0.1),
            Scenario::Soccer => (2, 0.5, 4.0, 0.15),
        };
        Self {
            seed,
            n_objects,
            canvas: (64, 64),
            clutter_density,
            scale_ratio,
            occlusion_rate,
            scenario,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if self.n_objects == 0 || self.n_objects > VOCAB_SIZE {
            return bad("n_objects must be in 1..=32");
        }
        if self.canvas.0 < 16 || self.canvas.1 < 16 {
            return bad("canvas must be at least 16x16");
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return bad("clutter_density must be in [0, 1]");
        }
        if !(self.scale_ratio > 1.0) || !self.scale_ratio.is_finite() {
            return bad("scale_ratio must be > 1");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must be in [0, 1]");
        }
        Ok(())
    }
}

/// One query/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSample {
    /// Unique within a generated set, e.g. `s7_o2_ego2exo`.
    pub id: String,
    pub query_frame: Arc<Frame>,
    pub target_frame: Arc<Frame>,
    pub query_mask: BinaryMask,
    pub gt_target_mask: Option<BinaryMask>,
    pub gt_visible: bool,
    pub category: usize,
    pub scenario: Scenario,
    pub direction: Direction,
}

/// A generated scene: world description, both rendered views, and samples.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub world: World,
    pub ego: Arc<RenderedView>,
    pub exo: Arc<RenderedView>,
}

const PLACEMENT_TRIES: usize = 64;

impl Scene {
    pub fn build(spec: &SceneSpec) -> Result<Self, DatasetError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5CE7_E5EE_D000_0001);
        let (h, w) = spec.canvas;
        let aniso = rng.gen_range(0.9..1.1);
        let warp_scale = (spec.scale_ratio / aniso, spec.scale_ratio * aniso);
        let angle = rng.gen_range(-0.5..0.5);
        let mut warp = EgoWarp {
            world_center: (0.0, 0.0),
            angle,
            scale_rows: warp_scale.0,
            scale_cols: warp_scale.1,
            ego_size: (h, w),
        };
        let fov = warp.inscribed_radius();
        let margin_y = (fov * 1.2).min(h as f64 / 2.0);
        let margin_x = (fov * 1.2).min(w as f64 / 2.0);
        warp.world_center = (
            rng.gen_range(margin_y..=(h as f64 - margin_y)),
            rng.gen_range(margin_x..=(w as f64 - margin_x)),
        );

        let mut world = World {
            canvas: spec.canvas,
            warp,
            background: {
                let g = rng.gen_range(0.25..0.45) as f32;
                [g, g * 1.05, g * 0.95]
            },
            texture_amplitude: (0.35 * spec.clutter_density) as f32,
            texture_seed: rng.gen(),
            clutter: Vec::new(),
            objects: Vec::new(),
            categories: Vec::new(),
            occlusion: Vec::new(),
        };

        let n_clutter = (spec.clutter_density * 14.0).round() as usize;
        for _ in 0..n_clutter {
            let center = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let radius = rng.gen_range(1.5..5.0);
            let cat = rng.gen_range(0..VOCAB_SIZE);
            let jitter: [f64; 4] = rng.gen();
            world.clutter.push(Shape::new(center, radius, cat, jitter));
        }

        let mut categories: Vec<usize> = (0..VOCAB_SIZE).collect();
        categories.shuffle(&mut rng);
        categories.truncate(spec.n_objects);
        let (r_min, r_max) = (0.16 * fov, 0.32 * fov);
        for &cat in &categories {
            let mut placed = None;
            for attempt in 0..PLACEMENT_TRIES {
                let radius = rng.gen_range(r_min..r_max);
                let jitter: [f64; 4] = rng.gen();
                let extent = Shape::new((0.0, 0.0), radius, cat, jitter).extent();
                let reach = fov - extent - 1.0;
                let rho = reach.max(0.0) * rng.gen::<f64>().sqrt();
                let phi = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                if reach < 0.0 {
                    continue;
                }
                let center = (
                    world.warp.world_center.0 + rho * phi.sin(),
                    world.warp.world_center.1 + rho * phi.cos(),
                );
                let shape = Shape::new(center, radius, cat, jitter);
                let apart = world.objects.iter().all(|o| {
                    let d = ((o.center.0 - center.0).powi(2) + (o.center.1 - center.1).powi(2))
                        .sqrt();
                    d > o.extent() + shape.extent() + 0.5
                });
                if !apart && attempt + 1 < PLACEMENT_TRIES {
                    continue;
                }
                world.objects.push(shape);
                let k = world.objects.len() - 1;
                let big_enough = [View::Ego, View::Exo]
                    .into_iter()
                    .all(|v| world.render_object_alone(v, k).area() >= 2);
                world.objects.pop();
                if big_enough {
                    placed = Some(shape);
                    break;
                }
            }
            if let Some(shape) = placed {
                world.objects.push(shape);
                world.categories.push(cat);
            }
        }
        if world.objects.is_empty() {
            return Err(DatasetError::InvalidSpec(
                "could not place any object; canvas too small for scale_ratio".into(),
            ));
        }
        world.occlusion = (0..world.objects.len())
            .map(|_| {
                if rng.gen::<f64>() < spec.occlusion_rate {
                    Some(if rng.gen::<bool>() { View::Ego } else { View::Exo })
                } else {
                    None
                }
            })
            .collect();

        let ego = Arc::new(world.render(View::Ego));
        let exo = Arc::new(world.render(View::Exo));
        Ok(Self {
            spec: spec.clone(),
            world,
            ego,
            exo,
        })
    }

    pub fn view(&self, view: View) -> &Arc<RenderedView> {
        match view {
            View::Ego => &self.ego,
            View::Exo => &self.exo,
        }
    }

    pub fn samples(&self) -> Vec<CorrespondenceSample> {
        let ego_frame = Arc::new(self.ego.frame.clone());
        let exo_frame = Arc::new(self.exo.frame.clone());
        let frame_of = |v: View| match v {
            View::Ego => ego_frame.clone(),
            View::Exo => exo_frame.clone(),
        };
        let mut out = Vec::new();
        for (k, &category) in self.world.categories.iter().enumerate() {
            for direction in Direction::BOTH {
                let qv = direction.query_view();
                let tv = match qv {
                    View::Ego => View::Exo,
                    View::Exo => View::Ego,
                };
                let query_mask = self.view(qv).object_masks[k].clone();
                if query_mask.is_empty() {
                    continue;
                }
                let target = &self.view(tv).object_masks[k];
                let gt_visible = !target.is_empty();
                out.push(CorrespondenceSample {
                    id: format!("s{}_o{}_{}", self.spec.seed, k, direction),
                    query_frame: frame_of(qv),
                    target_frame: frame_of(tv),
                    query_mask,
                    gt_target_mask: gt_visible.then(|| target.clone()),
                    gt_visible,
                    category,
                    scenario: self.spec.scenario,
                    direction,
                });
            }
        }
        out
    }
}

/// Render a scene and emit its samples in both directions.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<CorrespondenceSample>, DatasetError> {
    Ok(Scene::build(spec)?.samples())
}

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Seed-deterministic partition into train/val/test, stratified by scenario.
///
/// Split sizes are the largest-remainder apportionment of the total; each
/// scenario contributes `floor(f * n)` or one more to every split.
pub fn split<T: Clone>(
    samples: &[T],
    scenario_of: impl Fn(&T) -> Scenario,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DatasetError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::InvalidFractions(format!("{fractions:?}")));
    }
    let mut groups: BTreeMap<Scenario, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(scenario_of(s)).or_default().push(i);
    }
    let targets = apportion(samples.len(), &fractions);
    let mut base: Vec<[usize; 3]> = Vec::new();
    let mut need = targets.clone();
    for idx in groups.values() {
        let n = idx.len() as f64;
        let b = [0, 1, 2].map(|s| (fractions[s] * n + 1e-9).floor() as usize);
        for s in 0..3 {
            need[s] = need[s].saturating_sub(b[s]);
        }
        base.push(b);
    }
    let mut result: (Vec<T>, Vec<T>, Vec<T>) = (Vec::new(), Vec::new(), Vec::new());
    for ((scenario, idx), mut counts) in groups.iter().zip(base) {
        let extra = idx.len() - counts.iter().sum::<usize>();
        // At most one leftover item per split, to the splits that still need the most.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let frac = |s: usize| fractions[s] * idx.len() as f64 - counts[s] as f64;
            need[b].cmp(&need[a]).then(frac(b).total_cmp(&frac(a))).then(a.cmp(&b))
        });
        for &s in order.iter().take(extra) {
            counts[s] += 1;
            need[s] = need[s].saturating_sub(1);
        }
        let mut order = idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (*scenario as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        let (a, rest) = order.split_at(counts[0]);
        let (b, c) = rest.split_at(counts[1]);
        result.0.extend(a.iter().map(|&i| samples[i].clone()));
        result.1.extend(b.iter().map(|&i| samples[i].clone()));
        result.2.extend(c.iter().map(|&i| samples[i].clone()));
    }
    Ok(result)
}

/// Seeds of the scenes in a generated collection: scene `i` uses scenario
/// `ALL[i % 6]` and seed `base * 1_000_003 + i`.
pub fn scene_specs(base_seed: u64, n_scenes: usize, canvas: (usize, usize)) -> Vec<SceneSpec> {
    (0..n_scenes)
        .map(|i| {
            let mut spec = SceneSpec::preset(
                Scenario::ALL[i % Scenario::ALL.len()],
                base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            );
            spec.canvas = canvas;
            spec
        })
        .collect()
}

/// Generate scenes until at least `n_samples` samples exist, then truncate.
pub fn generate_samples(
    base_seed: u64,
    n_samples: usize,
    canvas: (usize, usize),
) -> Result<Vec<CorrespondenceSample>, DatasetError> {
    let mut out = Vec::with_capacity(n_samples + 8);
    let mut i = 0usize;
    while out.len() < n_samples {
        let mut spec = SceneSpec::preset(
            Scenario::ALL[i % Scenario::ALL.len()],
            base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        );
        spec.canvas = canvas;
        out.extend(generate_scene(&spec)?);
        i += 1;
    }
    out.truncate(n_samples);
    Ok(out)
}

/// Train and validation sets from disjoint scene streams.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<CorrespondenceSample>,
    pub val: Vec<CorrespondenceSample>,
}

impl Benchmark {
    pub fn generate(
        seed: u64,
        n_train: usize,
        n_val: usize,
        canvas: (usize, usize),
    ) -> Result<Self, DatasetError> {
        Ok(Self {
            train: generate_samples(seed.wrapping_mul(2), n_train, canvas)?,
            val: generate_samples(seed.wrapping_mul(2).wrapping_add(1), n_val, canvas)?,
        })
    }
}

//! Two-stage training, evaluation and the four-way ablation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Benchmark, CorrespondenceSample, DatasetError, Direction, Frame};
use crate::encoder::{frame_to_features, Backbone, EncoderError, Multiscale};
use crate::metrics::{final_score, MetricsAccumulator, MetricsError, MetricsReport};
use crate::model::{ArchConfig, LossSettings, Model, ModelError, ParamGroup, SampleInputs};
use crate::optim::{AdamW, AdamWConfig};
use crate::segmenter::SegPrediction;
use crate::text::describe;
use crate::xobjalign::DistanceKind;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("no training samples")]
    EmptyData,
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

/// Size of the generated benchmark used by `train` and the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub canvas: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            canvas: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_fraction: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub enable_mcfuse: bool,
    pub enable_xobjalign: bool,
    pub lambda_xobj: f64,
    pub xobj_distance: DistanceKind,
    /// Probability that the text provider returns a wrong category.
    pub text_noise_rate: f64,
    /// Thresholds on the mask and visibility logits.
    pub mask_threshold: f64,
    pub visibility_threshold: f64,
    pub arch: ArchConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_fraction: 1.0 / 20.0,
            epochs_per_stage: 3,
            batch_size: 12,
            optimizer: AdamWConfig::default(),
            seed: 0,
            enable_mcfuse: true,
            enable_xobjalign: true,
            lambda_xobj: 1.0,
            xobj_distance: DistanceKind::Euclidean,
            text_noise_rate: 0.1,
            mask_threshold: 0.0,
            visibility_threshold: 0.0,
            arch: ArchConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "stage1_fraction must be in (0, 1], got {}",
                self.stage1_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.text_noise_rate) {
            return Err(TrainError::Config(format!(
                "text_noise_rate must be in [0, 1], got {}",
                self.text_noise_rate
            )));
        }
        if !(self.lambda_xobj >= 0.0 && self.lambda_xobj.is_finite()) {
            return Err(TrainError::Config("lambda_xobj must be finite and >= 0".into()));
        }
        if self.data.canvas == 0 || !self.data.canvas.is_multiple_of(8) {
            return Err(TrainError::Config(format!(
                "data.canvas must be a positive multiple of 8, got {}",
                self.data.canvas
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Init,
    Stage1,
    Stage2,
}

/// One row of the metric history, recorded before training (`epoch == 0`)
/// and after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: StageTag,
    pub epoch: usize,
    pub step: u64,
    /// Mean mask loss over the stage's training samples with the parameters
    /// at the end of the epoch.
    pub train_l_mask: f64,
    pub val_iou: f64,
    pub val_embed_distance: Option<f64>,
    pub fusion_weight: f64,
    /// Hash of the sample order consumed during the epoch (empty at epoch 0).
    pub data_order: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub stage: StageTag,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn init(config: &TrainConfig) -> Self {
        Self {
            model: Model::init(config.arch, config.seed),
            config: config.clone(),
            stage: StageTag::Init,
            step: 0,
            history: Vec::new(),
        }
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: StageTag,
    pub l_mask: f64,
    pub l_xobj: Option<f64>,
    pub fusion_weight: f64,
    pub embed_distance: Option<f64>,
}

/// Per-step records, optionally mirrored as JSON lines to a writer.
#[derive(Default)]
pub struct TrainLog {
    writer: Option<Box<dyn Write>>,
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_writer(writer: Box<dyn Write>) -> Self {
        Self {
            writer: Some(writer),
            records: Vec::new(),
        }
    }

    fn push(&mut self, rec: LogRecord) -> Result<(), TrainError> {
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Multiscale features of every frame, computed once for a fixed backbone.
/// The backbone is frozen throughout training, so the cache stays valid.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    backbone: Backbone,
    // Keyed by frame address; the frame is held so the address stays unique.
    features: HashMap<usize, (Arc<Frame>, Multiscale)>,
}

impl FeatureCache {
    pub fn new(backbone: &Backbone) -> Self {
        Self {
            backbone: backbone.clone(),
            features: HashMap::new(),
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn key(frame: &Arc<Frame>) -> usize {
        Arc::as_ptr(frame) as usize
    }

    pub fn extend(&mut self, samples: &[CorrespondenceSample]) -> Result<(), TrainError> {
        for s in samples {
            for f in [&s.query_frame, &s.target_frame] {
                if !self.features.contains_key(&Self::key(f)) {
                    let ms = self.backbone.forward(&frame_to_features(f)?);
                    self.features.insert(Self::key(f), (Arc::clone(f), ms));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, frame: &Arc<Frame>) -> &Multiscale {
        self.features
            .get(&Self::key(frame))
            .map(|(_, ms)| ms)
            .expect("features cached before use")
    }

    fn check(&self, model: &Model) -> Result<(), TrainError> {
        if self.backbone != model.encoder.backbone {
            return Err(TrainError::Config(
                "feature cache was built for a different backbone".into(),
            ));
        }
        Ok(())
    }
}

/// Text tokens for a sample list, as served by the text provider.
pub fn text_tokens(samples: &[CorrespondenceSample], noise_rate: f64, seed: u64) -> Vec<usize> {
    samples
        .iter()
        .map(|s| describe(s, noise_rate, seed).token_id)
        .collect()
}

fn seed_for(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

fn order_digest(samples: &[CorrespondenceSample], order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update(samples[i].id.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Indices of the stage-1 subset: `ceil(fraction * n)` samples chosen by seed.
pub fn stage1_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(seed, "stage1-subset", 0)));
    idx.truncate(k.min(n));
    idx.sort_unstable();
    idx
}

/// Per-direction and overall results of running a model on a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_direction: BTreeMap<String, MetricsReport>,
    /// Mean of the per-direction IoUs present.
    pub iou: f64,
    pub final_score: Option<f64>,
    /// Mean query-target embedding distance over visible pairs.
    pub embed_distance: Option<f64>,
}

/// Reported visibility: the visibility head fires and the mask has pixels.
pub fn reported_visible(pred: &SegPrediction, visibility_threshold: f64) -> bool {
    pred.visible(visibility_threshold) && !pred.upsampled_mask.is_empty()
}

pub struct Predictor<'a> {
    pub model: &'a Model,
    pub cache: &'a FeatureCache,
    pub mask_threshold: f64,
}

impl Predictor<'_> {
    pub fn predict(
        &self,
        sample: &CorrespondenceSample,
        text_token: Option<usize>,
    ) -> Result<SegPrediction, TrainError> {
        Ok(self.model.predict(
            self.cache.get(&sample.query_frame),
            &sample.query_mask,
            self.cache.get(&sample.target_frame),
            text_token,
            self.mask_threshold,
        )?)
    }
}

pub fn evaluate(
    model: &Model,
    cache: &FeatureCache,
    samples: &[CorrespondenceSample],
    tokens: Option<&[usize]>,
    config: &TrainConfig,
) -> Result<Evaluation, TrainError> {
    cache.check(model)?;
    let predictor = Predictor {
        model,
        cache,
        mask_threshold: config.mask_threshold,
    };
    let mut accs: BTreeMap<&'static str, MetricsAccumulator> = BTreeMap::new();
    let (mut dist_sum, mut dist_n) = (0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let token = tokens.map(|t| t[i]);
        let pred = predictor.predict(s, token)?;
        accs.entry(s.direction.name()).or_default().add_frame(
            s.scenario.name(),
            true,
            s.gt_visible,
            s.gt_target_mask.as_ref(),
            reported_visible(&pred, config.visibility_threshold),
            Some(&pred.upsampled_mask),
        )?;
        if let (true, Some(gt)) = (s.gt_visible, &s.gt_target_mask) {
            let q = model.query_embedding(cache.get(&s.query_frame), &s.query_mask)?;
            let t = model.target_embedding(cache.get(&s.target_frame), gt)?;
            let diff = &q.vector - &t.vector;
            dist_sum += diff.dot(&diff).sqrt();
            dist_n += 1;
        }
    }
    let per_direction: BTreeMap<String, MetricsReport> =
        accs.into_iter().map(|(k, a)| (k.to_string(), a.finish())).collect();
    let ious: Vec<f64> = per_direction.values().filter_map(|r| r.iou).collect();
    let iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    let final_score = match (
        per_direction.get(Direction::Ego2Exo.name()).and_then(|r| r.iou),
        per_direction.get(Direction::Exo2Ego.name()).and_then(|r| r.iou),
    ) {
        (Some(a), Some(b)) => Some(final_score(a, b)),
        _ => None,
    };
    Ok(Evaluation {
        per_direction,
        iou,
        final_score,
        embed_distance: (dist_n > 0).then(|| dist_sum / dist_n as f64),
    })
}

/// Mean mask loss over a sample set, without updating anything.
fn mean_mask_loss(
    model: &Model,
    cache: &FeatureCache,
    samples: &[CorrespondenceSample],
    tokens: &[usize],
    indices: &[usize],
    enable_mcfuse: bool,
) -> Result<f64, TrainError> {
    let settings = LossSettings {
        enable_mcfuse,
        xobj_weight: None,
        xobj_distance: DistanceKind::Euclidean,
        mask_scale: 1.0,
        xobj_scale: 1.0,
    };
    let mut scratch = model.zeros_like();
    let mut total = 0.0;
    for &i in indices {
        let s = &samples[i];
        let out = model.accumulate_gradients(&inputs(s, cache, tokens[i]), &settings, &mut scratch, None)?;
        total += out.mask_loss.total();
    }
    Ok(total / indices.len().max(1) as f64)
}

fn inputs<'a>(s: &'a CorrespondenceSample, cache: &'a FeatureCache, token: usize) -> SampleInputs<'a> {
    SampleInputs {
        query_features: cache.get(&s.query_frame),
        query_mask: &s.query_mask,
        target_features: cache.get(&s.target_frame),
        gt_mask: s.gt_target_mask.as_ref(),
        gt_visible: s.gt_visible,
        text_token: Some(token),
    }
}

/// Training data plus everything derived from it once per run.
pub struct TrainData<'a> {
    pub train: &'a [CorrespondenceSample],
    pub val: &'a [CorrespondenceSample],
    pub cache: &'a FeatureCache,
}

struct StagePlan<'a> {
    stage: StageTag,
    indices: Vec<usize>,
    trainable: &'a [ParamGroup],
    xobj: bool,
}

fn run_stage(
    checkpoint: &mut Checkpoint,
    data: &TrainData<'_>,
    plan: StagePlan<'_>,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    let config = checkpoint.config.clone();
    data.cache.check(&checkpoint.model)?;
    if plan.indices.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let train_tokens = text_tokens(data.train, config.text_noise_rate, config.seed);
    let val_tokens = text_tokens(data.val, config.text_noise_rate, config.seed);
    let val_tokens = config.enable_mcfuse.then_some(val_tokens.as_slice());

    let record = |cp: &Checkpoint, epoch: usize, order: String| -> Result<EpochRecord, TrainError> {
        let ev = evaluate(&cp.model, data.cache, data.val, val_tokens, &config)?;
        Ok(EpochRecord {
            stage: plan.stage,
            epoch,
            step: cp.step,
            train_l_mask: mean_mask_loss(
                &cp.model,
                data.cache,
                data.train,
                &train_tokens,
                &plan.indices,
                config.enable_mcfuse,
            )?,
            val_iou: ev.iou,
            val_embed_distance: ev.embed_distance,
            fusion_weight: cp.model.mcfuse.weight(),
            data_order: order,
        })
    };

    let start = record(checkpoint, 0, String::new())?;
    checkpoint.history.push(start);
    let mut opt = AdamW::new(config.optimizer, &checkpoint.model, plan.trainable);
    let stage_label = match plan.stage {
        StageTag::Stage1 => "stage1",
        _ => "stage2",
    };
    for epoch in 1..=config.epochs_per_stage {
        let mut order = plan.indices.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(
            config.seed,
            stage_label,
            epoch as u64,
        )));
        for batch in order.chunks(config.batch_size) {
            let n_visible = batch.iter().filter(|&&i| data.train[i].gt_visible).count();
            let settings = LossSettings {
                enable_mcfuse: config.enable_mcfuse,
                xobj_weight: plan.xobj.then_some(config.lambda_xobj),
                xobj_distance: config.xobj_distance,
                mask_scale: 1.0 / batch.len() as f64,
                xobj_scale: 1.0 / n_visible.max(1) as f64,
            };
            let mut grads = checkpoint.model.zeros_like();
            let (mut l_mask, mut dist_sum, mut dist_sq, mut dist_n) = (0.0, 0.0, 0.0, 0usize);
            for &i in batch {
                let s = &data.train[i];
                let out = checkpoint.model.accumulate_gradients(
                    &inputs(s, data.cache, train_tokens[i]),
                    &settings,
                    &mut grads,
                    None,
                )?;
                l_mask += out.mask_loss.total();
                if let Some(d) = out.embed_distance {
                    dist_sum += d;
                    dist_sq += d * d;
                    dist_n += 1;
                }
            }
            opt.step(&mut checkpoint.model, &grads);
            checkpoint.step += 1;
            {
                let mean_dist = (dist_n > 0).then(|| dist_sum / dist_n as f64);
                let l_xobj = mean_dist.map(|m| match config.xobj_distance {
                    DistanceKind::Euclidean => m,
                    DistanceKind::SquaredEuclidean => dist_sq / dist_n as f64,
                });
                let rec = LogRecord {
                    step: checkpoint.step,
                    stage: plan.stage,
                    l_mask: l_mask / batch.len() as f64,
                    l_xobj,
                    fusion_weight: checkpoint.model.mcfuse.weight(),
                    embed_distance: mean_dist,
                };
                log.push(rec)?;
            }
        }
        let rec = record(checkpoint, epoch, order_digest(data.train, &order))?;
        checkpoint.history.push(rec);
    }
    checkpoint.stage = plan.stage;
    Ok(())
}

/// Stage 1: only the fusion parameters learn, from the mask loss, on a
/// `stage1_fraction` subset of the training samples.
pub fn train_stage1(
    config: &TrainConfig,
    data: &TrainData<'_>,
    log: &mut TrainLog,
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    if !config.enable_mcfuse {
        return Err(TrainError::Config("stage 1 requires enable_mcfuse".into()));
    }
    let mut cp = Checkpoint::init(config);
    let plan = StagePlan {
        stage: StageTag::Stage1,
        indices: stage1_subset(data.train.len(), config.stage1_fraction, config.seed),
        trainable: &[ParamGroup::McFuse],
        xobj: false,
    };
    run_stage(&mut cp, data, plan, log)?;
    Ok(cp)
}

/// Stage 2: everything but the backbone learns from the mask loss plus the
/// optional alignment loss, on all training samples.
pub fn train_stage2(
    data: &TrainData<'_>,
    mut checkpoint: Checkpoint,
    log: &mut TrainLog,
) -> Result<Checkpoint, TrainError> {
    checkpoint.config.validate()?;
    let plan = StagePlan {
        stage: StageTag::Stage2,
        indices: (0..data.train.len()).collect(),
        trainable: &[ParamGroup::ConditionHeads, ParamGroup::McFuse, ParamGroup::Segmenter],
        xobj: checkpoint.config.enable_xobjalign,
    };
    run_stage(&mut checkpoint, data, plan, log)?;
    Ok(checkpoint)
}

/// Both stages; stage 1 is skipped when fusion is disabled.
pub fn train(
    config: &TrainConfig,
    data: &TrainData<'_>,
    log: &mut TrainLog,
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let cp = if config.enable_mcfuse {
        train_stage1(config, data, log)?
    } else {
        Checkpoint::init(config)
    };
    train_stage2(data, cp, log)
}

/// Build the benchmark and the feature cache a config asks for.
pub fn prepare(config: &TrainConfig) -> Result<(Benchmark, FeatureCache), TrainError> {
    config.validate()?;
    let bench = Benchmark::generate(
        config.seed,
        config.data.n_train,
        config.data.n_val,
        (config.data.canvas, config.data.canvas),
    )?;
    let model = Model::init(config.arch, config.seed);
    let mut cache = FeatureCache::new(&model.encoder.backbone);
    cache.extend(&bench.train)?;
    cache.extend(&bench.val)?;
    Ok((bench, cache))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mcfuse: bool,
    pub xobjalign: bool,
    pub val_iou: f64,
    pub final_score: Option<f64>,
    pub val_embed_distance: Option<f64>,
    pub fusion_weight: f64,
    /// Per-epoch data-order hashes of stage 2.
    pub stage2_data_order: Vec<String>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut s = String::from("| Method | MCFuse | XObjAlign | Val IoU |\n|---|:-:|:-:|--:|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.4} |\n",
                r.name,
                mark(r.mcfuse),
                mark(r.xobjalign),
                r.val_iou
            ));
        }
        s
    }

    pub fn row(&self, mcfuse: bool, xobjalign: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.mcfuse == mcfuse && r.xobjalign == xobjalign)
    }
}

pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("Base", false, false),
    ("+MCFuse", true, false),
    ("+XObjAlign", false, true),
    ("Full", true, true),
];

/// Train the four flag combinations from the same seed and data.
pub fn run_ablation(base: &TrainConfig, data: &TrainData<'_>) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::with_capacity(4);
    for (name, mcfuse, xobj) in ABLATION_ROWS {
        let config = TrainConfig {
            enable_mcfuse: mcfuse,
            enable_xobjalign: xobj,
            ..base.clone()
        };
        let cp = train(&config, data, &mut TrainLog::new())?;
        let last = cp.history.last().expect("history is nonempty");
        let tokens = text_tokens(data.val, config.text_noise_rate, config.seed);
        let ev = evaluate(&cp.model, data.cache, data.val, mcfuse.then_some(tokens.as_slice()), &config)?;
        rows.push(AblationRow {
            name: name.to_string(),
            mcfuse,
            xobjalign: xobj,
            val_iou: ev.iou,
            final_score: ev.final_score,
            val_embed_distance: last.val_embed_distance,
            fusion_weight: cp.model.mcfuse.weight(),
            stage2_data_order: cp
                .history
                .iter()
                .filter(|r| r.stage == StageTag::Stage2 && r.epoch > 0)
                .map(|r| r.data_order.clone())
                .collect(),
            history: cp.history,
        });
    }
    Ok(AblationTable { seed: base.seed, rows })
}

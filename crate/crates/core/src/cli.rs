//! Command-line front end: generate-data, train, predict, evaluate, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::annotation::{AnnotationFile, FrameRecord, TrackRecord};
use crate::checkpoint;
use crate::dataset::store::{self, gt_path, index_path, SplitIndex};
use crate::dataset::{scene_specs, Benchmark, Direction, Scenario, Scene};
use crate::metrics::{final_score, MetricsAccumulator, MetricsReport};
use crate::training::{
    reported_visible, text_tokens, train, FeatureCache, Predictor, TrainConfig, TrainData, TrainLog,
};

/// Prefix of environment variables that override config fields. Nested
/// fields are separated by a double underscore, e.g.
/// `XVIEW_CFG_OPTIMIZER__LEARNING_RATE=0.003`.
pub const ENV_PREFIX: &str = "XVIEW_CFG_";

#[derive(Debug, Parser)]
#[command(name = "xview", version, about = "Cross-view object correspondence toolkit")]
pub struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file with training fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes and write a split dataset directory.
    GenerateData {
        #[arg(long, default_value_t = 60)]
        n_scenes: usize,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        /// train,val,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
    },
    /// Run both training stages; trains on a dataset directory when given,
    /// otherwise on a benchmark generated from the config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict target masks for one split of a dataset directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Score prediction files against a split's ground truth.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Per-scenario IoU table (CSV) and optional bar chart from an evaluation.
    Report {
        #[arg(long)]
        evaluation: PathBuf,
        #[arg(long)]
        plot: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    /// Hash over all inputs, in the form `sha256:<hex>`.
    pub input_hash: String,
    /// Output paths relative to the output directory.
    pub outputs: Vec<String>,
    pub status: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub split_counts: BTreeMap<String, usize>,
}

/// Evaluation output: one report per direction present plus the final score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationFile {
    pub per_direction: BTreeMap<String, MetricsReport>,
    pub final_score: Option<f64>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Git-style hash: every input is hashed as `blob <len>\0<bytes>`, then the
/// sorted `(name, hash)` list is hashed as a tree.
pub fn content_hash(inputs: &[(String, Vec<u8>)]) -> String {
    let mut entries: Vec<(String, String)> = inputs
        .iter()
        .map(|(name, bytes)| {
            let mut h = Sha256::new();
            h.update(format!("blob {}\0", bytes.len()).as_bytes());
            h.update(bytes);
            (name.clone(), hex(&h.finalize()))
        })
        .collect();
    entries.sort();
    let mut tree = Sha256::new();
    for (name, h) in &entries {
        tree.update(format!("{name}\0{h}\n").as_bytes());
    }
    format!("sha256:{}", hex(&tree.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    write_atomic(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(m).expect("manifest serializes").as_bytes(),
    )
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Every file below `root`, as (relative name, bytes), in sorted order.
fn dir_inputs(root: &Path, prefix: &str) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
                out.push((format!("{prefix}/{rel}"), read_input(&p)?));
            }
        }
    }
    Ok(out)
}

/// Defaults, then the config file, then `XVIEW_CFG_*` variables, then `--seed`.
pub fn resolve_config(
    path: Option<&Path>,
    env: &[(String, String)],
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let file: Value = serde_json::from_str(&text)
            .with_context(|| format!("{}: invalid JSON", p.display()))?;
        if !file.is_object() {
            bail!("{}: config must be a JSON object", p.display());
        }
        merge(&mut value, file);
        // Reject unknown or mistyped fields with the file named.
        serde_json::from_value::<TrainConfig>(value.clone())
            .with_context(|| format!("{}: invalid config", p.display()))?;
    }
    let mut env: Vec<&(String, String)> =
        env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut slot = &mut value;
        for part in &path {
            slot = slot
                .get_mut(part.as_str())
                .ok_or_else(|| anyhow!("{key}: no config field {:?}", path.join(".")))?;
        }
        *slot = parsed;
    }
    let mut config: TrainConfig =
        serde_json::from_value(value).context("invalid config after environment overrides")?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_fractions(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--fractions {s:?}: expected three numbers"))?;
    parts
        .try_into()
        .map_err(|_| anyhow!("--fractions {s:?}: expected exactly three values"))
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn start(cli: &Cli, out: &'a Path, inputs: &[(String, Vec<u8>)], outputs: Vec<String>) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let manifest = RunManifest {
            command: cli.command.name().to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: cli.config.as_ref().map(|p| p.display().to_string()),
            seed: cli.seed,
            input_hash: content_hash(inputs),
            outputs,
            status: "running".into(),
            started_at: now(),
            finished_at: None,
            split_counts: BTreeMap::new(),
        };
        write_manifest(out, &manifest)?;
        Ok(Self { out, manifest })
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.status = "complete".into();
        self.manifest.finished_at = Some(now());
        write_manifest(self.out, &self.manifest)
    }
}

fn cmd_generate(cli: &Cli, out: &Path, n_scenes: usize, canvas: usize, fractions: &str) -> Result<()> {
    let fractions = parse_fractions(fractions)?;
    if canvas == 0 || !canvas.is_multiple_of(8) {
        bail!("--canvas must be a positive multiple of 8, got {canvas}");
    }
    let seed = cli.seed.unwrap_or(0);
    let args = serde_json::json!({
        "seed": seed, "n_scenes": n_scenes, "canvas": canvas, "fractions": fractions,
    });
    let mut outputs: Vec<String> = vec!["images/".into()];
    for split in store::SPLITS {
        outputs.push(format!("{split}/index.json"));
        for d in Direction::BOTH {
            outputs.push(format!("{split}/{d}_query.json"));
            outputs.push(format!("{split}/{d}_gt.json"));
        }
    }
    let mut run = Run::start(cli, out, &[("args".into(), args.to_string().into_bytes())], outputs)?;
    let scenes = scene_specs(seed, n_scenes, (canvas, canvas))
        .iter()
        .map(Scene::build)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (counts, _) = store::write_dataset(out, &scenes, fractions, seed)?;
    for (k, v) in &counts {
        println!("{k}: {v} samples");
    }
    run.manifest.split_counts = counts;
    run.finish()
}

fn cmd_train(cli: &Cli, out: &Path, data: Option<&Path>) -> Result<()> {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let config = resolve_config(cli.config.as_deref(), &env, cli.seed)?;
    let config_json = serde_json::to_string_pretty(&config).expect("config serializes");
    let mut inputs = vec![("config".to_string(), config_json.clone().into_bytes())];
    if let Some(d) = data {
        for split in ["train", "val"] {
            inputs.extend(dir_inputs(&d.join(split), split)?);
        }
        inputs.extend(dir_inputs(&d.join("images"), "images")?);
    }
    let outputs = ["config.json", "train_log.jsonl", "history.json", "checkpoint.bin"]
        .map(String::from)
        .to_vec();
    let run = Run::start(cli, out, &inputs, outputs)?;

    let (train_set, val_set) = match data {
        Some(d) => (store::load_split(d, "train")?, store::load_split(d, "val")?),
        None => {
            let b = Benchmark::generate(
                config.seed,
                config.data.n_train,
                config.data.n_val,
                (config.data.canvas, config.data.canvas),
            )?;
            (b.train, b.val)
        }
    };
    let model = crate::model::Model::init(config.arch, config.seed);
    let mut cache = FeatureCache::new(&model.encoder.backbone);
    cache.extend(&train_set)?;
    cache.extend(&val_set)?;
    fs::write(out.join("config.json"), &config_json)?;
    let log_file = fs::File::create(out.join("train_log.jsonl"))?;
    let mut log = TrainLog::with_writer(Box::new(std::io::BufWriter::new(log_file)));
    let cp = train(
        &config,
        &TrainData {
            train: &train_set,
            val: &val_set,
            cache: &cache,
        },
        &mut log,
    )?;
    log.flush()?;
    fs::write(
        out.join("history.json"),
        serde_json::to_string_pretty(&cp.history).expect("history serializes"),
    )?;
    checkpoint::save(&cp, &out.join("checkpoint.bin"))?;
    if let Some(last) = cp.history.last() {
        println!(
            "val IoU {:.4}, fusion weight {:.4}, {} steps",
            last.val_iou, last.fusion_weight, cp.step
        );
    }
    run.finish()
}

fn cmd_predict(cli: &Cli, out: &Path, ckpt: &Path, data: &Path, split: &str) -> Result<()> {
    let mut inputs = vec![("checkpoint".to_string(), read_input(ckpt)?)];
    inputs.extend(dir_inputs(&data.join(split), split)?);
    inputs.extend(dir_inputs(&data.join("images"), "images")?);
    let outputs = Direction::BOTH.map(|d| format!("{d}.json")).to_vec();
    let run = Run::start(cli, out, &inputs, outputs)?;

    let cp = checkpoint::load(ckpt)?;
    let samples = store::load_split(data, split)?;
    let index = SplitIndex::load(&index_path(data, split))?;
    let mut cache = FeatureCache::new(&cp.model.encoder.backbone);
    cache.extend(&samples)?;
    let tokens = text_tokens(&samples, cp.config.text_noise_rate, cp.config.seed);
    let predictor = Predictor {
        model: &cp.model,
        cache: &cache,
        mask_threshold: cp.config.mask_threshold,
    };
    let mut files: BTreeMap<Direction, AnnotationFile> = Direction::BOTH
        .into_iter()
        .map(|d| (d, AnnotationFile::new(index.height, index.width)))
        .collect();
    for (s, &token) in samples.iter().zip(&tokens) {
        let pred = predictor.predict(s, cp.config.enable_mcfuse.then_some(token))?;
        let visible = reported_visible(&pred, cp.config.visibility_threshold);
        files
            .get_mut(&s.direction)
            .expect("both directions present")
            .tracks
            .push(TrackRecord {
                object_id: s.id.clone(),
                frames: vec![FrameRecord::from_mask(0, visible, visible.then_some(&pred.upsampled_mask))],
            });
    }
    for (d, f) in &files {
        f.save(&out.join(format!("{d}.json")))?;
    }
    println!("{} predictions written", samples.len());
    run.finish()
}

/// Score the prediction files found in `pred` against the split's ground truth.
pub fn evaluate_dir(data: &Path, pred: &Path, split: &str) -> Result<EvaluationFile> {
    let index_file = index_path(data, split);
    let index = SplitIndex::load(&index_file)?;
    let mut per_direction = BTreeMap::new();
    for d in Direction::BOTH {
        let ppath = pred.join(format!("{d}.json"));
        if !ppath.exists() {
            continue;
        }
        let preds = AnnotationFile::load(&ppath)?;
        let gpath = gt_path(data, split, d);
        let gts = AnnotationFile::load(&gpath)?;
        if (preds.height, preds.width) != (gts.height, gts.width) {
            bail!(
                "{}: height/width {}x{} do not match ground truth {}x{}",
                ppath.display(),
                preds.height,
                preds.width,
                gts.height,
                gts.width
            );
        }
        let mut acc = MetricsAccumulator::new();
        for e in index.samples.iter().filter(|e| e.direction == d) {
            let (gt_visible, gt_mask) = store::single_frame(&gts, &e.id, &gpath)?;
            let (p_visible, p_mask) = store::single_frame(&preds, &e.id, &ppath)?;
            acc.add_frame(
                e.scenario.name(),
                true,
                gt_visible,
                gt_mask.as_ref(),
                p_visible,
                p_mask.as_ref(),
            )
            .with_context(|| format!("{}: track {:?}", gpath.display(), e.id))?;
        }
        per_direction.insert(d.name().to_string(), acc.finish());
    }
    if per_direction.is_empty() {
        bail!(
            "{}: no prediction files (expected ego2exo.json and/or exo2ego.json)",
            pred.display()
        );
    }
    let iou_of = |d: Direction| per_direction.get(d.name()).and_then(|r: &MetricsReport| r.iou);
    let final_score = match (iou_of(Direction::Ego2Exo), iou_of(Direction::Exo2Ego)) {
        (Some(a), Some(b)) => Some(final_score(a, b)),
        _ => None,
    };
    Ok(EvaluationFile {
        per_direction,
        final_score,
    })
}

fn cmd_evaluate(cli: &Cli, out: &Path, data: &Path, pred: &Path, split: &str) -> Result<()> {
    let mut inputs = dir_inputs(&data.join(split), split)?;
    for d in Direction::BOTH {
        let p = pred.join(format!("{d}.json"));
        if p.exists() {
            inputs.push((format!("pred/{d}.json"), read_input(&p)?));
        }
    }
    let run = Run::start(cli, out, &inputs, vec!["evaluation.json".into()])?;
    let eval = evaluate_dir(data, pred, split)?;
    let text = serde_json::to_string_pretty(&eval).expect("evaluation serializes");
    fs::write(out.join("evaluation.json"), &text)?;
    println!("{text}");
    run.finish()
}

/// One CSV row per scenario present in the evaluation.
pub fn scenario_rows(eval: &EvaluationFile) -> Vec<(Scenario, Option<f64>, Option<f64>, usize)> {
    let get = |d: Direction, s: Scenario| {
        eval.per_direction
            .get(d.name())
            .and_then(|r| r.per_scenario.get(s.name()))
    };
    Scenario::ALL
        .into_iter()
        .filter_map(|s| {
            let a = get(Direction::Ego2Exo, s);
            let b = get(Direction::Exo2Ego, s);
            if a.is_none() && b.is_none() {
                return None;
            }
            let n = a.map_or(0, |v| v.n_eval_frames) + b.map_or(0, |v| v.n_eval_frames);
            Some((s, a.and_then(|v| v.iou), b.and_then(|v| v.iou), n))
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn report_csv(eval: &EvaluationFile) -> String {
    let mut s = String::from("scenario,ego2exo_iou,exo2ego_iou,mean_iou,n_eval_frames\n");
    for (sc, a, b, n) in scenario_rows(eval) {
        let present: Vec<f64> = [a, b].into_iter().flatten().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        s.push_str(&format!("{},{},{},{},{}\n", sc, fmt_opt(a), fmt_opt(b), fmt_opt(mean), n));
    }
    s
}

/// Grouped bar chart: per scenario, an ego2exo bar and an exo2ego bar.
pub fn report_plot(eval: &EvaluationFile) -> image::RgbImage {
    let rows = scenario_rows(eval);
    let (bar, gap, height, margin) = (18u32, 14u32, 200u32, 10u32);
    let width = margin * 2 + rows.len() as u32 * (2 * bar + gap);
    let mut img = image::RgbImage::from_pixel(width.max(1), height + 2 * margin, image::Rgb([255, 255, 255]));
    let colors = [image::Rgb([66, 113, 196]), image::Rgb([230, 140, 40])];
    for (i, (_, a, b, _)) in rows.iter().enumerate() {
        for (j, v) in [a, b].into_iter().enumerate() {
            let h = (v.unwrap_or(0.0).clamp(0.0, 1.0) * height as f64).round() as u32;
            let x0 = margin + i as u32 * (2 * bar + gap) + j as u32 * bar;
            for x in x0..x0 + bar - 2 {
                for y in (margin + height - h)..(margin + height) {
                    img.put_pixel(x, y, colors[j]);
                }
            }
        }
    }
    for x in 0..width {
        img.put_pixel(x, margin + height - 1, image::Rgb([0, 0, 0]));
    }
    img
}

fn cmd_report(cli: &Cli, out: &Path, evaluation: &Path, plot: bool) -> Result<()> {
    let bytes = read_input(evaluation)?;
    let mut outputs = vec!["scenario_iou.csv".to_string()];
    if plot {
        outputs.push("scenario_iou.png".into());
    }
    let run = Run::start(cli, out, &[("evaluation".into(), bytes.clone())], outputs)?;
    let eval: EvaluationFile = serde_json::from_slice(&bytes)
        .with_context(|| format!("{}: not an evaluation file", evaluation.display()))?;
    let csv = report_csv(&eval);
    fs::write(out.join("scenario_iou.csv"), &csv)?;
    print!("{csv}");
    if plot {
        let path = out.join("scenario_iou.png");
        report_plot(&eval)
            .save_with_format(&path, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    run.finish()
}

pub fn run(cli: &Cli) -> Result<()> {
    let Some(out) = cli.out.as_deref() else {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                format!("{} requires --out <DIR>", cli.command.name()),
            )
            .exit();
    };
    match &cli.command {
        Command::GenerateData {
            n_scenes,
            canvas,
            fractions,
        } => cmd_generate(cli, out, *n_scenes, *canvas, fractions),
        Command::Train { data } => cmd_train(cli, out, data.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            split,
        } => cmd_predict(cli, out, checkpoint, data, split),
        Command::Evaluate { data, pred, split } => cmd_evaluate(cli, out, data, pred, split),
        Command::Report { evaluation, plot } => cmd_report(cli, out, evaluation, *plot),
    }
}

/// Parse arguments, run, and map the outcome to an exit code
/// (0 success, 1 runtime error, 2 usage error).
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn xview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xview"))
        .args(args)
        .env("XVIEW_CFG_EPOCHS_PER_STAGE", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = xview(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, seed: &str) {
    ok(&["generate-data", "--n-scenes", "12", "--seed", seed, "--out", s(dir)]);
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, "5");
    generate(&b, "5");
    let names = files(&a);
    assert_eq!(names, files(&b));
    for n in &names {
        if n == Path::new("manifest.json") {
            continue;
        }
        assert!(fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let (ma, mb) = (read_json(&a.join("manifest.json")), read_json(&b.join("manifest.json")));
    assert_eq!(ma["input_hash"], mb["input_hash"]);
    assert_eq!(ma["status"], "complete");
    assert!(ma["input_hash"].as_str().unwrap().starts_with("sha256:"));

    let counts = ma["split_counts"].as_object().unwrap();
    let mut total = 0;
    for split in ["train", "val", "test"] {
        let n = counts[split].as_u64().unwrap() as usize;
        let index = read_json(&a.join(split).join("index.json"));
        assert_eq!(index["samples"].as_array().unwrap().len(), n);
        total += n;
    }
    let train = counts["train"].as_u64().unwrap() as f64;
    assert!((train - 0.8 * total as f64).abs() <= 6.0, "{train} of {total}");

    let c = tmp.path().join("c");
    generate(&c, "6");
    assert_ne!(fs::read(a.join("val/ego2exo_gt.json")).unwrap(), fs::read(c.join("val/ego2exo_gt.json")).unwrap());
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = xview(&["generate-data", "--n-scenes", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "1");
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for d in ["ego2exo", "exo2ego"] {
        fs::copy(data.join(format!("val/{d}_gt.json")), pred.join(format!("{d}.json"))).unwrap();
    }
    let out = tmp.path().join("eval");
    ok(&["evaluate", "--data", s(&data), "--pred", s(&pred), "--out", s(&out)]);
    let ev = read_json(&out.join("evaluation.json"));
    for d in ["ego2exo", "exo2ego"] {
        let r = &ev["per_direction"][d];
        assert_eq!((r["iou"].as_f64(), r["le"].as_f64(), r["ca"].as_f64()), (Some(1.0), Some(0.0), Some(1.0)));
        assert_eq!(r["va"].as_f64(), Some(1.0));
    }
    assert_eq!(ev["final_score"].as_f64(), Some(1.0));

    let rep = tmp.path().join("report");
    ok(&["report", "--evaluation", s(&out.join("evaluation.json")), "--plot", "--out", s(&rep)]);
    let csv = fs::read_to_string(rep.join("scenario_iou.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(rep.join("scenario_iou.png").exists());
}

#[test]
fn malformed_predictions_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "2");
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    fs::write(pred.join("ego2exo.json"), "{\"height\": 64, \"width\": ").unwrap();
    let out = xview(&["evaluate", "--data", s(&data), "--pred", s(&pred), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ego2exo.json"), "{err}");
    let m = read_json(&tmp.path().join("e/manifest.json"));
    assert_eq!(m["status"], "running");
}

#[test]
fn full_pipeline_produces_consistent_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "3");
    let model = tmp.path().join("model");
    ok(&["train", "--data", s(&data), "--seed", "3", "--out", s(&model)]);
    for f in ["config.json", "train_log.jsonl", "history.json", "checkpoint.bin", "manifest.json"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(model.join("train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let pred = tmp.path().join("pred");
    ok(&["predict", "--checkpoint", s(&model.join("checkpoint.bin")), "--data", s(&data), "--out", s(&pred)]);
    let eval = tmp.path().join("eval");
    ok(&["evaluate", "--data", s(&data), "--pred", s(&pred), "--out", s(&eval)]);
    let ev = read_json(&eval.join("evaluation.json"));
    let iou = |d: &str| ev["per_direction"][d]["iou"].as_f64().unwrap();
    let expected = (iou("ego2exo") + iou("exo2ego")) / 2.0;
    assert!((ev["final_score"].as_f64().unwrap() - expected).abs() < 1e-12);
}

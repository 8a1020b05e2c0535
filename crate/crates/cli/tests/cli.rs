use std::path::{Path, PathBuf};
use std::process::Command;

use dapose::eval::{detections_to_json, Detection};
use dapose::schema::KeypointAnnotation;
use dapose_cli::commands::{ablation_point, ABLATION_TABLE, EVAL_REPORT};
use dapose_cli::{cmd_eval, cmd_train, run, ExperimentConfig, TrainFlags, EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use serde_json::Value;

const TOY: &str = r#"{
  "synthgen": {"count": 10, "image_size": [32, 32], "views": {"focal": 35.0}, "background_jitter": 0.1},
  "data": {"sample": {"input_size": [16, 16], "sigma_px": 1.0}, "augment": null},
  "model": {
    "input_size": [16, 16], "block_names": ["res1", "res2", "res3"], "channels": [4, 8, 8],
    "strides": [2, 2, 1], "deconv_channels": 8, "domain_hidden": [16, 8]
  },
  "train": {
    "lr": 0.01, "formal_session": {"batch": 8, "epochs": 2}, "init_session": {"batch": 8, "epochs": 1},
    "frozen_blocks": ["res1"]
  },
  "eval": {"batch": 8, "probe": {"epochs": 20}}
}"#;

fn dapose(args: &[&str]) -> i32 {
    run(std::iter::once("dapose").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

/// Config file plus three generated datasets: synthetic and real training
/// sets and a real test set.
fn toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("toy.json");
    std::fs::write(&config, TOY).unwrap();
    let gen = |name: &str, seed: &str, domain: &str, bg: &str, count: &str| {
        let out = root.join(name);
        let code = dapose(&[
            "generate",
            "--config",
            s(&config),
            "--seed",
            seed,
            "--set",
            &format!("synthgen.domain={domain}"),
            "--set",
            &format!("synthgen.scene.background_color=[{bg},{bg},{bg}]"),
            "--set",
            &format!("synthgen.count={count}"),
            "--out",
            s(&out),
        ]);
        assert_eq!(code, EXIT_OK);
    };
    gen("syn", "1", "synthetic", "0.55", "24");
    gen("real", "2", "real", "0.15", "8");
    gen("test", "3", "real", "0.15", "8");
    Toy {
        _dir: dir,
        root,
        config,
    }
}

impl Toy {
    fn data_args(&self) -> Vec<String> {
        let m = |n: &str| self.root.join(n).join("manifest.json").to_string_lossy().into_owned();
        vec![
            "--set".into(),
            format!("data.train=[\"{}\",\"{}\"]", m("syn"), m("real")),
            "--set".into(),
            format!("data.test=\"{}\"", m("test")),
        ]
    }

    fn cmd(&self, sub: &str, out: &Path, extra: &[&str]) -> i32 {
        let mut args: Vec<String> = vec![sub.into(), "--config".into(), s(&self.config).into()];
        args.extend(self.data_args());
        args.extend(extra.iter().map(|x| x.to_string()));
        args.extend(["--out".into(), s(out).into()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        dapose(&refs)
    }

    fn resolved(&self, extra: &[String]) -> ExperimentConfig {
        let mut sets: Vec<String> = self.data_args().into_iter().filter(|a| a != "--set").collect();
        sets.extend(extra.iter().cloned());
        ExperimentConfig::resolve(Some(&self.config), &sets, None).unwrap()
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_writes_requested_count_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TOY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(dapose(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(out)]), EXIT_OK);
    }
    let ann = read_json(&a.join("annotations.json"));
    assert_eq!(ann["images"].as_array().unwrap().len(), 10);
    assert_eq!(ann["annotations"].as_array().unwrap().len(), 10);
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 10);
    assert_eq!(
        std::fs::read(a.join("annotations.json")).unwrap(),
        std::fs::read(b.join("annotations.json")).unwrap()
    );
    assert!(a.join("manifest.json").exists());
    let run = read_json(&a.join("run.json"));
    assert_eq!(run["command"], "generate");
    // the written config reproduces the run
    let c = dir.path().join("c2");
    assert_eq!(dapose(&["generate", "--config", s(&a.join("config.json")), "--out", s(&c)]), EXIT_OK);
    assert_eq!(
        std::fs::read(a.join("annotations.json")).unwrap(),
        std::fs::read(c.join("annotations.json")).unwrap()
    );
}

#[test]
fn invalid_key_exits_with_config_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dapose"))
        .args(["generate", "--set", "synthgen.cuont=3", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cuont"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = dapose(&[
        "stats",
        "--set",
        "data.train=[\"/nonexistent/manifest.json\"]",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert_eq!(dapose(&["train", "--out", s(dir.path())]), EXIT_CONFIG);
    assert_eq!(dapose(&["frobnicate"]), EXIT_CONFIG);
}

fn oracle(gts: &[KeypointAnnotation]) -> Vec<Detection> {
    gts.iter()
        .map(|g| Detection {
            image_id: g.image_id,
            keypoints: g.keypoints.iter().map(|k| [k.x, k.y, 1.0]).collect(),
            score: 1.0,
        })
        .collect()
}

#[test]
fn eval_scores_detection_files() {
    let t = toy();
    let gts = dapose::data::DatasetManifest::load(&t.root.join("test/manifest.json"))
        .unwrap()
        .load_all()
        .unwrap()
        .0
        .annotations();
    let perfect = t.root.join("perfect.json");
    std::fs::write(&perfect, detections_to_json(&oracle(&gts)).unwrap()).unwrap();
    let empty = t.root.join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    for (file, want) in [(&perfect, 1.0), (&empty, 0.0)] {
        let out = t.root.join(format!("eval_{want}"));
        let set = format!("eval.detections=\"{}\"", s(file));
        assert_eq!(t.cmd("eval", &out, &["--set", &set]), EXIT_OK);
        let rep = read_json(&out.join(EVAL_REPORT));
        assert_eq!(rep["mAP"].as_f64().unwrap(), want);
        assert_eq!(rep["ap_per_threshold"].as_array().unwrap().len(), 10);
    }
}

#[test]
fn train_eval_finetune_and_resume() {
    let t = toy();
    let full = t.root.join("ft");
    assert_eq!(t.cmd("train", &full, &["--set", "train.mode=finetune"]), EXIT_OK);
    let report = std::fs::read_to_string(full.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(!report.contains("L_D"), "{report}");

    // eval twice: identical reports
    let ck = format!("eval.checkpoint=\"{}\"", s(&full.join("checkpoint.safetensors")));
    let e1 = t.root.join("e1");
    let e2 = t.root.join("e2");
    for out in [&e1, &e2] {
        assert_eq!(t.cmd("eval", out, &["--set", &ck, "--set", "eval.export_features=true"]), EXIT_OK);
    }
    assert_eq!(std::fs::read(e1.join(EVAL_REPORT)).unwrap(), std::fs::read(e2.join(EVAL_REPORT)).unwrap());
    let csv = std::fs::read_to_string(e1.join("features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);

    // fidip interrupted after one cycle, then resumed
    let whole = t.root.join("whole");
    assert_eq!(t.cmd("train", &whole, &[]), EXIT_OK);
    let split = t.root.join("split");
    assert_eq!(t.cmd("train", &split, &["--max-cycles", "1"]), EXIT_OK);
    assert_eq!(std::fs::read_to_string(split.join("report.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(t.cmd("train", &split, &["--resume"]), EXIT_OK);
    assert_eq!(
        std::fs::read(whole.join("report.jsonl")).unwrap(),
        std::fs::read(split.join("report.jsonl")).unwrap()
    );
    // resuming with a different config is refused
    assert_eq!(t.cmd("train", &split, &["--resume", "--set", "train.lr=0.02"]), EXIT_CONFIG);
}

#[test]
fn ablation_grid_rows_match_individual_runs() {
    let t = toy();
    let out = t.root.join("grid");
    let probe = format!("eval.probe_data=\"{}\"", s(&t.root.join("syn/manifest.json")));
    let code = t.cmd(
        "ablate",
        &out,
        &["--set", "ablate.update_blocks=[1,2,1]", "--set", "eval.domain_confusion=true", "--set", &probe],
    );
    assert_eq!(code, EXIT_OK);
    let rows = read_json(&out.join(ABLATION_TABLE));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4, "duplicate grid point must be dropped");
    let hashes: std::collections::HashSet<&str> = rows.iter().map(|r| r["config_hash"].as_str().unwrap()).collect();
    assert_eq!(hashes.len(), 4);
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 5);

    // decomposition: one grid point run on its own
    let row = rows.iter().find(|r| r["domain_adaptation"] == true && r["update_blocks"] == 2).unwrap();
    let base = t.resolved(&["eval.domain_confusion=true".into(), probe]);
    let alone = t.root.join("alone");
    let cfg = ablation_point(&base, true, 2, None, &alone).unwrap();
    cmd_train(&cfg, &alone, &TrainFlags::default()).unwrap();
    let ev = cmd_eval(&cfg, &alone.join("eval")).unwrap();
    assert_eq!(ev.report.map, row["mAP"].as_f64().unwrap());
    assert_eq!(ev.domain_confusion.unwrap().accuracy, row["domain_confusion"].as_f64().unwrap());
}

#[test]
fn fit_and_stats_write_reports() {
    let t = toy();
    let out = t.root.join("stats");
    assert_eq!(t.cmd("stats", &out, &[]), EXIT_OK);
    let st = read_json(&out.join("stats.json"));
    assert_eq!(st["all"]["annotations"], 40);
    assert!(st["by_domain"]["real"].is_object() && st["by_domain"]["synthetic"].is_object());

    let out = t.root.join("fit");
    let code = t.cmd(
        "fit",
        &out,
        &[
            "--set",
            "fit.optimizer.max_iterations=30",
            "--set",
            "fit.focal=35.0",
        ],
    );
    assert_eq!(code, EXIT_OK);
    let rep = read_json(&out.join("fit_report.json"));
    let fitted = rep["fitted"].as_array().unwrap().len();
    assert_eq!(fitted + rep["skipped"].as_u64().unwrap() as usize, 32);
    assert!(fitted > 0);
    let lib = dapose::synthgen::sample::load_library(&out.join("pose_library.json")).unwrap();
    assert_eq!(lib.len(), fitted);
}

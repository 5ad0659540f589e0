use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::process::{Command, Output};

use centermask::config::RunConfig;
use centermask::data::load_dataset;
use centermask::decode::{write_detections, Detection, DetectionRecord};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_centermask"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cli")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut run = RunConfig::default();
    run.model.input_size = (64, 64);
    run.data.scene.canvas = (64, 64);
    run.data.train_scenes = 8;
    run.data.eval_scenes = 2;
    run.optim.batch_size = 2;
    run.optim.steps = 2;
    run.out_dir = dir.join("run");
    let path = dir.join("run.toml");
    fs::write(&path, run.to_toml().unwrap()).unwrap();
    path
}

fn report_ap(dir: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    v["ap"].as_f64().unwrap()
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    assert_eq!(cli(&[]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    let out = cli(&["eval", "--detections", "/nonexistent/d.jsonl", "--dataset", "/nonexistent/ds"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let threads = Command::new(env!("CARGO_BIN_EXE_centermask"))
        .args(["generate", "--count", "1", "--out", "/tmp/unused"])
        .env("CENTERMASK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn eval_scores_empty_and_perfect_detections() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    assert!(cli(&["generate", "--count", "3", "--seed", "11", "--out", p(&ds)]).status.success());

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty-report");
    assert!(cli(&["eval", "--detections", p(&empty), "--dataset", p(&ds), "--out", p(&out)]).status.success());
    assert_eq!(report_ap(&out), 0.0);

    let records: Vec<DetectionRecord> = load_dataset(&ds)
        .unwrap()
        .flat_map(|s| {
            let s = s.unwrap();
            s.instances
                .iter()
                .map(|g| {
                    let det = Detection {
                        class_id: g.class_id,
                        score: 1.0,
                        center: g.center,
                        bbox: g.bbox,
                        mask: g.mask.clone(),
                    };
                    DetectionRecord::new(&s.id, &det)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let perfect = dir.path().join("perfect.jsonl");
    write_detections(&mut BufWriter::new(fs::File::create(&perfect).unwrap()), &records).unwrap();
    let out = dir.path().join("perfect-report");
    assert!(cli(&["eval", "--detections", p(&perfect), "--dataset", p(&ds), "--out", p(&out)]).status.success());
    assert_eq!(report_ap(&out), 1.0);

    fs::write(&empty, "{\"image_id\": \"9999\"").unwrap();
    assert_eq!(cli(&["eval", "--detections", p(&empty), "--dataset", p(&ds)]).status.code(), Some(2));
}

#[test]
fn train_then_infer_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cli(&["train", "--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("run").join("final.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("run").join("metrics.jsonl").exists());

    let ds = dir.path().join("ds");
    assert!(cli(&["generate", "--config", p(&cfg), "--count", "2", "--out", p(&ds)]).status.success());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        let r = cli(&["infer", "--checkpoint", p(&ckpt), "--images", p(&ds), "--out", p(o), "--overlays"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let da = fs::read(a.join("detections.jsonl")).unwrap();
    assert_eq!(da, fs::read(b.join("detections.jsonl")).unwrap());
    assert!(a.join("overlays").join("0000.png").exists());

    let rep = cli(&["eval", "--detections", p(&a.join("detections.jsonl")), "--dataset", p(&ds)]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn layerseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerseg")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "\
data.crop_h = 16
data.crop_w = 32
encoders.dim = 8
encoders.hidden = 4,8,8
decoding.mask_widths = 8,6
decoding.layer_widths = 8,6,4
train.batch_size = 4
train.total_steps = 4
train.checkpoint_every = 2
train.warmup_steps = 2
";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = ok(&layerseg(&["synth", "--n", "2", "--seed", "5", "--out", p(&data)]));
    let manifest = manifest.trim();
    assert!(Path::new(manifest).exists());

    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let ckpt = ok(&layerseg(&[
        "train",
        "--data",
        manifest,
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--preset",
        "desk",
        "--ablate",
        "sqn",
    ]));
    let ckpt = ckpt.trim();
    assert!(Path::new(ckpt).exists());
    assert!(run.join("train_log.jsonl").exists() && run.join("loss.png").exists());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let pred = dir.path().join("pred");
    for line in fs::read_to_string(manifest).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let image = data.join(rec["image"].as_str().unwrap());
        let polys = dir.path().join("polys.json");
        fs::write(&polys, rec["polygons"].to_string()).unwrap();
        let out =
            ok(&layerseg(&["infer", "--ckpt", ckpt, "--image", p(&image), "--polygons", p(&polys), "--out", p(&pred)]));
        assert!(out.contains("rqn=on sqn=off rep=on"), "{out}");
        let stem = image.file_stem().unwrap().to_str().unwrap();
        assert!(pred.join(format!("{stem}.png")).exists());
        assert!(pred.join(format!("{stem}.json")).exists());
        assert!(pred.join(format!("{stem}_r0.png")).exists());
    }

    let report = dir.path().join("report.txt");
    let out = ok(&layerseg(&["eval", "--pred", p(&pred), "--gt", manifest, "--report", p(&report)]));
    assert!(out.starts_with("fgIoU "), "{out}");
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("pooled") && text.contains("per-image mean"));
    assert!(report.with_extension("tsv").exists() && report.with_extension("png").exists());
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.no_such_key = 1\n").unwrap();
    let out = layerseg(&["train", "--data", "missing.jsonl", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = layerseg(&["train", "--data", "x", "--out", "y", "--set", "train.decay_factor=1.5"]);
    assert_eq!(out.status.code(), Some(2));

    // A manifest entry whose image cannot be read.
    let m = dir.path().join("m.jsonl");
    fs::write(&m, r#"{"image":"nope.png","polygons":[[[0,0],[4,0],[4,4],[0,4]]],"mask":"nope_mask.png"}"#).unwrap();
    let out = layerseg(&["eval", "--pred", p(dir.path()), "--gt", p(&m), "--report", p(&dir.path().join("r.txt"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = layerseg(&["synth", "--n", "two", "--seed", "1", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3_and_leaves_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = ok(&layerseg(&["synth", "--n", "2", "--seed", "9", "--out", p(&data)]));
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}train.warmup_steps = 1\ntrain.base_lr = 1e30\ntrain.total_steps = 6\n")).unwrap();
    let run = dir.path().join("run");
    let out =
        layerseg(&["train", "--data", manifest.trim(), "--config", p(&cfg), "--out", p(&run), "--preset", "desk"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step"), "{err}");
    assert!(run.join("nan_dump.json").exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let polys = dir.path().join("p.json");
    fs::write(&polys, "[]").unwrap();
    let out = layerseg(&[
        "infer",
        "--ckpt",
        "absent.safetensors",
        "--image",
        "a.png",
        "--polygons",
        p(&polys),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

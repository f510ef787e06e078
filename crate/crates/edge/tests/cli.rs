use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cactus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cactus")).args(args).output().expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let mut full = vec!["--format", "json"];
    full.extend_from_slice(args);
    let out = cactus(&full);
    // 2 marks a rejected input, which still prints a full report.
    assert!(matches!(out.status.code(), Some(0 | 2)), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn init(dir: &TempDir, name: &str, arch: &str, size: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(name);
    let out = cactus(&[
        "init-model",
        "--arch",
        arch,
        "--input-size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    path
}

fn solid_png(dir: &TempDir, name: &str, rgb: [u8; 3]) -> PathBuf {
    let path = dir.path().join(name);
    image::RgbImage::from_pixel(40, 30, image::Rgb(rgb)).save(&path).unwrap();
    path
}

fn noise_png(dir: &TempDir, name: &str) -> PathBuf {
    let path = dir.path().join(name);
    image::RgbImage::from_fn(80, 80, |x, y| image::Rgb([(x * 3) as u8, (y * 3) as u8, ((x * y) % 251) as u8]))
        .save(&path)
        .unwrap();
    path
}

#[test]
fn init_model_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = init(&dir, "a.cact", "cnn-lite", 64, 7);
    let b = init(&dir, "b.cact", "cnn-lite", 64, 7);
    let c = init(&dir, "c.cact", "cnn-lite", 64, 8);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let r = json(&["init-model", "--arch", "mobilevit-xs", "--out", p(&dir.path().join("m.cact"))]);
    assert_eq!(r["params"], 2_202_947);
}

#[test]
fn unknown_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = cactus(&["init-model", "--arch", "resnet", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("resnet"));
}

#[test]
fn classify_reports_a_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let fast = init(&dir, "fast.cact", "cnn-lite", 64, 1);
    let precise = init(&dir, "precise.cact", "mobilevit-xs", 64, 2);
    let img = noise_png(&dir, "x.png");

    let r = json(&["classify", "--model", p(&fast), "--image", p(&img)]);
    let probs = r["probabilities"].as_array().unwrap();
    assert_eq!(probs.len(), 3);
    let sum: f64 = probs.iter().map(|q| q["probability"].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert_eq!(r["tier"], "fast");

    let r =
        json(&["classify", "--model", p(&fast), "--precise-model", p(&precise), "--image", p(&img), "--tau", "1.0"]);
    assert_eq!(r["tier"], "escalated");
    let r =
        json(&["classify", "--model", p(&fast), "--precise-model", p(&precise), "--image", p(&img), "--tau", "0.01"]);
    assert_eq!(r["tier"], "fast");
}

#[test]
fn classify_rejects_invalid_tau_and_mismatched_models() {
    let dir = tempfile::tempdir().unwrap();
    let fast = init(&dir, "fast.cact", "cnn-lite", 64, 1);
    let other = init(&dir, "other.cact", "cnn-lite", 128, 1);
    let img = noise_png(&dir, "x.png");
    let out = cactus(&["classify", "--model", p(&fast), "--image", p(&img), "--tau", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cactus(&["classify", "--model", p(&fast), "--precise-model", p(&other), "--image", p(&img)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("input shapes"));
    let out = cactus(&["classify", "--model", p(&fast), "--image", p(&dir.path().join("missing.png"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.png"));
}

#[test]
fn non_cactus_input_exits_with_rejection_code() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "mean.cact", "channel-mean", 16, 0);
    let blue = solid_png(&dir, "blue.png", [0, 0, 255]);
    let out = cactus(&["--format", "json", "classify", "--model", p(&model), "--image", p(&blue), "--tau", "0.5"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["label"], "NoCactus");
    assert_eq!(r["rejected"], true);

    let green = solid_png(&dir, "green.png", [0, 255, 0]);
    let out = cactus(&["classify", "--model", p(&model), "--image", p(&green), "--tau", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("Healthy"));
}

#[test]
fn quantize_shrinks_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "m.cact", "cnn-lite", 64, 3);
    let f32_len = std::fs::metadata(&model).unwrap().len() as f64;

    let half = dir.path().join("m16.cact");
    let r = json(&["quantize", "--model", p(&model), "--mode", "f16", "--out", p(&half)]);
    assert_eq!(r["compression_ratio"], 2.0);
    let ratio = f32_len / std::fs::metadata(&half).unwrap().len() as f64;
    assert!((ratio - 2.0).abs() < 0.04, "{ratio}");

    let int8 = dir.path().join("m8.cact");
    let r = json(&["quantize", "--model", p(&model), "--mode", "i8", "--out", p(&int8)]);
    assert_eq!(r["all_within_half_step"], true);
    assert!(r["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| t["zero_point"] == 0 && t["scale"].as_f64().unwrap() > 0.0));
    let ratio = f32_len / std::fs::metadata(&int8).unwrap().len() as f64;
    assert!((ratio - 4.0).abs() < 0.2, "{ratio}");

    let img = noise_png(&dir, "x.png");
    for m in [&half, &int8] {
        json(&["classify", "--model", p(m), "--image", p(&img)]);
    }

    let out = cactus(&["quantize", "--model", p(&half), "--mode", "i8", "--out", p(&dir.path().join("again.cact"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("f16"), "{}", stderr(&out));
}

#[test]
fn explain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "m.cact", "cnn-lite", 64, 4);
    let img = noise_png(&dir, "x.png");
    let args = |out: &Path, heat: &Path| {
        vec![
            "explain".to_string(),
            "--model".into(),
            p(&model).into(),
            "--image".into(),
            p(&img).into(),
            "--samples".into(),
            "64".into(),
            "--rows".into(),
            "4".into(),
            "--cols".into(),
            "4".into(),
            "--class".into(),
            "healthy".into(),
            "--out".into(),
            p(out).into(),
            "--heatmap".into(),
            p(heat).into(),
        ]
    };
    let (o1, h1, o2, h2) =
        (dir.path().join("1.json"), dir.path().join("1.pgm"), dir.path().join("2.json"), dir.path().join("2.pgm"));
    for (o, h) in [(&o1, &h1), (&o2, &h2)] {
        let a = args(o, h);
        let out = cactus(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    assert_eq!(std::fs::read(&h1).unwrap(), std::fs::read(&h2).unwrap());

    let r: Value = serde_json::from_slice(&std::fs::read(&o1).unwrap()).unwrap();
    assert_eq!(r["target_class"], "Healthy");
    let segs = r["segments"].as_array().unwrap();
    assert_eq!(segs.len(), 16);
    assert_eq!(segs[15]["y1"], 64);
    let pgm = std::fs::read(&h1).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 64 * 64);

    let out = cactus(&["explain", "--model", p(&model), "--image", p(&img), "--class", "orchid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("orchid"));
}

fn write_manifest(dir: &TempDir, name: &str, lines: &[String]) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn eval_reproduces_a_hand_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "mean.cact", "channel-mean", 16, 0);
    let red = solid_png(&dir, "red.png", [255, 0, 0]);
    let green = solid_png(&dir, "green.png", [0, 255, 0]);
    let blue = solid_png(&dir, "blue.png", [0, 0, 255]);

    let perfect: Vec<String> = [(&red, "affected"), (&green, "healthy"), (&blue, "no_cactus")]
        .iter()
        .map(|(img, l)| format!("{}\t{l}", p(img)))
        .collect();
    let r = json(&[
        "eval",
        "--model",
        p(&model),
        "--manifest",
        p(&write_manifest(&dir, "perfect.tsv", &perfect)),
        "--tau",
        "0.5",
    ]);
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["macro_f1"], 1.0);

    // Rows are true classes: red images predict affected, green healthy, blue no_cactus.
    let mut lines = vec!["# hand-built".to_string(), String::new()];
    let mut add = |img: &Path, label: &str, n: usize| lines.extend((0..n).map(|_| format!("{}\t{label}", p(img))));
    add(&red, "affected", 5);
    add(&green, "affected", 1);
    add(&red, "healthy", 2);
    add(&green, "healthy", 6);
    add(&blue, "no_cactus", 6);
    let r = json(&[
        "eval",
        "--model",
        p(&model),
        "--manifest",
        p(&write_manifest(&dir, "hand.tsv", &lines)),
        "--tau",
        "0.5",
    ]);
    let confusion: Vec<Vec<u64>> = serde_json::from_value(r["confusion"].clone()).unwrap();
    assert_eq!(confusion, vec![vec![5, 1, 0], vec![2, 6, 0], vec![0, 0, 6]]);
    assert_eq!(r["samples"], 20);
    assert!((r["accuracy"].as_f64().unwrap() - 17.0 / 20.0).abs() < 1e-12);
    let f1: Vec<f64> = r["per_class"].as_array().unwrap().iter().map(|c| c["f1"].as_f64().unwrap()).collect();
    let expected = [2.0 * 5.0 / (2.0 * 5.0 + 2.0 + 1.0), 2.0 * 6.0 / (2.0 * 6.0 + 1.0 + 2.0), 1.0];
    for (a, b) in f1.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!((r["macro_f1"].as_f64().unwrap() - expected.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(r["escalated"], 0);
}

#[test]
fn eval_lists_every_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "mean.cact", "channel-mean", 16, 0);
    let lines = vec!["gone-1.png\thealthy".to_string(), "gone-2.png\taffected".to_string()];
    let out = cactus(&["eval", "--model", p(&model), "--manifest", p(&write_manifest(&dir, "m.tsv", &lines))]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("gone-1.png") && err.contains("gone-2.png"), "{err}");

    let empty = write_manifest(&dir, "empty.tsv", &["# nothing".to_string()]);
    let out = cactus(&["eval", "--model", p(&model), "--manifest", p(&empty)]);
    assert_eq!(out.status.code(), Some(1));

    let blue = solid_png(&dir, "blue.png", [0, 0, 255]);
    let bad = write_manifest(&dir, "bad.tsv", &[format!("{}\tsucculent", p(&blue))]);
    let out = cactus(&["eval", "--model", p(&model), "--manifest", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("succulent"));
}

#[test]
fn bench_reports_ordered_percentiles() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "m.cact", "cnn-lite", 64, 5);
    let r = json(&["bench", "--model", p(&model), "--iters", "5", "--warmup", "1"]);
    assert!(r["p95_ms"].as_f64().unwrap() >= r["p50_ms"].as_f64().unwrap());
    assert!(r["max_ms"].as_f64().unwrap() >= r["p95_ms"].as_f64().unwrap());
    assert_eq!(r["iters"], 5);
    let r = json(&["bench", "--model", p(&model), "--iters", "1", "--warmup", "0"]);
    assert_eq!(r["p50_ms"], r["mean_ms"]);
    let out = cactus(&["bench", "--model", p(&model), "--iters", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_lists_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(&dir, "m.cact", "cnn-lite", 64, 6);
    let r = json(&["inspect", "--model", p(&model)]);
    assert_eq!(r["arch"], "cnn-lite");
    assert_eq!(r["params"], 1_146_179);
    assert_eq!(r["input_shape"], serde_json::json!([1, 64, 64, 3]));
    let tensors = r["tensors"].as_array().unwrap();
    assert_eq!(tensors.len(), 14);
    assert!(tensors.iter().all(|t| t["dtype"] == "f32" && t["offset"].as_u64().unwrap() % 64 == 0));

    let out = cactus(&["inspect", "--model", p(&model)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("head.weight"));

    let junk = dir.path().join("junk.cact");
    std::fs::write(&junk, b"not a model").unwrap();
    let out = cactus(&["inspect", "--model", p(&junk)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("magic"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use feds_core::codec_networks::ImageBuffer;
use serde_json::Value;

const BUDGET: Duration = Duration::from_secs(60);

fn feds(args: &[&str]) -> Output {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_feds"))
        .args(args)
        .env_remove("FEDS_SEED")
        .output()
        .expect("spawn feds");
    assert!(t0.elapsed() < BUDGET, "`{}` took {:?}", args.join(" "), t0.elapsed());
    out
}

fn ok(args: &[&str]) -> String {
    let out = feds(args);
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    feds(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Replace every leaf with its JSON type name and arrays with their first element.
fn schema(v: &Value) -> Value {
    match v {
        Value::Null => "null".into(),
        Value::Bool(_) => "bool".into(),
        Value::Number(_) => "number".into(),
        Value::String(_) => "string".into(),
        Value::Array(a) => Value::Array(a.first().map(schema).into_iter().collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, v)| (k.clone(), schema(v))).collect()),
    }
}

fn round(v: &Value) -> Value {
    match v {
        Value::Number(n) => serde_json::json!((n.as_f64().unwrap() * 1e6).round() / 1e6),
        Value::Array(a) => Value::Array(a.iter().map(round).collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, v)| (k.clone(), round(v))).collect()),
        other => other.clone(),
    }
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir(&data).unwrap();
        for i in 0..3u32 {
            let px = (0..3 * 64 * 64)
                .map(|k| ((k as u32 * 37 + i * 101) % 256) as f32 / 255.0)
                .collect();
            ImageBuffer::new(64, 64, px).unwrap().save_png(&data.join(format!("img{i}.png"))).unwrap();
        }
        std::fs::write(
            dir.path().join("toy.cfg"),
            "train.batch_size=2\ndata.crop_size=64\ndata.augment=flip\n",
        )
        .unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["compress", "--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["bdrate", "--bogus"]), 1);
    assert_eq!(code(&[]), 1);
}

#[test]
fn bdrate_golden() {
    let out = ok(&[
        "bdrate",
        "--anchor",
        s(&golden("anchor.csv")),
        "--test",
        s(&golden("test.csv")),
        "--quality",
        "psnr",
        "--json",
    ]);
    let got: Value = serde_json::from_str(&out).unwrap();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(golden("bdrate.json")).unwrap()).unwrap();
    assert_eq!(round(&got), round(&want));
    let text = ok(&["bdrate", "--anchor", s(&golden("anchor.csv")), "--test", s(&golden("test.csv"))]);
    assert!(text.contains("-10.000%"), "{text}");
    assert_eq!(
        code(&["bdrate", "--anchor", s(&golden("anchor.csv")), "--test", "/nonexistent.csv"]),
        1
    );
}

#[test]
fn pipeline_end_to_end() {
    let ws = Workspace::new();
    let (cfg, data) = (ws.p("toy.cfg"), ws.p("data"));
    let common = ["--toy", "--config", s(&cfg), "--data", s(&data), "--scale", "0.00001", "--seed", "3"];

    let teacher = ws.p("teacher.ckpt");
    let log = ws.p("teacher.jsonl");
    let mut args = vec!["train-teacher", "--out", s(&teacher), "--log", s(&log), "--json"];
    args.extend(common);
    let summary: Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(summary["stage"], "teacher");
    assert_eq!(summary["iterations"], 2);
    let lines = std::fs::read_to_string(&log).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["iter", "stage", "D", "R_y", "R_z", "L_out", "L_feat", "L_lat", "total", "lr"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }

    let student = ws.p("student.ckpt");
    let mut args = vec!["distill", "--out", s(&student)];
    args.extend(common);
    assert_eq!(code(&args), 1, "distill without a teacher must fail");
    let mut args = vec!["finetune", "--student-ckpt", s(&teacher), "--out", s(&student)];
    args.extend(common);
    assert_eq!(code(&args), 1, "finetune from a teacher checkpoint must fail");

    let mut args = vec!["distill", "--teacher-ckpt", s(&teacher), "--out", s(&student)];
    args.extend(common);
    ok(&args);
    let tuned = ws.p("tuned.ckpt");
    let mut args = vec!["finetune", "--student-ckpt", s(&student), "--out", s(&tuned)];
    args.extend(&common[1..]);
    ok(&args);

    let img = data.join("img1.png");
    let stream = ws.p("img1.feds");
    let out = ok(&["compress", "--model", s(&tuned), "--in", s(&img), "--out", s(&stream), "--json"]);
    let c: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(c["bytes"], std::fs::metadata(&stream).unwrap().len());
    let recon = ws.p("img1.recon.png");
    let text = ok(&[
        "decompress",
        "--model",
        s(&tuned),
        "--in",
        s(&stream),
        "--out",
        s(&recon),
        "--reference",
        s(&img),
    ]);
    assert!(text.contains("PSNR") && text.contains("bpp"), "{text}");
    assert_eq!(ImageBuffer::load(&recon).unwrap().height(), 64);
    // Wrong model for the stream.
    assert_eq!(code(&["decompress", "--model", s(&teacher), "--in", s(&stream), "--out", s(&recon)]), 1);

    let report = ws.p("report");
    let out = ok(&["eval", "--model", s(&tuned), "--data", s(&data), "--out", s(&report), "--json"]);
    let ev: Value = serde_json::from_str(&out).unwrap();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(golden("eval_schema.json")).unwrap()).unwrap();
    assert_eq!(schema(&ev), want);
    assert_eq!(ev["images"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "image,bpp,psnr_db,msssim,msssim_db,enc_s,dec_s");
    assert_eq!(csv.lines().count(), 4);

    let maps = ws.p("maps");
    ok(&["entropy-map", "--model", s(&tuned), "--in", s(&data), "--out", s(&maps), "--ranks", "1,5,10"]);
    let index = std::fs::read_to_string(maps.join("heatmaps.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 3 * 3);
    let pgm = std::fs::read(maps.join(index.lines().nth(1).unwrap().rsplit(',').next().unwrap())).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(code(&["entropy-map", "--model", s(&tuned), "--in", s(&img), "--out", s(&maps), "--ranks", "11"]), 1);
}

#[test]
fn bad_inputs_are_user_errors() {
    let ws = Workspace::new();
    let junk = ws.p("junk.ckpt");
    std::fs::write(&junk, b"garbage").unwrap();
    assert_eq!(
        code(&["compress", "--model", s(&junk), "--in", s(&ws.p("data/img0.png")), "--out", s(&ws.p("x.feds"))]),
        1
    );
    assert_eq!(code(&["train-teacher", "--toy", "--out", s(&ws.p("t.ckpt"))]), 1, "no data directory");
}

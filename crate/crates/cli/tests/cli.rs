use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vtts(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vtts"));
    c.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn assert_single_line_error(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: "), "{err}");
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().expect("output")).unwrap()
}

const TINY_RUN: &str = r#"
seed = 3
checkpoint_every = 2

[model]
d_model = 16
n_heads = 2
n_layers = 1
speech_embed_dim = 8

[optimizer]
lr = 3e-3
warmup = 2
total_steps = 4
batch_size = 2

[data]
n_train = 8
n_eval = 2
"#;

fn synth(dir: &Path, n_train: usize, n_eval: usize) {
    ok(&vtts(
        &[
            "synth-data",
            "--out",
            dir.to_str().unwrap(),
            "--n-train",
            &n_train.to_string(),
            "--n-eval",
            &n_eval.to_string(),
        ],
        &[],
    ));
}

#[test]
fn synth_data_layout() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    synth(&corpus, 3, 2);
    let manifest = fs::read_to_string(corpus.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    for f in ["world.json", "vocab.json", "codebook.txt", "speakers/0.vtt", "video/train-00000.vtt", "speech/eval-00001.dmel", "align/train-00002.tsv"] {
        assert!(corpus.join(f).exists(), "{f}");
    }
    // regenerating is byte identical
    let again = dir.path().join("again");
    synth(&again, 3, 2);
    assert_eq!(manifest, fs::read_to_string(again.join("manifest.jsonl")).unwrap());
    assert_eq!(
        fs::read(corpus.join("speech/train-00001.dmel")).unwrap(),
        fs::read(again.join("speech/train-00001.dmel")).unwrap()
    );
}

#[test]
fn inspect_plan_golden() {
    let base = ["inspect-plan", "--text", "ab", "--video-frames", "2", "--speech-frames", "3"];
    for (layout, pos, golden) in [
        ("vt-ordered", "global", "vt_ordered_global.txt"),
        ("tv-streaming", "time-aligned", "tv_streaming_time_aligned.txt"),
    ] {
        let mut args = base.to_vec();
        args.extend(["--layout", layout, "--pos", pos]);
        let want = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(golden)).unwrap();
        assert_eq!(ok(&vtts(&args, &[])), want, "{golden}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let out = vtts(
        &["generate", "--checkpoint", "x", "--corpus", "y", "--out", "z", "--drop-video", "--drop-text"],
        &[],
    );
    assert_single_line_error(&out, 2);
    assert_single_line_error(&vtts(&["no-such-command"], &[]), 2);
    assert_single_line_error(&vtts(&["train"], &[]), 2);
    assert_single_line_error(&vtts(&["train", "--config", "missing.toml"], &[("VTTS_THREADS", "0")]), 2);
}

#[test]
fn contract_violations_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 2\n").unwrap();
    assert_single_line_error(&vtts(&["train", "--config", cfg.to_str().unwrap()], &[]), 1);
    let cfg = dir.path().join("bad_lr.toml");
    fs::write(&cfg, "[optimizer]\nlr = -1.0\n").unwrap();
    assert_single_line_error(&vtts(&["train", "--config", cfg.to_str().unwrap()], &[]), 1);
    assert_single_line_error(&vtts(&["inspect-plan", "--speech-frames", "2", "--layout", "tv-ordered"], &[]), 1);
}

fn losses(metrics: &Path) -> Vec<(u64, f64)> {
    fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "train")
        .map(|v| (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap()))
        .collect()
}

#[test]
fn train_resume_generate_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY_RUN).unwrap();
    let full = dir.path().join("full");
    ok(&vtts(&["train", "--config", cfg.to_str().unwrap(), "--run-dir", full.to_str().unwrap()], &[]));
    let unbroken = losses(&full.join("metrics.jsonl"));
    assert_eq!(unbroken.len(), 4);

    // interrupted after two steps, then resumed through the env-var run dir
    let part = dir.path().join("part");
    ok(&vtts(
        &["train", "--config", cfg.to_str().unwrap(), "--until", "2"],
        &[("VTTS_RUN_DIR", part.to_str().unwrap())],
    ));
    ok(&vtts(
        &["train", "--resume", part.join("ckpt-000002.vtt").to_str().unwrap(), "--run-dir", part.to_str().unwrap()],
        &[("VTTS_THREADS", "2")],
    ));
    let resumed = losses(&part.join("metrics.jsonl"));
    assert_eq!(resumed.len(), 4);
    for (a, b) in resumed.iter().zip(&unbroken) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() <= 1e-6, "{a:?} vs {b:?}");
    }
    assert_eq!(
        fs::read(full.join("ckpt-000004.vtt")).unwrap(),
        fs::read(part.join("ckpt-000004.vtt")).unwrap()
    );

    // rerunning from the resolved config reproduces the metrics
    let rerun = dir.path().join("rerun");
    ok(&vtts(
        &["train", "--config", full.join("config.toml").to_str().unwrap(), "--run-dir", rerun.to_str().unwrap()],
        &[],
    ));
    assert_eq!(losses(&rerun.join("metrics.jsonl")), unbroken);

    let corpus = dir.path().join("corpus");
    synth(&corpus, 2, 3);
    let gen = dir.path().join("gen");
    let out = ok(&vtts(
        &[
            "generate",
            "--checkpoint",
            full.join("last.vtt").to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            gen.to_str().unwrap(),
            "--max-frames",
            "6",
            "--mel",
            "--wav-iterations",
            "2",
        ],
        &[],
    ));
    let summary = last_json(&out);
    assert_eq!(summary["n"], 3);
    assert!(summary["mean_frames"].as_f64().unwrap() <= 6.0);
    assert_eq!(fs::read_to_string(gen.join("generated.jsonl")).unwrap().lines().count(), 3);
    assert!(gen.join("speech/eval-00000.dmel").exists() && gen.join("mel/eval-00000.mel").exists());

    let out = ok(&vtts(
        &["eval-timesync", "--corpus", corpus.to_str().unwrap(), "--gen", gen.to_str().unwrap()],
        &[],
    ));
    assert_eq!(last_json(&out)["summary"], true);

    // generated speech equal to the ground truth scores exactly zero
    let perfect = dir.path().join("perfect");
    fs::create_dir_all(perfect.join("speech")).unwrap();
    for id in ["eval-00000", "eval-00001", "eval-00002"] {
        fs::copy(corpus.join(format!("speech/{id}.dmel")), perfect.join(format!("speech/{id}.dmel"))).unwrap();
    }
    let hist = dir.path().join("hist.csv");
    let out = ok(&vtts(
        &[
            "eval-timesync",
            "--corpus",
            corpus.to_str().unwrap(),
            "--gen",
            perfect.to_str().unwrap(),
            "--histogram",
            hist.to_str().unwrap(),
        ],
        &[],
    ));
    let s = last_json(&out);
    assert_eq!(s["mean"].as_f64(), Some(0.0));
    assert_eq!(s["utterances"], 3);
    assert!(fs::read_to_string(hist).unwrap().starts_with("bin_start,bin_end,signed,absolute"));
}

#[test]
fn codec_roundtrip_reports_bound() {
    let dir = tempfile::tempdir().unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    for (k, freq) in [220.0f64, 440.0, 1000.0].iter().enumerate() {
        let mut w = hound::WavWriter::create(dir.path().join(format!("tone{k}.wav")), spec).unwrap();
        for i in 0..8000 {
            let t = i as f64 / 16000.0;
            let amp = 0.2 + 0.6 * t;
            w.write_sample((amp * (2.0 * std::f64::consts::PI * freq * t).sin() * 32000.0) as i16).unwrap();
        }
        w.finalize().unwrap();
    }
    let out = ok(&vtts(&["codec-roundtrip", "--audio-dir", dir.path().to_str().unwrap()], &[]));
    let r = last_json(&out);
    assert_eq!(r["files"], 3);
    assert_eq!(r["within_bound"], true);
    assert!(r["max_abs_error"].as_f64().unwrap() <= r["bound"].as_f64().unwrap());

    let empty = tempfile::tempdir().unwrap();
    assert_single_line_error(&vtts(&["codec-roundtrip", "--audio-dir", empty.path().to_str().unwrap()], &[]), 1);
}

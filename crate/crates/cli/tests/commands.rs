use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypercol::experiment::{ExperimentConfig, Task};
use hypercol::hypercolumn::TapEntry;
use hypercol::io::write_map_file;
use hypercol::synthdata::CandidateNoise;
use hypercol::tensor::FeatureMap;

fn hypercol(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hypercol"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("HYPERCOL_THREADS", n.to_string()),
        None => cmd.env_remove("HYPERCOL_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small SDS experiment: zero-noise candidates, fc-only, K=1.
fn smoke_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Task::Sds);
    c.output = dir.join("run");
    c.data.train_scenes = 6;
    c.data.test_scenes = 3;
    c.data.noise = CandidateNoise::zero(2);
    c.hypercolumn.entries = vec![TapEntry::new("fc", 1)];
    c.grid.k = 1;
    c.sampling.pixels_per_candidate = 16;
    c
}

fn write_config(dir: &Path, name: &str, c: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, c.to_toml().unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_emits_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let c = smoke_config(tmp.path());
    let cfg = write_config(tmp.path(), "smoke.toml", &c);
    for cmd in ["generate", "train", "eval"] {
        ok(&hypercol(&[cmd, "--config", s(&cfg)], None));
    }
    let run = &c.output;
    for f in [
        "data/manifest.json",
        "data/annotations.jsonl",
        "data/candidates.jsonl",
        "data/images/00000.hcfm",
        "model/manifest.json",
        "model/heads/figure.hcck",
        "eval/metrics.json",
        "eval/metrics.csv",
        "eval/pr_ap_r_0.5.csv",
        "eval/predictions.jsonl",
        "eval/heatmaps/scene00006_image.pgm",
        "eval/heatmaps/scene00006_det00_figure.pgm",
        "eval/heatmaps/scene00006_det00_figure_image.pgm",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let pgm = fs::read(run.join("eval/heatmaps/scene00006_det00_figure.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n50 50\n255\n"));
    assert_eq!(pgm.len(), b"P5\n50 50\n255\n".len() + 2500);

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(run.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], c.hash().unwrap());
    assert_eq!(metrics["library"], env!("CARGO_PKG_VERSION"));
    assert_eq!(metrics["test_scenes"], 3);
    let ap = metrics["ap_r_05"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    let csv = fs::read_to_string(run.join("eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    assert_eq!(fs::read_to_string(run.join("eval/predictions.jsonl")).unwrap().lines().count(), 3);

    ok(&hypercol(&["predict", "--config", s(&cfg)], None));
    assert!(run.join("predict/predictions.jsonl").is_file());
    assert_eq!(
        fs::read(run.join("predict/predictions.jsonl")).unwrap(),
        fs::read(run.join("eval/predictions.jsonl")).unwrap()
    );
}

#[test]
fn metric_json_is_identical_across_reruns_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in [Some(1), Some(1), Some(3), None].into_iter().enumerate() {
        let mut c = smoke_config(tmp.path());
        c.output = tmp.path().join(format!("run{i}"));
        let cfg = write_config(tmp.path(), &format!("c{i}.toml"), &c);
        for cmd in ["generate", "train", "eval"] {
            ok(&hypercol(&[cmd, "--config", s(&cfg)], threads));
        }
        outputs.push(fs::read(c.output.join("eval/metrics.json")).unwrap());
    }
    for o in &outputs[1..] {
        assert_eq!(o, &outputs[0]);
    }
}

#[test]
fn eval_with_wrong_dimension_model_names_blocks() {
    let tmp = tempfile::tempdir().unwrap();
    let c = smoke_config(tmp.path());
    let cfg = write_config(tmp.path(), "fc.toml", &c);
    ok(&hypercol(&["generate", "--config", s(&cfg)], None));
    ok(&hypercol(&["train", "--config", s(&cfg)], None));

    let mut wide = c.clone();
    wide.hypercolumn.entries = vec![TapEntry::new("pool2", 3), TapEntry::new("fc", 1)];
    let wide_cfg = write_config(tmp.path(), "wide.toml", &wide);
    let out = hypercol(&["eval", "--config", s(&wide_cfg)], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hash mismatch"), "{}", stderr(&out));

    let out = hypercol(&["eval", "--config", s(&wide_cfg), "--force"], None);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("shape mismatch"), "{err}");
    assert!(err.contains("fc(n=1)") && err.contains("pool2(n=3)"), "{err}");
}

#[test]
fn hash_mismatch_is_refused_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let c = smoke_config(tmp.path());
    let cfg = write_config(tmp.path(), "a.toml", &c);
    ok(&hypercol(&["generate", "--config", s(&cfg)], None));
    ok(&hypercol(&["train", "--config", s(&cfg)], None));

    let out = hypercol(&["eval", "--config", s(&cfg), "--seed", "7"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hash mismatch"));
    ok(&hypercol(&["eval", "--config", s(&cfg), "--seed", "7", "--force"], None));

    let mut other = c.clone();
    other.data.noise.seed = 99;
    let other_cfg = write_config(tmp.path(), "b.toml", &other);
    let out = hypercol(&["train", "--config", s(&other_cfg)], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hash mismatch"));
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hypercol(&["train"], None).status.code(), Some(1));
    assert_eq!(hypercol(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(hypercol(&["--help"], None).status.code(), Some(0));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "task = \"sds\"\nseed = 0\nunknown_key = 3\n").unwrap();
    let out = hypercol(&["train", "--config", s(&bad)], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown_key"), "{}", stderr(&out));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(hypercol(&["train", "--config", s(&missing)], None).status.code(), Some(1));

    let c = smoke_config(tmp.path());
    let cfg = write_config(tmp.path(), "ok.toml", &c);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hypercol"));
    let out = cmd
        .args(["generate", "--config", s(&cfg)])
        .env("HYPERCOL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let c = smoke_config(tmp.path());
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let out = hypercol(&["train", "--config", s(&cfg)], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("manifest.json") || stderr(&out).contains("No such file"));
}

#[test]
fn non_finite_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let c = smoke_config(tmp.path());
    let cfg = write_config(tmp.path(), "c.toml", &c);
    ok(&hypercol(&["generate", "--config", s(&cfg)], None));
    let (h, w) = (c.data.scene.height, c.data.scene.width);
    for i in 0..c.data.train_scenes {
        let img = c.output.join(format!("data/images/{i:05}.hcfm"));
        write_map_file(&img, &FeatureMap::filled(h, w, 1, f64::NAN)).unwrap();
    }
    let out = hypercol(&["train", "--config", s(&cfg)], None);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn init_writes_a_loadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    for task in ["sds", "keypoint", "part", "system2"] {
        let p = tmp.path().join(format!("{task}.toml"));
        ok(&hypercol(&["init", "--task", task, "--out", s(&p)], None));
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.task.name(), task);
    }
}

#[test]
fn ablate_selected_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = smoke_config(tmp.path());
    c.hypercolumn.entries = vec![TapEntry::new("pool2", 1), TapEntry::new("fc", 1)];
    let cfg = write_config(tmp.path(), "c.toml", &c);
    ok(&hypercol(&["generate", "--config", s(&cfg)], None));
    let out = hypercol(&["ablate", "--config", s(&cfg), "--variants", "nonsense"], None);
    assert_eq!(out.status.code(), Some(1));
    ok(&hypercol(&["ablate", "--config", s(&cfg), "--variants", "full,fc_only"], None));
    let csv = fs::read_to_string(c.output.join("ablation/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("variant,taps,k,"));
    assert!(lines[1].starts_with("full,pool2+fc,1,") && lines[1].ends_with(','));
    assert!(lines[2].starts_with("fc_only,fc,1,"));
    let p: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert!(c.output.join("ablation/ablation.json").is_file());
}

#[test]
fn bench_reports_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("bench");
    let out = hypercol(
        &["bench", "--channels", "16", "--size", "4", "--resolution", "20", "--classifiers", "4", "--trials", "3", "--out", s(&out_dir)],
        None,
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("speedup"));
    let csv = fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(hypercol(&["bench", "--trials", "1", "--out", s(&out_dir)], None).status.code(), Some(1));
}

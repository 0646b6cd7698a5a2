use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use recipe_debias::eval::{parse_rendered, ReportFile};
use tempfile::TempDir;

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recipe-debias"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: TempDir,
    config: PathBuf,
    corpus: PathBuf,
    run: PathBuf,
}

/// Writes `config_text`, synthesizes its corpus and trains into `run/`.
fn trained(config_text: &str) -> Run {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, config_text).unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let out = bin(&["synth", "--config", s(&config), "--out", s(&corpus)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("run");
    let out = bin(&["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    Run { dir, config, corpus, run }
}

#[test]
fn synth_writes_every_pair_deterministically() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, TINY).unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert_eq!(code(&bin(&["synth", "--config", s(&config), "--out", s(&a)])), 0);
    assert_eq!(code(&bin(&["synth", "--config", s(&config), "--out", s(&b)])), 0);
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(text.iter().filter(|&&c| c == b'\n').count(), 200);

    let again = bin(&["synth", "--config", s(&config), "--out", s(&a)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&bin(&["synth", "--config", s(&config), "--out", s(&a), "--force"])), 0);
}

#[test]
fn overlap_above_one_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, TINY.replace("n_pairs = 100", "n_pairs = 100\ningredient_overlap = 1.5")).unwrap();
    let out = bin(&["synth", "--config", s(&config), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ingredient_overlap"), "{}", stderr(&out));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn tiny_run_is_fast_and_logs_every_epoch() {
    let t = Instant::now();
    let r = trained(TINY);
    assert!(t.elapsed() < Duration::from_secs(60));
    let metrics = fs::read_to_string(r.run.join("metrics.csv")).unwrap();
    // two pre-training plus two end-to-end epochs, after the header
    assert_eq!(metrics.lines().count(), 1 + 4);
    for step in ["step1", "step2", "step3"] {
        assert!(r.run.join("checkpoints").join(step).join("encoder.json").exists());
    }
    assert!(r.run.join("checkpoints/step3/dictionaries").read_dir().unwrap().count() >= 4);
}

#[test]
fn resume_checks_the_config_hash() {
    let r = trained(TINY);
    let args = |c: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            s(c).into(),
            "--corpus".into(),
            s(&r.corpus).into(),
            "--out".into(),
            s(&r.run).into(),
        ]
    };
    let plain: Vec<String> = args(&r.config);
    let refs: Vec<&str> = plain.iter().map(String::as_str).collect();
    assert_eq!(code(&bin(&refs)), 2, "existing run dir needs --force or --resume");

    let mut resume = refs.clone();
    resume.push("--resume");
    let out = bin(&resume);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let changed = r.dir.path().join("changed.toml");
    fs::write(&changed, TINY.replace("seed = 3", "seed = 4")).unwrap();
    let plain = args(&changed);
    let mut refs: Vec<&str> = plain.iter().map(String::as_str).collect();
    refs.push("--resume");
    let out = bin(&refs);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hash"), "{}", stderr(&out));
}

fn csv_keys(path: &Path) -> Vec<(String, String, String)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[2].to_string(), r[3].to_string(), r[4].to_string())
        })
        .collect()
}

#[test]
fn eval_emits_runs_per_size_and_comparable_modes() {
    let r = trained(&TINY.replace("n_pairs = 100", "n_pairs = 400"));
    for mode in ["baseline", "both"] {
        let out = bin(&["eval", "--run", s(&r.run), "--mode", mode, "--sizes", "100,200"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let reports = r.run.join("reports");
    let base = csv_keys(&reports.join("baseline-oracle.csv"));
    let both = csv_keys(&reports.join("both-oracle.csv"));
    assert_eq!(base, both);
    let i2r = base.iter().filter(|k| k.0 == "image-to-recipe").count();
    // configured runs = 3
    assert_eq!(i2r, 2 * 3);

    let out = bin(&["eval", "--run", s(&r.run), "--sizes", "100000"]);
    assert_eq!(code(&out), 2);

    let out = bin(&["eval", "--run", s(&r.run), "--router", "classifier", "--sizes", "100"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = ReportFile::read_json(fs::File::open(reports.join("both-classifier.json")).unwrap()).unwrap();
    let cm = report.confusion.expect("classifier routing records a confusion matrix");
    for row in &cm.rates {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn missing_culture_module_fails_classifier_routing() {
    let r = trained(TINY);
    let dicts = r.run.join("checkpoints/step3/dictionaries");
    for entry in dicts.read_dir().unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap().to_string_lossy().starts_with("Vietnam") {
            fs::remove_file(p).unwrap();
        }
    }
    let out = bin(&["eval", "--run", s(&r.run), "--router", "classifier"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn report_renders_deltas_footnote_and_rejects_bad_files() {
    let r = trained(TINY);
    for mode in ["baseline", "both"] {
        assert_eq!(code(&bin(&["eval", "--run", s(&r.run), "--mode", mode])), 0);
    }
    let reports = r.run.join("reports");
    let base = reports.join("baseline-oracle.json");
    let both = reports.join("both-oracle.json");
    let out = bin(&["report", s(&base), s(&both)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("means over 3 sampling runs"));
    let tables = parse_rendered(&text).unwrap();
    let main = tables.iter().find(|t| t.title == "multicultural / image-to-recipe").unwrap();
    let source = ReportFile::read_json(fs::File::open(&both).unwrap()).unwrap();
    for agg in source.aggregates.iter().filter(|a| a.direction.as_str() == "image-to-recipe") {
        let key = agg.size.to_string();
        assert_eq!(main.value(&key, "both R@1"), Some((agg.r1 * 100.0).round() / 100.0));
        let delta = main.value(&key, "delta R@1 (both-baseline)").unwrap();
        let diff = main.value(&key, "both R@1").unwrap() - main.value(&key, "baseline R@1").unwrap();
        assert!((delta - diff).abs() <= 0.011);
    }

    assert_eq!(code(&bin(&["eval", "--run", s(&r.run), "--mode", "baseline", "--runs", "1"])), 0);
    let single = bin(&["report", s(&base)]);
    assert!(!String::from_utf8_lossy(&single.stdout).contains("sampling runs"));

    let bad = r.dir.path().join("bad.json");
    fs::write(&bad, r#"{"format":"report-v0","seed":1,"rows":[],"aggregates":[]}"#).unwrap();
    assert_eq!(code(&bin(&["report", s(&bad)])), 2);
}

#[test]
fn build_dict_writes_the_requested_size() {
    let r = trained(TINY);
    let out_dir = r.dir.path().join("dicts");
    let out = bin(&["build-dict", "--run", s(&r.run), "--size", "8", "--kind", "ingredient", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let files: Vec<_> = out_dir.read_dir().unwrap().collect();
    assert_eq!(files.len(), 2);
    let out = bin(&["build-dict", "--run", s(&r.run), "--size", "100000", "--out", s(&out_dir), "--force"]);
    assert_ne!(code(&out), 0);
}

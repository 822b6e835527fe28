use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use csr_cli::run::{read_preferences, run, run_stats};
use csr_cli::RunConfig;
use tempfile::TempDir;

const SMALL: &str = "\
seed = 3
iterations = 1
num_objects = 4
num_images = 6
embed_dim = 8
max_length = 40
max_new_tokens = 8
epochs_per_iteration = 20
";

fn csr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

fn names(dir: &Path, prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix))
        .collect();
    v.sort();
    v
}

#[test]
fn single_iteration_run_writes_one_of_each() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = csr(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(names(&out, "preferences_"), vec!["preferences_1.jsonl"]);
    assert_eq!(names(&out, "checkpoint_"), vec!["checkpoint_1"]);
    for f in ["manifest.json", "config.toml", "metrics/rewards.csv", "metrics/chair.csv", "metrics/relevance.csv", "metrics/training.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["version"].as_str().unwrap().starts_with("csr-cli"));

    // Refuses to clobber without --force.
    let again = csr(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&again), 1);
    let forced = csr(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--force", "--jobs", "2"]);
    assert_eq!(code(&forced), 0);

    let stats = csr(&["stats", out.to_str().unwrap()]);
    assert_eq!(code(&stats), 0);
    assert!(String::from_utf8_lossy(&stats.stdout).contains("re-scored"));

    let ckpt = out.join("checkpoint_1");
    let chair = csr(&["chair", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&chair), 0);
    assert!(String::from_utf8_lossy(&chair.stdout).contains("CHAIR_S"));
}

#[test]
fn stored_rewards_rescore_exactly() {
    let tmp = TempDir::new().unwrap();
    let config = RunConfig {
        iterations: 2,
        out: tmp.path().join("run"),
        ..RunConfig::parse(SMALL).unwrap()
    };
    run(&config, false).unwrap();
    let stats = run_stats(&config.out).unwrap();
    assert!(stats.max_rescore_error <= 1e-9, "{}", stats.max_rescore_error);
    assert_eq!(stats.rewards.len(), 2);
    assert!(stats.records > 0);
}

#[test]
fn text_weight_zero_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = csr(&["run", "--config", &cfg, "--lambda", "1.0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_preferences(&out.join("preferences_1.jsonl")).unwrap();
    assert!(!records.is_empty());
    for r in records {
        let s = &r.per_sentence_scores;
        for score in s.chosen.iter().chain(&s.rejected) {
            assert_eq!(score.lambda_used, 1.0);
            assert_eq!(score.calibrated, score.image_relevance);
        }
    }
}

#[test]
fn exported_dataset_drives_a_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("prompts.jsonl");
    let images = tmp.path().join("images.jsonl");
    let o = csr(&["export-world", "--config", &cfg, "--out", data.to_str().unwrap(), "--images", images.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(&images).unwrap().lines().count(), 6);

    let with_data = format!("{SMALL}dataset = {:?}\n", data.display().to_string());
    let cfg2 = tmp.path().join("data.toml");
    fs::write(&cfg2, with_data).unwrap();
    let out = tmp.path().join("run");
    let o = csr(&["run", "--config", cfg2.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // The dataset run matches the run over the world's own prompts.
    let out2 = tmp.path().join("run2");
    assert_eq!(code(&csr(&["run", "--config", &cfg, "--out", out2.to_str().unwrap()])), 0);
    assert_eq!(
        fs::read(out.join("preferences_1.jsonl")).unwrap(),
        fs::read(out2.join("preferences_1.jsonl")).unwrap()
    );

    fs::write(&data, "").unwrap();
    let o = csr(&["run", "--config", cfg2.to_str().unwrap(), "--out", tmp.path().join("run3").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_and_usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nbeam_width = 3\n").unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&csr(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()])), 1);
    assert_eq!(code(&csr(&["run", "--lambda", "1.5", "--out", out.to_str().unwrap()])), 1);
    assert_eq!(code(&csr(&["run", "--num-beams", "4", "--out", out.to_str().unwrap()])), 1);
    assert_eq!(code(&csr(&["run", "--no-such-flag"])), 1);
    assert_eq!(code(&csr(&["theorem1", "--grid", "0.5,0.9"])), 1);
    assert_eq!(code(&csr(&["theorem1", "--samples", "100"])), 1);
    assert_eq!(code(&csr(&["--help"])), 0);
}

#[test]
fn theorem_verdicts_map_to_exit_codes() {
    let ok = csr(&["theorem1"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.starts_with("lambda,loss_estimate,stderr,num_samples,convention,seed"));
    // Header, 4 grid rows per convention, then the verdict line.
    assert_eq!(stdout.lines().filter(|l| l.ends_with(",0") && l.contains("-weighted,")).count(), 8);
    assert_eq!(stdout.lines().count(), 10);
    assert!(stdout.lines().last().unwrap().starts_with("PASS"));

    let control = csr(&["theorem1", "--regime", "control", "--convention", "text-weighted"]);
    assert_eq!(code(&control), 3);
    assert!(String::from_utf8_lossy(&control.stdout).lines().last().unwrap().starts_with("FAIL"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn skimrnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skimrnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Keyword data plus a run config in a fresh directory.
fn workspace(gamma: f64) -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (seed, n, file) in [("1", "400", "train.tsv"), ("2", "80", "val.tsv")] {
        let out = skimrnn(
            dir,
            &[
                "--seed", seed, "--out-dir", "data", "gen-data", "--task", "keyword", "--n", n, "--len", "12",
                "--vocab-size", "40", "--n-keys", "3", "--file", file,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    write_config(dir, gamma);
    tmp
}

fn write_config(dir: &Path, gamma: f64) {
    let cfg = format!(
        r#"{{"task":"classifier","cell":"skim","train_path":"data/train.tsv","val_path":"data/val.tsv",
        "d_in":12,"d":16,"d_small":3,"lr":0.01,"gamma":{gamma},"batch_size":16,"pretrain_steps":40,
        "early_stop_patience":10,"max_steps":200,"eval_interval":20,"tau_rate":0.01}}"#
    );
    std::fs::write(dir.join("cfg.json"), cfg).unwrap();
}

fn train(dir: &Path, out_dir: &str) -> PathBuf {
    let out = skimrnn(dir, &["--config", "cfg.json", "--out-dir", out_dir, "train"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join(out_dir)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let tmp = workspace(0.02);
    let a = train(tmp.path(), "a");
    for f in ["model.bin", "metrics.csv", "summary.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metric_name"], "accuracy");
    assert_eq!(summary["layer_skim_rates"].as_array().unwrap().len(), 1);

    let b = train(tmp.path(), "b");
    assert_eq!(std::fs::read(a.join("model.bin")).unwrap(), std::fs::read(b.join("model.bin")).unwrap());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn negative_gamma_is_a_usage_error_naming_the_field() {
    let tmp = workspace(-0.5);
    let out = skimrnn(tmp.path(), &["--config", "cfg.json", "--out-dir", "run", "train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gamma"), "{}", stderr(&out));
    assert!(!tmp.path().join("run").exists(), "nothing is written on a usage error");
}

#[test]
fn unknown_config_key_and_missing_file_are_usage_errors() {
    let tmp = workspace(0.02);
    let dir = tmp.path();
    let text = std::fs::read_to_string(dir.join("cfg.json")).unwrap();
    std::fs::write(dir.join("bad.json"), text.replacen('{', r#"{"typo_key":1,"#, 1)).unwrap();
    let out = skimrnn(dir, &["--config", "bad.json", "--out-dir", "run", "train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("typo_key"), "{}", stderr(&out));

    std::fs::remove_file(dir.join("data/val.tsv")).unwrap();
    let out = skimrnn(dir, &["--config", "cfg.json", "--out-dir", "run", "train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("val_path"), "{}", stderr(&out));
    assert!(!dir.join("run").exists());
}

#[test]
fn sweep_starts_at_full_reading_and_skims_more_as_threshold_rises() {
    let tmp = workspace(0.02);
    let run = train(tmp.path(), "run");
    let model = run.join("model.bin");
    let out = skimrnn(
        tmp.path(),
        &["--out-dir", "sw", "sweep-threshold", "--model", model.to_str().unwrap(), "--data", "data/val.tsv", "--skip"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&tmp.path().join("sw/sweep.csv"));
    assert_eq!(rows.len(), 22);
    for mode in ["skim", "skip"] {
        let rates: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r[0] == mode)
            .map(|r| (r[1].parse().unwrap(), r[3].parse().unwrap()))
            .collect();
        assert_eq!(rates[0], (0.0, 0.0));
        assert!(rates.windows(2).all(|w| w[1].1 >= w[0].1), "{mode}: {rates:?}");
    }

    let out = skimrnn(
        tmp.path(),
        &["sweep-threshold", "--model", model.to_str().unwrap(), "--data", "data/val.tsv", "--thresholds", "0,1.5"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn traces_agree_with_forced_reads_and_single_tokens() {
    let tmp = workspace(0.02);
    let run = train(tmp.path(), "run");
    let model = run.join("model.bin");
    let model = model.to_str().unwrap();
    std::fs::write(tmp.path().join("in.txt"), "w1 w2 key0 w3\n\nw4 key2\n").unwrap();
    let out = skimrnn(tmp.path(), &["--out-dir", "tr", "trace", "--model", model, "--input", "in.txt", "--policy", "read"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let jsonl = std::fs::read_to_string(tmp.path().join("tr/trace.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["decision"] == "read"));
    let text = std::fs::read_to_string(tmp.path().join("tr/trace.txt")).unwrap();
    assert!(text.contains("#0 rnn: [w1] [w2] [key0] [w3]"), "{text}");
    assert!(text.contains("skim rate 0.0000 over 6 decisions"), "{text}");

    let out = skimrnn(tmp.path(), &["--out-dir", "one", "trace", "--model", model, "--text", "key1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let jsonl = std::fs::read_to_string(tmp.path().join("one/trace.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 1);

    std::fs::write(tmp.path().join("empty.txt"), "\n  \n").unwrap();
    let out = skimrnn(tmp.path(), &["--out-dir", "none", "trace", "--model", model, "--input", "empty.txt"]);
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("none").exists());
}

#[test]
fn trained_model_reads_keywords_at_least_as_often_as_fillers() {
    let tmp = workspace(0.02);
    let run = train(tmp.path(), "run");
    let val = std::fs::read_to_string(tmp.path().join("data/val.tsv")).unwrap();
    let texts: String = val.lines().map(|l| format!("{}\n", l.split_once('\t').unwrap().1)).collect();
    std::fs::write(tmp.path().join("val.txt"), texts).unwrap();
    let out = skimrnn(
        tmp.path(),
        &["--out-dir", "tr", "trace", "--model", run.join("model.bin").to_str().unwrap(), "--input", "val.txt"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (mut key, mut filler) = ((0usize, 0usize), (0usize, 0usize));
    for line in std::fs::read_to_string(tmp.path().join("tr/trace.jsonl")).unwrap().lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let read = usize::from(r["decision"] == "read");
        let slot = if r["token"].as_str().unwrap().starts_with("key") { &mut key } else { &mut filler };
        slot.0 += read;
        slot.1 += 1;
    }
    let key_rate = key.0 as f64 / key.1 as f64;
    let filler_rate = filler.0 as f64 / filler.1 as f64;
    assert!(key_rate >= filler_rate, "keyword read rate {key_rate} < filler read rate {filler_rate}");
}

#[test]
fn bench_grid_rows_and_refusals() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = skimrnn(
        dir,
        &["--out-dir", "b", "bench", "--grid", "8:16:4,8:24:4", "--skim-rates", "0,0.5,0.9", "--seq-len", "20"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_rows(&dir.join("b/bench.csv")).len(), 6);
    assert_eq!(csv_rows(&dir.join("b/bench_long.csv")).len(), 30);

    let out = skimrnn(dir, &["--out-dir", "c", "bench", "--trials", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("trials"), "{}", stderr(&out));
    let out = skimrnn(dir, &["--threads", "4", "--out-dir", "c", "bench"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.join("c").exists());
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (out_dir, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = skimrnn(
            dir,
            &[
                "--seed", seed, "--out-dir", out_dir, "gen-data", "--task", "span", "--n", "20", "--len", "16",
                "--vocab-size", "40", "--file", "qa.jsonl",
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let read = |d: &str| std::fs::read(dir.join(d).join("qa.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));

    let out = skimrnn(
        dir,
        &["--out-dir", "bad", "gen-data", "--task", "keyword", "--n", "5", "--len", "4", "--vocab-size", "3", "--file", "k.tsv"],
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.join("bad").exists());
}

#[test]
fn qa_model_trains_and_traces_every_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (seed, n, file) in [("1", "60", "train.jsonl"), ("2", "10", "val.jsonl")] {
        let out = skimrnn(
            dir,
            &[
                "--seed", seed, "--out-dir", "data", "gen-data", "--task", "span", "--n", n, "--len", "12",
                "--vocab-size", "30", "--file", file,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let cfg = r#"{"task":"qa","cell":"skim","train_path":"data/train.jsonl","val_path":"data/val.jsonl",
        "d_in":6,"d":8,"d_small":2,"lr":0.01,"gamma":0.01,"batch_size":8,"pretrain_steps":4,
        "early_stop_patience":5,"max_steps":10,"eval_interval":5}"#;
    std::fs::write(dir.join("cfg.json"), cfg).unwrap();
    let run = train(dir, "run");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metric_name"], "exact_match");
    assert!(summary["f1"].is_number());
    let dirs: Vec<&str> = summary["layer_skim_rates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["direction"].as_str().unwrap())
        .collect();
    assert_eq!(dirs, ["l1.fw", "l1.bw", "l2.fw", "l2.bw"]);

    std::fs::write(dir.join("q.jsonl"), "{\"context\":\"a b c\",\"question\":\"q\"}\n").unwrap();
    let out = skimrnn(dir, &["--out-dir", "tr", "trace", "--model", run.join("model.bin").to_str().unwrap(), "--input", "q.jsonl"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let jsonl = std::fs::read_to_string(dir.join("tr/trace.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 12);
}

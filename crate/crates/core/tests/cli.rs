use std::fs;
use std::path::Path;
use std::process::Command;

use vistrim::cli::config::{parse_toml, to_toml};
use vistrim::cli::{RunConfig, RunSummary};
use vistrim::pruning::Fraction;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vistrim"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn vis_columns(header: &[String], row: &[String]) -> Vec<usize> {
    header
        .iter()
        .zip(row)
        .filter(|(h, _)| h.starts_with("vis_l"))
        .map(|(_, v)| v.parse().unwrap())
        .collect()
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "run",
            "--prune",
            "pvtp",
            "--stride",
            "2",
            "--step-ratio",
            "10%",
            "--first-ratio",
            "0.3",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    }
    for f in ["trace.csv", "attention.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // summaries differ only in the echoed output directory
    let load = |dir: &Path| -> RunSummary {
        let mut s: RunSummary = serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
        s.config.output.out_dir.clear();
        s
    };
    assert_eq!(load(&a), load(&b));
}

#[test]
fn cosine_tau_eight_empties_visual_cache_at_step_eight() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run",
        "--attenuation",
        "cosine",
        "--tau",
        "8",
        "--max-new-tokens",
        "11",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let (header, rows) = read_csv(&dir.path().join("trace.csv"));
    assert_eq!(rows.len(), 11);
    for row in &rows {
        let step: usize = row[0].parse().unwrap();
        let vis = vis_columns(&header, row);
        if step >= 8 {
            assert!(vis.iter().all(|&v| v == 0), "step {step}: {vis:?}");
        } else {
            assert!(vis.iter().all(|&v| v > 0), "step {step}: {vis:?}");
        }
    }
}

#[test]
fn disabled_policies_are_labelled_none_and_constant() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["run", "--out-dir", dir.path().to_str().unwrap()]);
    let summary: RunSummary =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.policy, "none");
    assert_eq!(summary.engine_ops, summary.cost.total_flops);
    let (header, rows) = read_csv(&dir.path().join("trace.csv"));
    let first = vis_columns(&header, &rows[0]);
    assert!(first.iter().all(|&v| v == 20));
    for row in &rows {
        assert_eq!(vis_columns(&header, row), first);
    }
    let expected: Vec<&str> = ["step", "token"].into();
    assert_eq!(&header[..2], expected.as_slice());
    assert_eq!(&header[header.len() - 3..], ["visual_share", "ops", "cumulative_ops"]);
}

#[test]
fn summary_config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(
        &cfg_path,
        r#"
version = 1
seed = 11

[prune]
kind = "fastv_like"
fastv_layer = 2
fastv_ratio = "37.5%"

[attenuation]
kind = "linear"
tau = 6

[generation]
max_new_tokens = 5
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    run_ok(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let summary: RunSummary =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let echo = summary.config;
    assert_eq!(echo.seed, 11);
    assert_eq!(echo.prune.fastv_ratio, Fraction::from_micros(375_000));
    let back: RunConfig = parse_toml(&to_toml(&echo).unwrap()).unwrap();
    assert_eq!(back, echo);
    assert_eq!(summary.policy, "fastv_like+linear");
}

#[test]
fn json_format_writes_trace_json() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run",
        "--format",
        "json",
        "--record-attention",
        "false",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(dir.path().join("trace.json").exists());
    assert!(!dir.path().join("trace.csv").exists());
    assert!(!dir.path().join("attention.json").exists());
}

#[test]
fn config_errors_exit_two_and_leave_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = 1\nunknown_key = 1\n").unwrap();
    for args in [
        vec!["run", "--config", bad.to_str().unwrap()],
        vec!["run", "--stride", "0", "--prune", "pvtp"],
        vec!["run", "--step-ratio", "twelve"],
        vec!["run", "--prune", "pvtp", "--first-ratio", "0.9", "--step-ratio", "0.2"],
        vec!["run", "--lazy-layers", "0"],
        vec!["bogus"],
    ] {
        let mut full = args.clone();
        full.extend(["--out-dir", out.to_str().unwrap()]);
        let status = bin().args(&full).output().unwrap().status;
        assert_eq!(status.code(), Some(2), "{args:?}");
        assert!(!out.exists(), "{args:?} left output behind");
    }
    fs::write(&bad, "version = 7\n").unwrap();
    let status = bin()
        .args(["run", "--config", bad.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk");
    fs::create_dir(&junk).unwrap();
    fs::write(junk.join("attention.json"), "{ not json").unwrap();
    let status = bin()
        .args(["analyze", "--trace-dir", junk.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(3));
}

#[test]
fn analyze_requires_attention_records() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run",
        "--record-attention",
        "false",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let out = bin()
        .args(["analyze", "--trace-dir", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attention.json"));
}

#[test]
fn analyze_outputs_for_heredity_and_annealing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    run_ok(&[
        "run",
        "--lazy-layers",
        "5,6",
        "--attenuation",
        "cosine",
        "--tau",
        "6",
        "--max-new-tokens",
        "9",
        "--out-dir",
        d,
    ]);
    run_ok(&["analyze", "--trace-dir", d, "--step", "2"]);

    let (_, sim) = read_csv(&dir.path().join("similarity.csv"));
    assert_eq!(sim.len(), 8);
    for (l, src) in [(5usize, 4usize), (6, 4), (6, 5)] {
        let v: f64 = sim[l][src + 1].parse().unwrap();
        assert_eq!(v, 1.0, "layer {l} vs {src}");
    }

    let (_, overlap) = read_csv(&dir.path().join("overlap.csv"));
    assert_eq!(overlap[0][1].parse::<f64>().unwrap(), 1.0);

    let (_, shares) = read_csv(&dir.path().join("visual_share.csv"));
    assert_eq!(shares.len(), 9);
    for row in &shares {
        let step: usize = row[0].parse().unwrap();
        let vals: Vec<f64> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        if step >= 6 {
            assert!(vals.iter().all(|&v| v == 0.0), "step {step}");
        } else {
            assert!(vals.iter().all(|&v| v > 0.0), "step {step}");
        }
    }
    let lazy: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("lazy_candidates.json")).unwrap()).unwrap();
    let layers: Vec<u64> = lazy["layers"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(layers.contains(&5) && layers.contains(&6));
}

#[test]
fn sweep_grid_and_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    run_ok(&["sweep", "--strides", "1,7,40", "--taus", "50", "--out-dir", d]);
    let (header, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(header[..6], ["S", "R", "P", "C", "tau", "lazy"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][11], "ok");
    assert_eq!(rows[1][1].parse::<Fraction>().unwrap(), Fraction::from_micros(122_500));
    assert_eq!(rows[2][11], "skipped");
    assert!(!rows[2][12].is_empty());

    let empty = dir.path().join("empty");
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "version = 1\n[grid]\nstrides = []\n").unwrap();
    run_ok(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        empty.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(empty.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("S,R,P,C,tau,lazy,"));
}

#[test]
fn sweep_lazy_sets_and_invalid_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    run_ok(&[
        "sweep",
        "--strides",
        "7",
        "--lazy-set",
        "",
        "--lazy-set",
        "29,30,31",
        "--lazy-set",
        "25,26,27",
        "--out-dir",
        d,
    ]);
    let (_, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][11], "ok");
    // prune layer 31 sits between 28 and the lazy layers
    assert_eq!(rows[1][11], "skipped");
    assert!(rows[1][12].contains("prune"));
    assert_eq!(rows[2][11], "ok");
    let base: u64 = rows[0][7].parse().unwrap();
    let lazy: u64 = rows[2][7].parse().unwrap();
    assert!(lazy < base);
}

#[test]
fn cost_prints_report() {
    let out = bin()
        .args([
            "cost",
            "--prune",
            "pvtp",
            "--stride",
            "7",
            "--step-ratio",
            "12.25%",
            "--first-ratio",
            "50%",
            "--calibrate-flops",
            "9.38e12",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let n_text = v["calibrated_n_text"].as_f64().unwrap();
    assert!((120.0..135.0).contains(&n_text));
    assert_eq!(v["config"]["n_text"].as_u64().unwrap(), 128);
    let prefill = v["report"]["prefill_flops"].as_f64().unwrap();
    assert!((prefill / 4.37e12 - 1.0).abs() < 0.1);

    let csv_out = bin()
        .args(["cost", "--format", "csv", "--gen-len", "3"])
        .output()
        .unwrap();
    let text = String::from_utf8(csv_out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,flops,kv_bytes");
    assert_eq!(text.lines().count(), 4);
}

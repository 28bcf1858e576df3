use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hpdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpdp"))
        .args(args)
        .output()
        .expect("spawn hpdp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_gen(dir: &Path) -> PathBuf {
    let p = dir.join("gen.toml");
    fs::write(&p, "n_bags = 40\ninstances_per_bag = [6, 12]\nseed = 3\n").unwrap();
    p
}

fn small_train(dir: &Path) -> PathBuf {
    let p = dir.join("train.toml");
    fs::write(&p, "max_epochs = 4\npatience = 4\n").unwrap();
    p
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "run_manifest.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn zero_bags_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    fs::write(&cfg, "n_bags = 0\n").unwrap();
    let o = hpdp(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_bags must be ≥ 1"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let o = hpdp(&["eval", "--data", "x", "--out", "y"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--checkpoint"));
    assert_eq!(code(&hpdp(&["no-such-command"])), 2);
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = hpdp(&[
        "cluster",
        "--data",
        s(&dir.path().join("absent")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_at_default_threshold() {
    let o = hpdp(&["gradcheck", "--seed", "1", "--samples", "60"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = hpdp(&[
        "gradcheck",
        "--seed",
        "1",
        "--samples",
        "20",
        "--task",
        "survival",
        "--jitter",
        "0.1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn impossible_gradcheck_threshold_exits_3() {
    let o = hpdp(&["gradcheck", "--seed", "1", "--samples", "20", "--threshold", "0"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn single_cluster_is_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(
        code(&hpdp(&[
            "gen-data",
            "--config",
            s(&small_gen(dir.path())),
            "--out",
            s(&data)
        ])),
        0
    );
    let out = dir.path().join("c");
    let o = hpdp(&["cluster", "--data", s(&data), "--k", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bank = hpdp::checkpoint::load_prototypes(&out.join("prototypes.bin")).unwrap();
    let pts = hpdp::synthdata::read_cohort(&data).unwrap().pooled_features();
    for c in 0..pts.cols() {
        let mean = (0..pts.rows()).map(|r| pts[(r, c)]).sum::<f64>() / pts.rows() as f64;
        assert!((bank.centroids[(0, c)] - mean).abs() < 1e-9);
    }
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn too_many_clusters_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let cfg = dir.path().join("gen.toml");
    fs::write(&cfg, "n_bags = 1\ninstances_per_bag = [3, 3]\n").unwrap();
    assert_eq!(code(&hpdp(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let o = hpdp(&["cluster", "--data", s(&data), "--k", "4", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

fn pipeline(root: &Path) -> [PathBuf; 3] {
    let gen = small_gen(root);
    let train = small_train(root);
    let dirs = [root.join("data"), root.join("model"), root.join("eval")];
    let [data, model, eval] = &dirs;
    let o = hpdp(&["gen-data", "--config", s(&gen), "--out", s(data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = hpdp(&[
        "train",
        "--data",
        s(data),
        "--config",
        s(&train),
        "--seed",
        "5",
        "--out",
        s(model),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = model.join("model.ckpt");
    let o = hpdp(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(data),
        "--dump-attention",
        "--out",
        s(eval),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dirs
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = pipeline(a.path());
    let db = pipeline(b.path());
    for (x, y) in da.iter().zip(&db) {
        let (fx, fy) = (files(x), files(y));
        assert!(!fx.is_empty());
        assert_eq!(fx, fy, "{} differs", x.display());
    }
    let names: Vec<_> = files(&da[2]).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["attention.csv", "metrics.json"]);
    let hist = fs::read_to_string(da[1].join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,train_loss,task_loss,proto_loss,val_metric,lr\n"));
    let report: hpdp::metrics::MetricReport =
        serde_json::from_slice(&fs::read(da[2].join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.n, 8);
    assert!(report.auc.is_some() && report.c_index.is_none());
}

#[test]
fn survival_eval_writes_km_curves() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(
        code(&hpdp(&["gen-data", "--config", s(&small_gen(root)), "--out", s(&data)])),
        0
    );
    let model = root.join("model");
    let o = hpdp(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&small_train(root)),
        "--task",
        "survival",
        "--toggle-hcma",
        "false",
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval = root.join("eval");
    let ckpt = model.join("model.ckpt");
    let o = hpdp(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "all",
        "--km",
        "--out",
        s(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["km_high.csv", "km_low.csv", "metrics.json"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    let report: hpdp::metrics::MetricReport =
        serde_json::from_slice(&fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.n, 40);
    assert!(report.c_index.is_some() && report.auc.is_none());
}

#[test]
fn report_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let aucs = [0.9, 0.8, 0.7, 0.95, 0.85];
    let mut inputs = Vec::new();
    for (i, auc) in aucs.iter().enumerate() {
        let p = dir.path().join(format!("m{i}.json"));
        let acc = if i == 0 {
            "null".to_string()
        } else {
            format!("{}", 0.5 + i as f64 / 10.0)
        };
        let json = format!(
            r#"{{"task":"classification","n":10,"acc":{acc},"f1_macro":null,"f1_kind":"macro","auc":{auc},"c_index":null,"logrank_p":null}}"#
        );
        fs::write(&p, json).unwrap();
        inputs.push(p);
    }
    let out = dir.path().join("r");
    let mut args = vec!["report", "--out", s(&out)];
    args.extend(inputs.iter().map(|p| s(p)));
    let o = hpdp(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "metric,n,mean,std");
    assert_eq!(lines.len(), 3);
    let row = |name: &str| -> (usize, f64, f64) {
        let l = lines.iter().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        let f: Vec<&str> = l.split(',').collect();
        (f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
    };
    let (n, mean, std) = row("auc");
    assert_eq!(n, 5);
    assert!((mean - 0.84).abs() < 1e-12);
    let ss = 0.06f64.powi(2) + 0.04f64.powi(2) + 0.14f64.powi(2) + 0.11f64.powi(2) + 0.01f64.powi(2);
    assert!((std - (ss / 4.0).sqrt()).abs() < 1e-12);
    let (n, mean, std) = row("acc");
    assert_eq!(n, 4);
    assert!((mean - 0.75).abs() < 1e-12);
    assert!((std - (0.05f64 / 3.0).sqrt()).abs() < 1e-12);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_MOONS: &str = r#"{"kind": "two_moons", "n_train": 300, "n_test": 200, "ring_n": 100}"#;

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn small(variant: &str, epochs: usize, extra: &str) -> String {
    format!(
        r#"{{"model": {{"variant": "{variant}", "gmm_components": 4}},
            "schedule": {{"epochs": {epochs}, "batch_size": 64}},
            "dataset": {SMALL_MOONS}{extra}}}"#
    )
}

fn gem(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gem"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn metric(out: &Path, dataset: &str, name: &str) -> Option<f64> {
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    text.lines().skip(1).find_map(|l| {
        let f: Vec<&str> = l.split(',').collect();
        (f[0] == dataset && f[3] == name).then(|| f[4].parse().unwrap())
    })
}

#[test]
fn train_then_eval_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "core.json", &small("gem_core", 3, ""));
    let out = dir.path().join("run");
    let o = gem(&["train", "--seed", "1"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "history.csv", "config.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(out.join("config.json")).unwrap(), std::fs::read_to_string(&cfg).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([1]));

    let o = gem(&["eval", "--seed", "1"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "scores_test.csv", "scores_ood_cluster.csv", "scores_ood_ring.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let acc = metric(&out, "two_moons", "accuracy").unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(metric(&out, "two_moons", "mi_single_head"), Some(1.0));
    assert!(metric(&out, "two_moons/ood_ring", "auroc_epistemic").is_some());
    let scores = std::fs::read_to_string(out.join("scores_test.csv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "index,label,pred,maxp,entropy,alpha0,mi,energy");
    assert_eq!(scores.lines().count(), 201);
}

#[test]
fn mixture_is_not_flagged_single_head() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "mix.json", &small("gem_mix", 1, r#", "eval": {"temperature_scaling": false}"#));
    let out = dir.path().join("run");
    assert_eq!(gem(&["eval"], &cfg, &out).status.code(), Some(0));
    assert_eq!(metric(&out, "two_moons", "mi_single_head"), Some(0.0));
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bad.json", r#"{"schedule": {"epochz": 3}}"#);
    let o = gem(&["train"], &cfg, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn malformed_and_missing_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "broken.json", "{\"model\": ");
    assert_eq!(gem(&["train"], &cfg, &dir.path().join("a")).status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(gem(&["eval"], &missing, &dir.path().join("b")).status.code(), Some(2));
    let cfg = config(dir.path(), "neg.json", r#"{"heatmap": {"resolution": 4}}"#);
    assert_eq!(gem(&["heatmap"], &cfg, &dir.path().join("c")).status.code(), Some(2));
}

#[test]
fn zero_epochs_is_a_warning_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "zero.json", &small("gem_core", 0, ""));
    let out = dir.path().join("run");
    let o = gem(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("checkpoint.json").is_file());
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("epoch"));
}

#[test]
fn missing_ood_set_is_listed_as_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "eval": {"ood": ["ood_ring", "svhn"], "temperature_scaling": false, "dump_scores": false}"#;
    let cfg = config(dir.path(), "skip.json", &small("edl", 1, extra));
    let out = dir.path().join("run");
    assert_eq!(gem(&["eval"], &cfg, &out).status.code(), Some(0));
    assert_eq!(metric(&out, "two_moons/svhn", "skipped"), Some(1.0));
    assert!(metric(&out, "two_moons/ood_ring", "auroc_entropy").is_some());
    assert!(metric(&out, "two_moons/ood_cluster", "auroc_entropy").is_none());
    assert!(!out.join("scores_test.csv").exists());
}

#[test]
fn heatmap_grid_has_resolution_squared_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "heatmap": {"resolution": 20, "score": "alpha0"}"#;
    let cfg = config(dir.path(), "hm.json", &small("gem_core", 2, extra));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gem(&["heatmap", "--seed", "3"], &cfg, out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = std::fs::read_to_string(a.join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x,y,value");
    assert_eq!(csv.lines().count(), 1 + 20 * 20);
    assert!(csv.lines().skip(1).all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));
    for f in ["heatmap.csv", "heatmap.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let svg = std::fs::read_to_string(a.join("heatmap.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn two_switch_sweep_over_two_seeds_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "seeds": [0, 1],
        "eval": {"temperature_scaling": false, "dump_scores": false},
        "sweep": {"axes": ["sn", "mix"], "workers": 2}"#;
    let cfg = config(dir.path(), "sweep.json", &small("gem_fi", 2, extra));
    let out = dir.path().join("run");
    let o = gem(&["sweep"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..5], &["cell", "switches", "variant", "seed", "status"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.len() == header.len() && r[4] == "ok"));
    let mut cells: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    cells.dedup();
    assert_eq!(cells.len(), 4);
}

#[test]
fn help_exits_0_and_bad_usage_exits_2() {
    let bin = env!("CARGO_BIN_EXE_gem");
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("train").output().unwrap().status.code(), Some(2));
    assert_eq!(Command::new(bin).arg("fly").output().unwrap().status.code(), Some(2));
}

fn write_idx(dir: &Path, stem: &str, n: usize, invert: bool) -> (PathBuf, PathBuf) {
    let mut images = vec![0, 0, 8, 3];
    for v in [n as u32, 8, 8] {
        images.extend(v.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 3;
        labels.push(class as u8);
        for p in 0..64 {
            let on = p / 8 == 2 * class + 1;
            let jitter = ((i * 31 + p * 7) % 40) as u8;
            let v = if on { 200 + jitter / 2 } else { jitter };
            images.push(if invert { 255 - v } else { v });
        }
    }
    let (img, lab) = (dir.join(format!("{stem}-images")), dir.join(format!("{stem}-labels")));
    std::fs::write(&img, images).unwrap();
    std::fs::write(&lab, labels).unwrap();
    (img, lab)
}

#[test]
fn idx_dataset_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (tr_i, tr_l) = write_idx(dir.path(), "train", 300, false);
    let (te_i, te_l) = write_idx(dir.path(), "test", 90, false);
    let (oo_i, oo_l) = write_idx(dir.path(), "inv", 60, true);
    let body = format!(
        r#"{{"model": {{"variant": "gem_core", "arch": {{"input_dim": 64, "backbone_hidden": [32]}}}},
            "schedule": {{"epochs": 3, "density_refit_every": 1}},
            "dataset": {{"kind": "idx",
                "train": {{"images": {tr_i:?}, "labels": {tr_l:?}}},
                "test": {{"images": {te_i:?}, "labels": {te_l:?}, "limit": 60}},
                "ood": [{{"name": "inverted", "images": {oo_i:?}, "labels": {oo_l:?}}}]}}}}"#
    );
    let cfg = config(dir.path(), "idx.json", &body);
    let out = dir.path().join("run");
    let o = gem(&["eval"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(metric(&out, "idx/inverted", "auroc_epistemic").is_some());
    let scores = std::fs::read_to_string(out.join("scores_test.csv")).unwrap();
    assert_eq!(scores.lines().count(), 61);
}

#[test]
fn several_seeds_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "seeds": [3, 4], "eval": {"temperature_scaling": false, "dump_scores": false}"#;
    let cfg = config(dir.path(), "seeds.json", &small("gem_core", 1, extra));
    let out = dir.path().join("run");
    assert_eq!(gem(&["eval"], &cfg, &out).status.code(), Some(0));
    for k in [3, 4] {
        let d = out.join(format!("seed{k}"));
        assert!(d.join("checkpoint.json").is_file() && d.join("metrics.csv").is_file());
        assert!(std::fs::read_to_string(d.join("metrics.csv")).unwrap().contains(&format!(",{k},accuracy,")));
    }
    assert!(out.join("manifest.json").is_file());
    assert_ne!(std::fs::read(out.join("seed3/checkpoint.json")).unwrap(), std::fs::read(out.join("seed4/checkpoint.json")).unwrap());
}

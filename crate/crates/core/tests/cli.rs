use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ggeur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggeur"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup(dir: &Path) {
    fs::write(
        dir.join("synth.json"),
        r#"{"dim": 6, "classes": 3, "domains": 2, "train_per_cell": 40, "test_per_cell": 10,
            "domain_shift_scale": 1.0, "seed": 2}"#,
    )
    .unwrap();
    let out = ggeur(&["synth", "--spec", p(&dir.join("synth.json")), "--out", p(&dir.join("data"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
    fs::write(
        dir.join("run.json"),
        r#"{"seed": 3, "dataset": "data/manifest.json", "rounds": 6, "local_rounds": 2,
            "partition": {"mode": "domain_per_client", "num_clients": 2, "fraction_per_domain": 0.5},
            "augmentation": {"mode": "multi_domain", "step1_target": 30, "step2_per_prototype": 10},
            "sgd": {"learning_rate": 0.01, "batch_size": 16},
            "similarity_report": true}"#,
    )
    .unwrap();
}

#[test]
fn run_outputs_are_byte_identical_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cfg = dir.path().join("run.json");
    let mut metrics = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let out_dir = dir.path().join(name);
        let out = ggeur(&["run", "--config", p(&cfg), "--out", p(&out_dir), "--workers", workers]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for file in ["metrics.csv", "summary.json", "model.mlp1", "shapes.geo", "partition.json", "heatmap.csv"] {
            assert!(out_dir.join(file).exists(), "missing {file}");
        }
        assert!(out_dir.join("similarity_domain0_vs_domain1.csv").exists());
        metrics.push(fs::read(out_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0], metrics[2]);

    let out_dir = dir.path().join("d");
    let out = ggeur(&["run", "--config", p(&cfg), "--out", p(&out_dir), "--seed", "99"]);
    assert!(out.status.success());
    assert_ne!(fs::read(out_dir.join("metrics.csv")).unwrap(), metrics[0]);
}

#[test]
fn partition_and_similarity_commands() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    fs::write(dir.path().join("part.json"), r#"{"mode": "lds", "beta": 0.1, "num_clients": 2, "seed": 1}"#).unwrap();
    let out_file = dir.path().join("parts/lds.json");
    let out = ggeur(&[
        "partition",
        "--dataset",
        p(&dir.path().join("data")),
        "--spec",
        p(&dir.path().join("part.json")),
        "--out",
        p(&out_file),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out_file).unwrap()).unwrap();
    assert_eq!(json["clients"].as_array().unwrap().len(), 2);
    let heat = fs::read_to_string(dir.path().join("parts/lds.heatmap.csv")).unwrap();
    assert!(heat.starts_with("client,domain,class_0,class_1,class_2\n"));

    let out = ggeur(&[
        "similarity",
        "--dataset",
        p(&dir.path().join("data/manifest.json")),
        "--out",
        p(&dir.path().join("sim")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sim/similarity_domain0_vs_domain1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());

    assert_eq!(ggeur(&["nonsense"]).status.code(), Some(2));

    fs::write(dir.path().join("bad.json"), r#"{"rounds": "many"}"#).unwrap();
    let out = ggeur(&["run", "--config", p(&dir.path().join("bad.json")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let train = dir.path().join("data/00_domain0.train.emb");
    let mut bytes = fs::read(&train).unwrap();
    bytes[0] = b'X';
    fs::write(&train, bytes).unwrap();
    let out = ggeur(&["run", "--config", p(&dir.path().join("run.json")), "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    setup(dir.path());
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"").unwrap();
    let out = ggeur(&["run", "--config", p(&dir.path().join("run.json")), "--out", p(&blocker.join("z"))]);
    assert_eq!(out.status.code(), Some(4));
}

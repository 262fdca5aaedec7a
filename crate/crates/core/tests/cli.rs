use std::path::Path;
use std::process::{Command, Output};

use beds::ensemble::TrainConfig;
use beds::harness::{DataPaths, PipelineConfig, ResultTable};

fn beds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beds")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = beds(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn every_subcommand_chains() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    for (name, images, seed) in [("train", "5", "1"), ("val", "2", "2"), ("test", "2", "3")] {
        ok(&[
            "gen-synthetic",
            "--out",
            p(&d(name)),
            "--images",
            images,
            "--size",
            "256",
            "--seed",
            seed,
            "--prefix",
            name,
        ]);
    }

    let first = d("train").join("images").join("train_0000.png");
    ok(&["stain", "fit", "--image", p(&first), "--out", p(&d("h.json"))]);
    let second = d("test").join("images").join("test_0000.png");
    ok(&["stain", "normalize", "--image", p(&second), "--template", p(&d("h.json")), "--out", p(&d("norm.png"))]);
    assert!(d("norm.png").exists());

    let ids = ok(&[
        "templates",
        "select",
        "--data",
        p(&d("train")),
        "--m",
        "2",
        "--seed",
        "4",
        "--out",
        p(&d("templates.json")),
        "--stain-dir",
        p(&d("stains")),
    ]);
    assert_eq!(ids.lines().count(), 2);

    let hyper =
        TrainConfig { max_epochs: 3, pixels_per_patch: 32, val_pixels_per_patch: 512, ..TrainConfig::default() };
    std::fs::write(d("hyper.json"), serde_json::to_string(&hyper).unwrap()).unwrap();
    let trained = ok(&[
        "ensemble",
        "train",
        "--train",
        p(&d("train")),
        "--val",
        p(&d("val")),
        "--n",
        "3",
        "--seed",
        "5",
        "--hyper",
        p(&d("hyper.json")),
        "--out",
        p(&d("stack")),
    ]);
    assert_eq!(trained.lines().count(), 3);

    ok(&[
        "predict-grid",
        "--stack",
        p(&d("stack")),
        "--images",
        p(&d("test")),
        "--templates",
        p(&d("templates.json")),
        "--template-stains",
        p(&d("stains")),
        "--out",
        p(&d("grid")),
    ]);
    assert!(d("grid").join("test_0001").join("stain2_model2.png").exists());

    ok(&["fuse", "--grid", p(&d("grid")), "--topology", "model-stain", "--out", p(&d("fused"))]);
    ok(&["evaluate", "--pred", p(&d("fused")), "--gt", p(&d("test")), "--out", p(&d("eval.csv"))]);
    let eval = std::fs::read_to_string(d("eval.csv")).unwrap();
    assert!(eval.starts_with("image_id,dsc,f1,precision,recall,tp,fp,fn"));
    assert_eq!(eval.lines().count(), 3);

    ok(&["ablate", "--grid", p(&d("grid")), "--gt", p(&d("test")), "--n", "1,3", "--out", p(&d("ablation.csv"))]);
    let table = ResultTable::read_csv(d("ablation.csv")).unwrap();
    assert_eq!(table.aggregates().len(), 8);

    let md = ok(&["report", "--results", p(&d("ablation.csv")), "--baseline", "beds-3-all", "--out", p(&d("report"))]);
    assert!(md.contains("beds-3-all"));
    assert!(d("report").join("summary.csv").exists() && d("report").join("plot.csv").exists());

    let mut config = PipelineConfig { n: 2, m: 1, master_seed: 6, train: hyper, ..PipelineConfig::default() };
    config.data = Some(DataPaths { train: d("train"), val: d("val"), test: d("test") });
    config.output = Some(d("run"));
    std::fs::write(d("run.json"), serde_json::to_string(&config).unwrap()).unwrap();
    ok(&["run", "--config", p(&d("run.json"))]);
    assert!(d("run").join("results.csv").exists());
}

#[test]
fn failures_name_the_stage_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = beds(&["fuse", "--grid", p(&dir.path().join("absent")), "--out", p(&dir.path().join("f"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fuse"));

    let out =
        beds(&["report", "--results", p(&dir.path().join("none.csv")), "--baseline", "all", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("report"));
}

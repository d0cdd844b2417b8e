use std::fs;
use std::path::{Path, PathBuf};

use cxrgen::cli::main_with_args;
use cxrgen::{label, LabelMap, Palette};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("cxrgen").chain(args.iter().copied()))
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["no-such-verb"]), 2);
    assert_eq!(run(&["run", "--bogus-flag"]), 2);
    assert_eq!(run(&["run", "--manifest", "/nonexistent/tiny_three_stage.cfg"]), 2);
    assert_eq!(run(&["run"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "pipeline = \"four_stage\"\n").unwrap();
    assert_eq!(run(&["run", "--config", bad.to_str().unwrap()]), 1);
    let missing = tmp.path().join("nothing");
    assert_eq!(run(&["predict", "--checkpoint", missing.to_str().unwrap(), "--images", ".", "--out", "x"]), 1);
}

#[test]
fn evaluate_writes_csv_and_markdown() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, target) = (tmp.path().join("pred"), tmp.path().join("target"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&target).unwrap();
    let palette = Palette::standard();
    let t = LabelMap::from_raw(2, 2, &[1, 1, 3, 0]).unwrap();
    let p = LabelMap::from_raw(2, 2, &[1, 0, 3, 0]).unwrap();
    label::save_map(&t, &palette, &target.join("a.png")).unwrap();
    label::save_map(&p, &palette, &pred.join("a.png")).unwrap();
    let out = tmp.path().join("report");
    let code = run(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    let md = fs::read_to_string(out.join("metrics.md")).unwrap();
    assert!(md.contains("| J |") && md.contains("| DSC |"));
    // an unmatched prediction is an ingestion failure
    label::save_map(&p, &palette, &pred.join("b.png")).unwrap();
    assert_eq!(run(&["evaluate", "--pred", pred.to_str().unwrap(), "--target", target.to_str().unwrap()]), 1);
}

#[test]
fn run_writes_a_record_and_stage_verbs_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("micro_three_stage.toml");
    let out = format!("output_dir=\"{}\"", tmp.path().display());
    let args = |verb: &'static str| vec![verb, "--config", cfg.to_str().unwrap(), "--set", &out];
    assert_eq!(run(&args("extract-dots")), 0);
    assert!(tmp.path().join("micro_three_stage/dots/done.json").exists());
    assert!(!tmp.path().join("micro_three_stage/gan").exists());
    assert_eq!(run(&args("generate")), 0);
    assert!(tmp.path().join("micro_three_stage/generate/train/split.txt").exists());
    assert_eq!(run(&args("run")), 0);
    let record = tmp.path().join("micro_three_stage/record.json");
    assert!(record.exists());

    let samples = tmp.path().join("samples");
    let gan = tmp.path().join("micro_three_stage/gan/final.ckpt");
    assert_eq!(run(&["sample", "--checkpoint", gan.to_str().unwrap(), "--count", "3", "--out", samples.to_str().unwrap()]), 0);
    assert_eq!(fs::read_dir(&samples).unwrap().count(), 3);

    let images = tmp.path().join("micro_three_stage/data/images");
    let seg = tmp.path().join("micro_three_stage/finetune/model.ckpt");
    let pred = tmp.path().join("pred");
    assert_eq!(
        run(&["predict", "--checkpoint", seg.to_str().unwrap(), "--images", images.to_str().unwrap(), "--out", pred.to_str().unwrap()]),
        0
    );
    let table = tmp.path().join("table.md");
    assert_eq!(run(&["compare", record.to_str().unwrap(), "--out", table.to_str().unwrap()]), 0);
    assert!(fs::read_to_string(&table).unwrap().contains("Synth 3 FINETUNE"));
}

#[test]
fn prepare_phantoms_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ph");
    let code = run(&[
        "prepare-phantoms",
        "--set",
        "data.size=32",
        "--set",
        "data.count=5",
        "--set",
        "data.test_from=3",
        "--set",
        "resolutions.image=32",
        "--set",
        "resolutions.dots=16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let split = fs::read_to_string(out.join("split.txt")).unwrap();
    assert_eq!(split.lines().count(), 5);
    let ingested = tmp.path().join("copy");
    assert_eq!(run(&["ingest", "--root", out.to_str().unwrap(), "--out", ingested.to_str().unwrap()]), 0);
    assert_eq!(fs::read_to_string(ingested.join("split.txt")).unwrap(), split);
}

use std::fs;
use std::path::{Path, PathBuf};

use cxrgen::metrics::{self, Averaging, DEFAULT_SUBSET};
use cxrgen::pipeline::{self, compare, ExperimentManifest, RunRecord};
use cxrgen::{seed, ClassCode, Error, LabelMap};
use rand::Rng;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn manifest(file: &str, out: &Path, extra: &[&str]) -> ExperimentManifest {
    let mut o = vec![format!("output_dir=\"{}\"", out.display())];
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentManifest::load(&config(file), &o).unwrap()
}

/// Stubbed generation at a handful of synthetic pairs.
fn stub(out: &Path, extra: &[&str]) -> ExperimentManifest {
    let mut o = vec!["regime=\"tiny\"", "scale=0.001", "data.count=40", "data.test_from=30"];
    o.extend_from_slice(extra);
    manifest("protocol_stub.toml", out, &o)
}

#[test]
fn resume_skips_finished_stages_and_keeps_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest("micro_three_stage.toml", tmp.path(), &[]);
    let first = pipeline::run(&m).unwrap();
    // drop the last stages to mimic an interrupted run
    fs::remove_dir_all(first.run_dir.join("evaluate")).unwrap();
    fs::remove_file(first.run_dir.join("finetune").join("done.json")).unwrap();
    let second = pipeline::run(&m).unwrap();
    assert_eq!(first.metrics, second.metrics);
    let log = fs::read_to_string(first.run_dir.join("run.log")).unwrap();
    for stage in ["data", "gan", "dots_to_labels", "segment"] {
        assert!(log.contains(&format!("\"event\":\"stage_skipped\",\"stage\":\"{stage}\"")), "{stage} not skipped");
    }
    assert_eq!(log.matches("\"stage_start\",\"stage\":\"finetune\"").count(), 2);
}

#[test]
fn record_is_self_contained() {
    let tmp = tempfile::tempdir().unwrap();
    let r = pipeline::run(&manifest("micro_three_stage.toml", tmp.path(), &[])).unwrap();
    assert_eq!(r.checkpoints.len(), 5, "{:?}", r.checkpoints.keys());
    for p in r.checkpoints.values().chain(r.artifacts.values()) {
        assert!(r.run_dir.join(p).exists(), "{} missing", p.display());
    }
    let loaded = RunRecord::load(&r.run_dir.join("record.json")).unwrap();
    assert_eq!(loaded, r);
    assert_eq!(pipeline::run::reevaluate(&loaded).unwrap(), r.metrics);
    // the stored report is the micro-averaged score of the stored predictions
    let pred_dir = r.run_dir.join("evaluate").join("pred");
    let palette = cxrgen::Palette::standard();
    let data = cxrgen::dataset::load_dataset(&r.run_dir.join("data"), None, &Default::default()).unwrap();
    let pairs: Vec<(LabelMap, LabelMap)> = cxrgen::dataset::of_split(&data, cxrgen::dataset::Split::Test)
        .into_iter()
        .map(|e| (cxrgen::label::load_map(&pred_dir.join(format!("{}.png", e.id)), &palette).unwrap(), e.labels))
        .collect();
    assert_eq!(metrics::report_with(&pairs, &DEFAULT_SUBSET, Averaging::Micro).unwrap(), r.metrics);
}

#[test]
fn changed_manifest_in_old_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline::run(&stub(tmp.path(), &[])).unwrap();
    let err = pipeline::run(&stub(tmp.path(), &["seed=99"])).unwrap_err();
    match err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "data");
            assert!(matches!(*source, Error::State(_)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn failing_stage_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifest(
        "desk_real_only.toml",
        tmp.path(),
        &["data={kind=\"directory\", root=\"/nonexistent/corpus\"}"],
    );
    match pipeline::run(&m).unwrap_err() {
        Error::Stage { stage, .. } => assert_eq!(stage, "data"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn real_only_has_no_generation_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let r = pipeline::run(&stub(tmp.path(), &["pipeline=\"real_only\"", "finetune=true"])).unwrap();
    assert_eq!(r.checkpoints.keys().collect::<Vec<_>>(), vec!["segment"]);
    assert!(!r.finetune);
    assert_eq!(r.counts.synth_pool, 0);
    assert_eq!(r.counts.segmenter_train, r.counts.augmented);
    assert_eq!(r.column(), "REAL");
}

#[test]
fn comparison_requires_one_test_split() {
    let tmp = tempfile::tempdir().unwrap();
    let a = pipeline::run(&stub(tmp.path(), &["name=\"a\"", "pipeline=\"real_only\""])).unwrap();
    let b = pipeline::run(&stub(tmp.path(), &["name=\"b\""])).unwrap();
    let c = pipeline::run(&stub(tmp.path(), &["name=\"c\"", "data.seed=3"])).unwrap();
    let table = compare(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(table.columns, vec!["REAL", "Synth 3"]);
    assert!(matches!(compare(&[a.clone(), c]), Err(Error::Config(_))));
    assert!(matches!(compare(&[b.clone(), b]), Err(Error::Config(_))));
    assert!(matches!(compare(&[]), Err(Error::Config(_))));
    let single = compare(&[a]).unwrap();
    assert_eq!(single.columns.len(), 1);
    assert!(!single.markdown.contains("**"));
}

#[test]
fn best_cell_of_each_row_is_bold() {
    let mut rng = seed::rng(17);
    let mut columns = Vec::new();
    for k in 0..3 {
        let pairs: Vec<(LabelMap, LabelMap)> = (0..4)
            .map(|_| {
                let t = LabelMap::from_raw(8, 8, &(0..64).map(|_| rng.random_range(0..6u8)).collect::<Vec<_>>()).unwrap();
                let p = LabelMap::from_raw(
                    8,
                    8,
                    &t.raw().iter().map(|&c| if rng.random_bool(0.3) { rng.random_range(0..6u8) } else { c }).collect::<Vec<_>>(),
                )
                .unwrap();
                (p, t)
            })
            .collect();
        columns.push((format!("col{k}"), metrics::report(&pairs, &DEFAULT_SUBSET).unwrap()));
    }
    let md = pipeline::markdown_table(&columns, &DEFAULT_SUBSET);
    let rows: Vec<&str> = md.lines().skip(2).collect();
    assert_eq!(rows.len(), 2 * (DEFAULT_SUBSET.len() + 1));
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split('|').map(str::trim).filter(|c| !c.is_empty()).skip(2).collect();
        let values: Vec<f64> = cells.iter().map(|c| c.trim_matches('*').parse().unwrap()).collect();
        let best = values.iter().cloned().fold(f64::MIN, f64::max);
        for (c, v) in cells.iter().zip(&values) {
            assert_eq!(c.starts_with("**"), *v == best, "row {i}: {row}");
        }
        let (metric, organ) = if i < 4 { ("J", i) } else { ("DSC", i - 4) };
        assert!(row.starts_with(&format!("| {metric} |")));
        if organ < 3 {
            let code: ClassCode = DEFAULT_SUBSET[organ];
            assert!(row.contains(code.display_name()));
        } else {
            assert!(row.contains("Average"));
        }
    }
}

//! End-to-end runs of the `legp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use legp::ingest::{parse_markers, MarkerMatrix, ParseOptions, TableFormat};
use legp::partition::read_region_file;
use legp::pipeline::ModelBundle;
use nalgebra::DMatrix;

fn legp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_legp")).args(args).output().expect("run legp")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Simulated local-epistasis data set with 200 lines.
fn dataset(dir: &Path) -> PathBuf {
    let sim = dir.join("sim");
    let o = legp(&["simulate", "--preset", "local-epistasis", "--sim-lines", "200", "--seed", "9", "--out", p(&sim)]);
    assert!(o.status.success(), "{}", stderr(&o));
    sim
}

fn inputs(sim: &Path) -> Vec<String> {
    vec![
        "--markers".into(),
        p(&sim.join("markers.tsv")).into(),
        "--map".into(),
        p(&sim.join("map.tsv")).into(),
        "--pheno".into(),
        p(&sim.join("pheno.tsv")).into(),
    ]
}

fn run_with(cmd: &str, sim: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(inputs(sim));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    legp(&refs)
}

fn read_predictions(path: &Path) -> Vec<(String, f64)> {
    std::fs::read_to_string(path)
        .expect("predictions")
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].parse().expect("number"))
        })
        .collect()
}

fn opts() -> ParseOptions {
    ParseOptions::default()
}

#[test]
fn missing_map_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let o = legp(&[
        "fit",
        "--markers",
        p(&sim.join("markers.tsv")),
        "--pheno",
        p(&sim.join("pheno.tsv")),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("map"), "{}", stderr(&o));
}

#[test]
fn fit_writes_bundle_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_with("fit", &sim, &["--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let table = std::fs::read_to_string(a.join("importance.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    assert_eq!(table, std::fs::read_to_string(b.join("importance.tsv")).unwrap());
    assert!(a.join("manifest.tsv").exists());
}

#[test]
fn predict_reproduces_training_values_and_reorders_columns() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let model = dir.path().join("model");
    let o = run_with("fit", &sim, &["--out", p(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("pred.tsv");
    let o = legp(&["predict", "--model", p(&model), "--markers", p(&sim.join("markers.tsv")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = read_predictions(&out);

    // training lines: G alpha from the stored standardized matrix
    let bundle = ModelBundle::read(&model).unwrap();
    let fitted = &bundle.gebv.values * &bundle.combiner.alpha;
    for (i, id) in bundle.gebv.line_ids.iter().enumerate() {
        let (_, v) = preds.iter().find(|(l, _)| l == id).expect("line predicted");
        assert!((v - fitted[i]).abs() < 1e-8, "{id}: {v} vs {}", fitted[i]);
    }

    // same markers, columns reversed
    let m = parse_markers(&sim.join("markers.tsv"), &opts()).unwrap();
    let rev: Vec<usize> = (0..m.n_markers()).rev().collect();
    let shuffled = MarkerMatrix::new(
        m.line_ids.clone(),
        rev.iter().map(|&j| m.marker_ids[j].clone()).collect(),
        DMatrix::from_fn(m.n_lines(), m.n_markers(), |i, j| m.values[(i, rev[j])]),
        m.coding,
    )
    .unwrap();
    let shuffled_path = dir.path().join("shuffled.tsv");
    shuffled.write(&shuffled_path, TableFormat::Tsv).unwrap();
    let out2 = dir.path().join("pred2.tsv");
    let o = legp(&["predict", "--model", p(&model), "--markers", p(&shuffled_path), "--out", p(&out2)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), std::fs::read_to_string(&out2).unwrap());

    // one marker the model has never seen
    let mut ids = m.marker_ids.clone();
    ids.push("stranger_marker".into());
    let extra = MarkerMatrix::new(
        m.line_ids.clone(),
        ids,
        m.values.clone().insert_column(m.n_markers(), 1.0),
        m.coding,
    )
    .unwrap();
    let extra_path = dir.path().join("extra.tsv");
    extra.write(&extra_path, TableFormat::Tsv).unwrap();
    let o = legp(&["predict", "--model", p(&model), "--markers", p(&extra_path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stranger_marker"), "{}", stderr(&o));
}

#[test]
fn partition_three_chromosomes_gives_six_leaves() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let out = dir.path().join("regions.tsv");
    let o = legp(&[
        "partition",
        "--markers",
        p(&sim.join("markers.tsv")),
        "--map",
        p(&sim.join("map.tsv")),
        "--depth",
        "2",
        "--splits",
        "2",
        "--rule",
        "equal-count",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let markers = parse_markers(&sim.join("markers.tsv"), &opts()).unwrap();
    let h = read_region_file(&out, &markers).unwrap();
    assert_eq!(h.leaves().len(), 6);
    assert_eq!(h.regions_at_level(1).len(), 3);
}

#[test]
fn cv_report_has_one_row_per_replicate_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let out = dir.path().join("cv.tsv");
    let o = run_with("cv", &sim, &["--replicates", "2", "--models", "mk,lin,gaus", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(&out).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 3);
    assert!(dir.path().join("cv.importance.tsv").exists());
    assert!(dir.path().join("cv.manifest.tsv").exists());
}

#[test]
fn assoc_reports_every_region() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let out = dir.path().join("assoc.tsv");
    let o = run_with("assoc", &sim, &["--null-sims", "1000", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().count(), 1 + 10);
    let root = table.lines().nth(1).unwrap();
    assert!(root.starts_with("G\t0\t"), "{root}");
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = legp(&["config", "--dump-defaults"]);
    assert!(defaults.status.success());
    let file = dir.path().join("run.conf");
    std::fs::write(&file, format!("{}\nseed = 17\ndepth = 3\n", String::from_utf8_lossy(&defaults.stdout))).unwrap();
    let o = legp(&["config", "--config", p(&file), "--depth", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l == "seed = 17"));
    assert!(text.lines().any(|l| l == "depth = 4"));

    std::fs::write(&file, "no_such_key = 1\n").unwrap();
    let o = legp(&["config", "--config", p(&file)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    // every genotype identical: no region has a usable kernel
    let m = parse_markers(&sim.join("markers.tsv"), &opts()).unwrap();
    let flat = MarkerMatrix::new(m.line_ids.clone(), m.marker_ids.clone(), DMatrix::from_element(m.n_lines(), m.n_markers(), 1.0), m.coding).unwrap();
    let flat_path = dir.path().join("flat.tsv");
    flat.write(&flat_path, TableFormat::Tsv).unwrap();
    let o = legp(&[
        "fit",
        "--markers",
        p(&flat_path),
        "--map",
        p(&sim.join("map.tsv")),
        "--pheno",
        p(&sim.join("pheno.tsv")),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("G/chr"), "{}", stderr(&o));
}

#[test]
fn tampered_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dataset(dir.path());
    let model = dir.path().join("model");
    let o = run_with("fit", &sim, &["--out", p(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(model.join("manifest.tsv")).unwrap();
    for key in ["format_version", "config_hash", "seed", "input:markers", "file:combiner.tsv"] {
        assert!(manifest.lines().any(|l| l.starts_with(&format!("{key}\t"))), "manifest lacks {key}:\n{manifest}");
    }
    let combiner = model.join("combiner.tsv");
    let text = std::fs::read_to_string(&combiner).unwrap();
    std::fs::write(&combiner, format!("{text}\n")).unwrap();
    let o = legp(&["predict", "--model", p(&model), "--markers", p(&sim.join("markers.tsv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("combiner.tsv"), "{}", stderr(&o));
}

//! One function per subcommand. Each reads its inputs from a [`RunConfig`],
//! writes its outputs (when `out` is set) and returns the in-memory result.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DVector;

use super::bundle::{importance_table, sha256_file, ModelBundle};
use super::config::RunConfig;
use crate::combiner::fit_combiner;
use crate::cv::{parse_models, run_cv, CvOptions, CvReport};
use crate::error::{Error, Result};
use crate::ingest::{align, parse_covariates, parse_map, parse_markers, parse_phenotypes, GeneticMap, MarkerMatrix, PhenotypeTable, TableFormat};
use crate::local_gebv::{fit_all_regions, local_gebv_for_new, model_regions, region_problem, TrainingSet};
use crate::partition::{build_hierarchy, read_region_file, RegionHierarchy};
use crate::simulate::{preset, simulate, write_dataset, SimData};
use crate::testing::{hierarchical_test, write_tests, RegionTest};

/// Input files that were read, with their checksums.
#[derive(Debug, Default, Clone)]
pub struct InputLog(pub Vec<(String, String)>);

impl InputLog {
    fn record(&mut self, key: &str, path: &Path) -> Result<()> {
        self.0.push((key.to_string(), sha256_file(path)?));
        Ok(())
    }
}

fn fmt_of(path: &Path) -> TableFormat {
    TableFormat::from_path(path)
}

pub fn load_markers(cfg: &RunConfig, log: &mut InputLog) -> Result<MarkerMatrix> {
    let path = cfg.required_path("markers")?;
    let opts = crate::ingest::ParseOptions {
        format: fmt_of(&path),
        ..cfg.parse_options()?
    };
    let m = parse_markers(&path, &opts)?;
    log.record("markers", &path)?;
    info!("{} lines x {} markers", m.n_lines(), m.n_markers());
    Ok(m)
}

fn load_map(cfg: &RunConfig, log: &mut InputLog) -> Result<GeneticMap> {
    let path = cfg.required_path("map")?;
    let map = parse_map(&path, fmt_of(&path))?;
    log.record("map", &path)?;
    Ok(map)
}

fn load_phenotypes(cfg: &RunConfig, log: &mut InputLog) -> Result<PhenotypeTable> {
    let path = cfg.required_path("pheno")?;
    let p = parse_phenotypes(&path, fmt_of(&path), cfg.get("missing_code"))?;
    log.record("pheno", &path)?;
    Ok(p)
}

/// The configured trait, or the only trait of the table.
pub fn resolve_trait(cfg: &RunConfig, phenos: &PhenotypeTable) -> Result<String> {
    if cfg.is_set("trait") {
        let t = cfg.get("trait");
        if !phenos.trait_ids.iter().any(|x| x == t) {
            return Err(Error::Config(format!("trait `{t}` not found in phenotype table")));
        }
        return Ok(t.to_string());
    }
    match phenos.trait_ids.as_slice() {
        [one] => Ok(one.clone()),
        _ => Err(Error::Config(format!(
            "phenotype table holds {} traits; choose one with `trait` (--trait)",
            phenos.trait_ids.len()
        ))),
    }
}

/// Hierarchy from an explicit region file, or built from the map.
pub fn load_hierarchy(cfg: &RunConfig, markers: &MarkerMatrix, log: &mut InputLog) -> Result<RegionHierarchy> {
    if let Some(path) = cfg.optional_path("regions") {
        let mut h = read_region_file(&path, markers)?;
        log.record("regions", &path)?;
        if cfg.is_set("map") {
            h.annotate_spans(&load_map(cfg, log)?, markers);
        }
        return Ok(h);
    }
    let map = load_map(cfg, log)?;
    let mut h = build_hierarchy(&map, markers, cfg.parse("depth")?, cfg.parse("splits")?, cfg.split_rule()?)?;
    h.annotate_spans(&map, markers);
    Ok(h)
}

fn training_set(cfg: &RunConfig, markers: &MarkerMatrix, log: &mut InputLog) -> Result<(String, TrainingSet, Vec<String>)> {
    let phenos = load_phenotypes(cfg, log)?;
    let trait_id = resolve_trait(cfg, &phenos)?;
    let al = align(markers, &phenos, &trait_id)?;
    let cov = match cfg.optional_path("covariates") {
        Some(p) => {
            let t = parse_covariates(&p, fmt_of(&p))?;
            log.record("covariates", &p)?;
            Some(t)
        }
        None => None,
    };
    let data = TrainingSet::from_alignment(&al, cov.as_ref())?;
    let names = cov.map(|c| c.names).unwrap_or_default();
    Ok((trait_id, data, names))
}

/// Write a small manifest next to a run's output.
fn write_run_manifest(path: &Path, cfg: &RunConfig, log: &InputLog, outputs: &[PathBuf]) -> Result<()> {
    let mut s = String::from("key\tvalue\n");
    let _ = writeln!(s, "library_version\t{}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed\t{}", cfg.get("seed"));
    let _ = writeln!(s, "config_hash\t{}", cfg.hash());
    for (k, v) in &log.0 {
        let _ = writeln!(s, "input:{k}\t{v}");
    }
    for o in outputs {
        let name = o.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(s, "output:{name}\t{}", sha256_file(o)?);
    }
    let _ = writeln!(s, "config\t{}", cfg.dump().trim_end().replace('\n', "; "));
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

pub fn cmd_partition(cfg: &RunConfig) -> Result<RegionHierarchy> {
    let mut log = InputLog::default();
    let markers = load_markers(cfg, &mut log)?;
    let h = load_hierarchy(cfg, &markers, &mut log)?;
    if let Some(out) = cfg.optional_path("out") {
        h.write_region_file(&out, &markers)?;
        write_run_manifest(&sidecar(&out, "manifest.tsv"), cfg, &log, &[out])?;
    }
    Ok(h)
}

/// Partition, fit every region, combine. Nothing is written.
pub fn fit_model(cfg: &RunConfig) -> Result<ModelBundle> {
    let mut log = InputLog::default();
    let markers = load_markers(cfg, &mut log)?;
    let hierarchy = load_hierarchy(cfg, &markers, &mut log)?;
    let (trait_id, data, covariate_names) = training_set(cfg, &markers, &mut log)?;
    let local = cfg.local_options()?;
    let regions = model_regions(&hierarchy, local.all_levels);
    if regions.len() < 2 {
        return Err(Error::Config(format!(
            "the hierarchy has {} model region(s); at least 2 are needed",
            regions.len()
        )));
    }
    info!("fitting {} regions on {} lines", regions.len(), data.n_lines());
    let (fits, gebv) = fit_all_regions(&markers, &data, &regions, &local)?;
    let flagged = gebv.flagged.iter().filter(|&&f| f).count();
    if flagged > 0 {
        info!("{flagged} constant or failed region column(s) zeroed");
    }
    let combiner = fit_combiner(
        &gebv.for_observations(&data.z),
        &data.covariates,
        &data.y,
        &gebv.region_ids,
        &cfg.combiner_options()?,
        Some(data.groups()),
    )?;
    info!(
        "lambda1 = {}, {} of {} regions selected",
        combiner.lambda1,
        combiner.alpha.iter().filter(|&&a| a != 0.0).count(),
        gebv.n_regions()
    );
    Ok(ModelBundle {
        config: cfg.clone(),
        trait_id,
        train_markers: markers.select_lines(&data.rows),
        hierarchy,
        fits,
        gebv,
        combiner,
        covariate_names,
        inputs: log.0,
    })
}

/// Fit and write the bundle to `out`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<ModelBundle> {
    let out = cfg.required_path("out")?;
    let bundle = fit_model(cfg)?;
    bundle.write(&out)?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub line_id: String,
    pub genotypic_value: f64,
    /// `None` when the model has covariates but none were supplied.
    pub full_prediction: Option<f64>,
}

/// Predict new lines from a bundle. Marker columns are matched by id.
pub fn predict_with(bundle: &ModelBundle, new_markers: &MarkerMatrix, covariates: Option<&crate::ingest::FixedEffectTable>) -> Result<Vec<Prediction>> {
    let new = new_markers.reorder_markers(&bundle.train_markers.marker_ids)?;
    let train_rows: Vec<usize> = (0..bundle.train_markers.n_lines()).collect();
    let new_rows: Vec<usize> = (0..new.n_lines()).collect();
    let g = local_gebv_for_new(&bundle.fits, &bundle.gebv, &bundle.train_markers, &train_rows, &new, &new_rows)?;
    let genotypic: DVector<f64> = &g * &bundle.combiner.alpha;
    let fixed: Option<DVector<f64>> = if bundle.covariate_names.is_empty() {
        Some(DVector::zeros(new.n_lines()))
    } else {
        covariates
            .and_then(|t| t.for_lines(&new.line_ids))
            .map(|x| x * &bundle.combiner.beta)
    };
    Ok(new
        .line_ids
        .iter()
        .enumerate()
        .map(|(i, l)| Prediction {
            line_id: l.clone(),
            genotypic_value: genotypic[i],
            full_prediction: fixed.as_ref().map(|f| bundle.combiner.beta0 + genotypic[i] + f[i]),
        })
        .collect())
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut s = String::from("line_id\tgenotypic_value\tfull_prediction\n");
    for p in preds {
        let full = p.full_prediction.map_or("NA".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{}\t{}\t{full}", p.line_id, p.genotypic_value);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<Prediction>> {
    let dir = cfg.required_path("model")?;
    let bundle = ModelBundle::read(&dir)?;
    let mut log = InputLog::default();
    let path = cfg.required_path("markers")?;
    let opts = crate::ingest::ParseOptions {
        format: fmt_of(&path),
        coding: bundle.train_markers.coding,
        missing_code: cfg.get("missing_code").to_string(),
    };
    let new = parse_markers(&path, &opts)?;
    log.record("markers", &path)?;
    let cov = match cfg.optional_path("covariates") {
        Some(p) => {
            log.record("covariates", &p)?;
            Some(parse_covariates(&p, fmt_of(&p))?)
        }
        None => None,
    };
    let preds = predict_with(&bundle, &new, cov.as_ref())?;
    if let Some(out) = cfg.optional_path("out") {
        write_predictions(&preds, &out)?;
        write_run_manifest(&sidecar(&out, "manifest.tsv"), cfg, &log, &[out])?;
    }
    Ok(preds)
}

pub fn cmd_assoc(cfg: &RunConfig) -> Result<Vec<RegionTest>> {
    let plan = cfg.test_plan()?;
    let mut log = InputLog::default();
    let markers = load_markers(cfg, &mut log)?;
    let h = load_hierarchy(cfg, &markers, &mut log)?;
    let (_, data, _) = training_set(cfg, &markers, &mut log)?;
    let local = cfg.local_options()?;
    let tests = hierarchical_test(&plan, &h, |r| {
        region_problem(&markers, &data, &r.marker_indices, &local).map(|rp| rp.problem)
    })?;
    if let Some(out) = cfg.optional_path("out") {
        write_tests(&tests, &out)?;
        write_run_manifest(&sidecar(&out, "manifest.tsv"), cfg, &log, &[out])?;
    }
    Ok(tests)
}

pub fn cmd_cv(cfg: &RunConfig) -> Result<CvReport> {
    let mut log = InputLog::default();
    let markers = load_markers(cfg, &mut log)?;
    let h = load_hierarchy(cfg, &markers, &mut log)?;
    let (_, data, _) = training_set(cfg, &markers, &mut log)?;
    let local = cfg.local_options()?;
    let regions = model_regions(&h, local.all_levels);
    let opts = CvOptions {
        models: parse_models(cfg.get("models"))?,
        train_frac: cfg.parse("train_frac")?,
        replicates: cfg.parse("replicates")?,
        seed: crate::rng::derive_seed(cfg.parse("seed")?, "cv"),
        local,
        combiner: cfg.combiner_options()?,
    };
    let report = run_cv(&markers, &data, &regions, &opts)?;
    if let Some(out) = cfg.optional_path("out") {
        report.write_report(&out)?;
        let imp = sidecar(&out, "importance.tsv");
        report.write_importance(&imp)?;
        write_run_manifest(&sidecar(&out, "manifest.tsv"), cfg, &log, &[out, imp])?;
    }
    Ok(report)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimData> {
    let mut sim = preset(cfg.get("preset"))?;
    sim.seed = crate::rng::derive_seed(cfg.parse("seed")?, "simulate");
    if cfg.is_set("sim_lines") {
        sim.n_lines = cfg.parse("sim_lines")?;
    }
    let data = simulate(&sim)?;
    if let Some(out) = cfg.optional_path("out") {
        write_dataset(&data, &out)?;
        let files: Vec<PathBuf> = ["markers.tsv", "map.tsv", "pheno.tsv", "truth.tsv"]
            .iter()
            .map(|f| out.join(f))
            .collect();
        write_run_manifest(&out.join("manifest.tsv"), cfg, &InputLog::default(), &files)?;
    }
    Ok(data)
}

/// Importance table text of a fitted bundle.
pub fn importance_text(bundle: &ModelBundle) -> String {
    importance_table(&bundle.combiner, &bundle.hierarchy)
}

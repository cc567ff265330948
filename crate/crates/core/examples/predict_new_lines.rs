//! Fit on phenotyped lines, save the model bundle, load it back and predict
//! lines that were genotyped but never phenotyped.
//!
//! ```text
//! cargo run --release --example predict_new_lines
//! ```

use legp::ingest::{PhenotypeTable, TableFormat};
use legp::pipeline::{fit_model, predict_with, ModelBundle, RunConfig};
use legp::simulate::{preset, simulate, write_dataset};

fn main() -> legp::Result<()> {
    let cfg = preset("mixed")?;
    let sim = simulate(&cfg)?;
    let dir = std::env::temp_dir().join(format!("legp-predict-{}", std::process::id()));
    write_dataset(&sim, &dir)?;

    // phenotypes for the first 400 lines only
    let n_train = 400;
    let train_ids = &sim.markers.line_ids[..n_train];
    let kept = sim.phenotypes.records.iter().filter(|r| train_ids.contains(&r.line_id)).cloned().collect();
    PhenotypeTable::new(kept)?.write(&dir.join("pheno_train.tsv"))?;

    let mut run = RunConfig::default();
    run.set("markers", dir.join("markers.tsv").to_str().unwrap())?;
    run.set("map", dir.join("map.tsv").to_str().unwrap())?;
    run.set("pheno", dir.join("pheno_train.tsv").to_str().unwrap())?;
    let bundle = fit_model(&run)?;
    bundle.write(&dir.join("model"))?;
    let bundle = ModelBundle::read(&dir.join("model"))?;
    println!("bundle at {} ({} regions)", dir.join("model").display(), bundle.fits.len());

    let new_rows: Vec<usize> = (n_train..sim.markers.n_lines()).collect();
    let new = sim.markers.select_lines(&new_rows);
    new.write(&dir.join("new_markers.tsv"), TableFormat::Tsv)?;
    let preds = predict_with(&bundle, &new, None)?;

    let pred: Vec<f64> = preds.iter().map(|p| p.genotypic_value).collect();
    let truth: Vec<f64> = new_rows.iter().map(|&i| sim.truth.g_true[i]).collect();
    for p in preds.iter().take(5) {
        println!("{}  {:+.3}", p.line_id, p.genotypic_value);
    }
    println!("cor(prediction, true genetic value) on {} new lines: {:.3}", preds.len(), legp::stats::pearson(&pred, &truth));
    Ok(())
}

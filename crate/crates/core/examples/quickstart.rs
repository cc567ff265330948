//! Simulate a population with one epistatic pair, fit a local model per leaf
//! region and combine them with the lasso.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use legp::combiner::{fit_combiner, importance_scores, CombinerOptions};
use legp::ingest::align;
use legp::local_gebv::{fit_all_regions, model_regions, LocalGebvOptions, TrainingSet};
use legp::partition::{build_hierarchy, SplitRule};
use legp::simulate::{preset, simulate};

fn main() -> legp::Result<()> {
    let cfg = preset("local-epistasis")?;
    let sim = simulate(&cfg)?;
    println!(
        "{} lines x {} markers, realized h2 {:.3}",
        sim.markers.n_lines(),
        sim.markers.n_markers(),
        sim.truth.realized_h2
    );
    for p in &sim.truth.pairs {
        println!("planted pair in {} (effect {})", p.leaf_id, p.effect);
    }

    let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount)?;
    let al = align(&sim.markers, &sim.phenotypes, &cfg.trait_id)?;
    let data = TrainingSet::from_alignment(&al, None)?;

    let opts = LocalGebvOptions::default();
    let regions = model_regions(&h, false);
    let (fits, gebv) = fit_all_regions(&sim.markers, &data, &regions, &opts)?;
    for f in &fits {
        if let Some(m) = &f.model {
            println!("{:<10} s2g {:.4}  s2e {:.4}  {}", f.region_id, m.sigma2_g, m.sigma2_e, m.status.as_str());
        }
    }

    let model = fit_combiner(
        &gebv.for_observations(&data.z),
        &data.covariates,
        &data.y,
        &gebv.region_ids,
        &CombinerOptions::default(),
        Some(data.groups()),
    )?;
    println!("lambda1 = {:.4}", model.lambda1);
    for (id, score) in importance_scores(&model) {
        println!("{id:<10} {score:.4}");
    }
    Ok(())
}

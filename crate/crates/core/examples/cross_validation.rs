//! Compare the multi-kernel predictor with whole-genome linear and Gaussian
//! kernels over repeated random splits of the lines.
//!
//! ```text
//! cargo run --release --example cross_validation -- [preset] [replicates]
//! ```

use legp::cv::{run_cv, CvOptions, ModelKind};
use legp::ingest::align;
use legp::local_gebv::{model_regions, TrainingSet};
use legp::partition::{build_hierarchy, SplitRule};
use legp::simulate::{preset, simulate};

fn main() -> legp::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "local-epistasis".into());
    let replicates: usize = args.next().map_or(5, |s| s.parse().expect("replicates"));

    let cfg = preset(&name)?;
    let sim = simulate(&cfg)?;
    let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount)?;
    let data = TrainingSet::from_alignment(&align(&sim.markers, &sim.phenotypes, &cfg.trait_id)?, None)?;
    let opts = CvOptions { replicates, seed: 11, ..CvOptions::default() };
    let report = run_cv(&sim.markers, &data, &model_regions(&h, false), &opts)?;

    println!("scenario {name}, {replicates} replicates, train fraction {}", report.train_frac);
    for m in &opts.models {
        let (mean, sd) = report.summary(*m);
        println!("  {:<5} accuracy {mean:.3} (sd {sd:.3})", m.name());
    }
    if opts.models.contains(&ModelKind::MultiKernel) {
        println!("mean |alpha| per region:");
        for (id, v) in report.region_ids.iter().zip(&report.mean_importance) {
            println!("  {id:<10} {v:.4}");
        }
    }
    Ok(())
}

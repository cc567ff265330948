//! Test region variance components from the genome down, stopping below
//! any region that is not rejected.
//!
//! ```text
//! cargo run --release --example hierarchical_test
//! ```

use legp::ingest::align;
use legp::local_gebv::{region_problem, LocalGebvOptions, TrainingSet};
use legp::partition::{build_hierarchy, SplitRule};
use legp::simulate::{preset, simulate};
use legp::testing::{hierarchical_test, TestPlan};

fn main() -> legp::Result<()> {
    let cfg = preset("local-epistasis")?;
    let sim = simulate(&cfg)?;
    let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount)?;
    let data = TrainingSet::from_alignment(&align(&sim.markers, &sim.phenotypes, &cfg.trait_id)?, None)?;
    let opts = LocalGebvOptions::default();
    let plan = TestPlan { null_sims: 2000, ..TestPlan::default() };

    let tests = hierarchical_test(&plan, &h, |r| {
        region_problem(&sim.markers, &data, &r.marker_indices, &opts).map(|rp| rp.problem)
    })?;
    println!("planted leaf: {}", sim.truth.pairs[0].leaf_id);
    println!("{:<12} {:>8} {:>8} {:>8}  decision", "region", "stat", "p", "alpha_H");
    for t in &tests {
        let decision = match (t.tested, t.rejected) {
            (false, _) => "not tested",
            (true, true) => "reject",
            (true, false) => "keep",
        };
        println!(
            "{}{:<w$} {:>8} {:>8} {:>8.4}  {decision}",
            "  ".repeat(t.level),
            t.region_id,
            t.rlrt_stat.map_or("-".into(), |s| format!("{s:.2}")),
            t.p_value.map_or("-".into(), |p| format!("{p:.4}")),
            t.alpha_local,
            w = 12 - 2 * t.level,
        );
    }
    Ok(())
}

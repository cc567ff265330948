//! Cluster traits by their region importance profiles.
//!
//! Four traits share one population but differ in where their epistatic
//! pairs sit; traits driven by the same regions end up next to each other.

use legp::combiner::{fit_combiner, CombinerOptions};
use legp::cv::trait_similarity;
use legp::ingest::align;
use legp::local_gebv::{fit_all_regions, model_regions, LocalGebvOptions, TrainingSet};
use legp::partition::{build_hierarchy, SplitRule};
use legp::simulate::{simulate, PairSpec, SimConfig};

fn main() -> legp::Result<()> {
    let designs: [(&str, &[usize]); 4] = [("A", &[0]), ("A2", &[0, 1]), ("B", &[4]), ("B2", &[4, 5])];
    let mut profiles = Vec::new();
    for (i, (name, leaves)) in designs.iter().enumerate() {
        let cfg = SimConfig {
            n_lines: 300,
            n_additive_qtl: 0,
            epistatic_pairs: leaves.iter().map(|&leaf| PairSpec { leaf, effect: 1.0 }).collect(),
            h2: 0.6,
            seed: 100 + i as u64,
            trait_id: name.to_string(),
            ..SimConfig::default()
        };
        let sim = simulate(&cfg)?;
        let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount)?;
        let data = TrainingSet::from_alignment(&align(&sim.markers, &sim.phenotypes, name)?, None)?;
        let (_, gebv) = fit_all_regions(&sim.markers, &data, &model_regions(&h, false), &LocalGebvOptions::default())?;
        let m = fit_combiner(
            &gebv.for_observations(&data.z),
            &data.covariates,
            &data.y,
            &gebv.region_ids,
            &CombinerOptions::default(),
            None,
        )?;
        let imp: Vec<f64> = m.importance.clone();
        println!("{name:<3} {}", imp.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
        profiles.push((name.to_string(), imp));
    }

    let tree = trait_similarity(&profiles)?;
    for m in &tree.merges {
        println!("merge {} + {} at {:.3} (size {})", m.a, m.b, m.distance, m.size);
    }
    println!("{}", tree.newick);
    Ok(())
}

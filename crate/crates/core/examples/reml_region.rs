//! Fit one region's kernel mixed model by REML and inspect the profile,
//! the EBLUPs and the restricted likelihood ratio test.

use legp::ingest::align;
use legp::local_gebv::{region_problem, LocalGebvOptions, TrainingSet};
use legp::partition::{build_hierarchy, SplitRule};
use legp::reml::{eblup, fit_reml, RemlProfile};
use legp::simulate::{preset, simulate};
use legp::testing::rlrt_region;

fn main() -> legp::Result<()> {
    let cfg = preset("local-epistasis")?;
    let sim = simulate(&cfg)?;
    let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount)?;
    let data = TrainingSet::from_alignment(&align(&sim.markers, &sim.phenotypes, &cfg.trait_id)?, None)?;
    let opts = LocalGebvOptions::default();

    let planted = &sim.truth.pairs[0].leaf_id;
    let quiet = h.leaves().into_iter().find(|r| &r.id != planted).expect("two leaves").id.clone();
    for id in [planted.clone(), quiet] {
        let region = h.region(&id)?;
        let rp = region_problem(&sim.markers, &data, &region.marker_indices, &opts)?;
        let fit = fit_reml(&rp.problem)?;
        println!("region {id}: {} markers, {} PCs in X*", region.n_markers(), rp.pcs.r());
        println!(
            "  s2g {:.4}  s2e {:.4}  delta {}  status {}",
            fit.sigma2_g,
            fit.sigma2_e,
            fit.delta.map_or("inf".into(), |d| format!("{d:.4}")),
            fit.status.as_str()
        );

        // the restricted log-likelihood along ln(delta)
        let profile = RemlProfile::new(&rp.problem)?;
        let eta = profile.contrasts(&rp.problem.y);
        for ln_d in [-4.0, -2.0, 0.0, 2.0, 4.0] {
            println!("  ln delta {ln_d:>4}: {:.3}", profile.loglik(&eta, Some(f64::exp(ln_d))));
        }
        println!("  null: {:.3}", profile.loglik(&eta, None));

        let g = eblup(&fit, &rp.problem)?;
        let truth: Vec<f64> = data.rows.iter().map(|&i| sim.truth.g_true[i]).collect();
        if fit.sigma2_g > 0.0 {
            println!("  cor(EBLUP, true g) {:.3}", legp::stats::pearson(g.as_slice(), &truth));
        } else {
            println!("  EBLUPs are all zero on the boundary");
        }

        let t = rlrt_region(&rp.problem, 2000, 7, &id)?;
        println!("  RLRT {:.3}, p = {:.4}", t.stat, t.p_value);
    }
    Ok(())
}

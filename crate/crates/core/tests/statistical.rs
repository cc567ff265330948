//! Simulation-backed checks of the statistical behaviour: each test plants
//! a known architecture (or none) and checks what the fits recover.

mod common;

use legp::combiner::{fit_combiner, CombinerOptions};
use legp::cv::{run_cv, CvOptions};
use legp::ingest::{align, Incidence};
use legp::kernel::{gram, normalize, KernelSpec};
use legp::local_gebv::{fit_all_regions, model_regions, region_problem, LocalGebvOptions, TrainingSet};
use legp::partition::{build_hierarchy, SplitRule};
use legp::reml::{fit_reml, SpmmProblem};
use legp::simulate::{preset, simulate, SimConfig, SimData};
use legp::stats::{mean, sd};
use legp::testing::{hierarchical_test, rlrt_region, TestPlan};
use nalgebra::{DMatrix, DVector};

use common::*;

fn markers_only(n: usize, n_chrom: usize, seed: u64) -> SimData {
    simulate(&SimConfig { n_lines: n, n_chrom, seed, ..SimConfig::default() }).unwrap()
}

fn noise(n: usize, seed: u64) -> DVector<f64> {
    let mut r = rng(seed);
    DVector::from_fn(n, |_, _| normal(&mut r))
}

#[test]
fn pure_noise_columns_are_flagged_and_not_selected() {
    let reps = 50;
    let (mut both_flagged, mut none_selected) = (0, 0);
    for r in 0..reps {
        let sim = markers_only(200, 2, 300 + r);
        let h = build_hierarchy(&sim.map, &sim.markers, 1, 2, SplitRule::EqualCount).unwrap();
        let data = TrainingSet::per_line(&sim.markers, (0..200).collect(), noise(200, 900 + r));
        let regions = model_regions(&h, false);
        assert_eq!(regions.len(), 2);
        let (fits, gebv) = fit_all_regions(&sim.markers, &data, &regions, &LocalGebvOptions::default()).unwrap();
        for (f, &flag) in fits.iter().zip(&gebv.flagged) {
            let zero = f.model.as_ref().map_or(true, |m| m.sigma2_g == 0.0);
            // a zero-variance fit is always flagged
            assert!(!zero || flag, "{} has s2g = 0 but is not flagged", f.region_id);
        }
        let m = fit_combiner(&gebv.for_observations(&data.z), &data.covariates, &data.y, &gebv.region_ids, &CombinerOptions::default(), None).unwrap();
        if gebv.flagged.iter().all(|&f| f) {
            both_flagged += 1;
            assert!(m.alpha.iter().all(|&a| a == 0.0), "flagged columns must never be selected");
        }
        if m.alpha.iter().all(|&a| a == 0.0) {
            none_selected += 1;
        }
    }
    // REML puts roughly half of its null mass on the boundary per column,
    // so both columns hit it together in about a third of the runs
    assert!(both_flagged as f64 >= 0.2 * reps as f64, "both flagged in {both_flagged}/{reps}");
    assert!(none_selected as f64 >= 0.2 * reps as f64, "nothing selected in {none_selected}/{reps}");
}

#[test]
fn additive_qtl_leaf_has_largest_raw_column() {
    let reps = 30;
    let mut hits = 0;
    for r in 0..reps {
        let sim = markers_only(300, 3, 400 + r);
        let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount).unwrap();
        let leaves = model_regions(&h, false);
        assert_eq!(leaves.len(), 6);
        // one QTL in the middle of the third leaf, h2 = 0.5
        let qtl = leaves[2].marker_indices[leaves[2].n_markers() / 2];
        let x: Vec<f64> = (0..300).map(|i| sim.markers.values[(i, qtl)]).collect();
        let (mx, sx) = (mean(&x), sd(&x));
        let e = noise(300, 700 + r);
        let y = DVector::from_fn(300, |i, _| (x[i] - mx) / sx + e[i]);
        let data = TrainingSet::per_line(&sim.markers, (0..300).collect(), y);
        let (_, gebv) = fit_all_regions(&sim.markers, &data, &leaves, &LocalGebvOptions::default()).unwrap();
        let top = (0..6).fold(0, |b, j| if gebv.col_sds[j] > gebv.col_sds[b] { j } else { b });
        hits += (top == 2) as usize;
    }
    assert!(hits * 10 >= reps as usize * 8, "QTL leaf largest in {hits}/{reps}");
}

fn region_kernel(sim: &SimData, cols: std::ops::Range<usize>) -> legp::kernel::KernelMatrix {
    let n = sim.markers.n_lines();
    let x = sim.markers.submatrix(&(0..n).collect::<Vec<_>>(), &cols.collect::<Vec<_>>());
    normalize(&gram(&x, &KernelSpec::linear(), None).unwrap()).unwrap()
}

#[test]
fn strong_signal_is_detected() {
    let mut small = 0;
    for r in 0..20 {
        let sim = markers_only(200, 1, 500 + r);
        let k = region_kernel(&sim, 0..30);
        // g ~ N(0, 5 K), e ~ N(0, 1)
        let eig = k.values.clone().symmetric_eigen();
        let mut rg = rng(600 + r);
        let w = DVector::from_fn(200, |i, _| normal(&mut rg) * eig.eigenvalues[i].max(0.0).sqrt());
        let g = &eig.eigenvectors * w * 5f64.sqrt();
        let y = g + noise(200, 650 + r);
        let p = SpmmProblem::new(y, DMatrix::from_element(200, 1, 1.0), Incidence::identity(200), k).unwrap();
        let t = rlrt_region(&p, 1000, r, "strong").unwrap();
        small += (t.p_value < 0.001) as usize;
    }
    assert!(small >= 19, "p < 0.001 in {small}/20");
}

#[test]
fn null_p_values_are_not_anticonservative() {
    let sims = 200;
    let sim = markers_only(50, 1, 77);
    let k = region_kernel(&sim, 0..30);
    let ps: Vec<f64> = (0..sims)
        .map(|r| {
            let p = SpmmProblem::new(noise(50, 1000 + r), DMatrix::from_element(50, 1, 1.0), Incidence::identity(50), k.clone()).unwrap();
            rlrt_region(&p, 1000, r, "null").unwrap().p_value
        })
        .collect();
    for t in [0.05, 0.1, 0.25, 0.5] {
        let frac = ps.iter().filter(|&&p| p <= t).count() as f64 / sims as f64;
        let bound = t + 2.0 * (t * (1.0 - t) / sims as f64).sqrt();
        assert!(frac <= bound, "P(p <= {t}) = {frac} > {bound}");
    }
}

#[test]
fn planted_leaf_path_is_rejected() {
    let reps = 30;
    let mut good = 0;
    let mut failures = Vec::new();
    for r in 0..reps {
        let cfg = SimConfig { n_lines: 300, seed: 800 + r, ..preset("local-epistasis").unwrap() };
        let sim = simulate(&cfg).unwrap();
        let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount).unwrap();
        let data = TrainingSet::from_alignment(&align(&sim.markers, &sim.phenotypes, &cfg.trait_id).unwrap(), None).unwrap();
        let opts = LocalGebvOptions::default();
        let plan = TestPlan { null_sims: 1000, seed: r, ..TestPlan::default() };
        let tests = hierarchical_test(&plan, &h, |reg| {
            region_problem(&sim.markers, &data, &reg.marker_indices, &opts).map(|rp| rp.problem)
        })
        .unwrap();
        let leaf = &sim.truth.pairs[0].leaf_id;
        let rejected = |id: &str| tests.iter().any(|t| t.region_id == id && t.rejected);
        let mut path = vec![leaf.clone()];
        while let Some(parent) = h.region(path.last().unwrap()).unwrap().parent.clone() {
            path.push(parent);
        }
        let siblings: Vec<String> = h
            .children(h.region(leaf).unwrap().parent.as_deref().unwrap())
            .iter()
            .map(|c| c.id.clone())
            .filter(|id| id != leaf)
            .collect();
        let ok = path.iter().all(|id| rejected(id)) && siblings.iter().all(|id| !rejected(id));
        if ok {
            good += 1;
        } else {
            failures.push(r);
        }
    }
    assert!(good * 10 >= reps as usize * 8, "path rejected with quiet siblings in {good}/{reps}; failed {failures:?}");
}

#[test]
fn pure_noise_accuracy_is_centred_on_zero() {
    let reps = 30;
    let opts = CvOptions { replicates: 1, ..CvOptions::default() };
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); opts.models.len()];
    for r in 0..reps {
        let sim = markers_only(200, 3, 1100 + r);
        let h = build_hierarchy(&sim.map, &sim.markers, 2, 2, SplitRule::EqualCount).unwrap();
        let data = TrainingSet::per_line(&sim.markers, (0..200).collect(), noise(200, 1200 + r));
        let rep = run_cv(&sim.markers, &data, &model_regions(&h, false), &CvOptions { seed: r, ..opts.clone() }).unwrap();
        for (i, m) in opts.models.iter().enumerate() {
            acc[i].push(rep.summary(*m).0);
        }
    }
    for (i, m) in opts.models.iter().enumerate() {
        let se = sd(&acc[i]) / (reps as f64).sqrt();
        assert!(mean(&acc[i]).abs() <= 3.0 * se, "{}: mean {} se {}", m.name(), mean(&acc[i]), se);
    }
}

#[test]
fn reml_scale_equivariance() {
    let mut r = rng(31);
    for _ in 0..10 {
        let p = random_spmm(&mut r, 30, 20);
        let fit = fit_reml(&p).unwrap();
        let a = 3.7;
        let scaled = SpmmProblem::new(&p.y * a, p.xstar.clone(), p.z.clone(), p.k.clone()).unwrap();
        let fs = fit_reml(&scaled).unwrap();
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-12);
        assert!(rel(fs.sigma2_g, a * a * fit.sigma2_g) < 1e-8 || (fs.sigma2_g == 0.0 && fit.sigma2_g == 0.0));
        assert!(rel(fs.sigma2_e, a * a * fit.sigma2_e) < 1e-8);
        let diff = (&fs.ebluphat - &fit.ebluphat * a).amax();
        assert!(diff <= 1e-8 * (a * fit.ebluphat.amax()).max(1e-12), "{diff}");
    }
}

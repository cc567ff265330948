//! Variance-component tests per region and the top-down hierarchical
//! procedure that controls the family-wise error rate.
//!
//! A node is tested only once its parent is rejected; node `H` is tested at
//! `alpha * |H| / |H0|`, with sizes counted in markers.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::partition::{Region, RegionHierarchy};
use crate::reml::{RemlProfile, SpmmProblem};
use crate::rng::indexed_stream;

/// Null draws per independent random stream.
const SIM_CHUNK: usize = 250;
/// Simulated statistics this close below the observed one still count.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestPlan {
    pub alpha: f64,
    pub null_sims: usize,
    pub seed: u64,
}

impl Default for TestPlan {
    fn default() -> Self {
        TestPlan {
            alpha: 0.05,
            null_sims: 10_000,
            seed: 0,
        }
    }
}

impl TestPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.null_sims < 1000 {
            return Err(Error::Config(format!("null_sims must be at least 1000, got {}", self.null_sims)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionTest {
    pub region_id: String,
    pub level: usize,
    pub n_markers: usize,
    pub rlrt_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub alpha_local: f64,
    pub tested: bool,
    pub rejected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rlrt {
    pub stat: f64,
    pub p_value: f64,
}

fn stat_for(profile: &RemlProfile, eta: &DVector<f64>) -> f64 {
    let null = profile.loglik(eta, None);
    let opt = profile.maximize(eta);
    (2.0 * (opt.loglik - null)).max(0.0)
}

/// Restricted likelihood ratio test of `sigma2_g = 0`.
///
/// Under the null the residual contrasts are `N(0, s2e I)` and the statistic
/// does not depend on `s2e`, so the null distribution is simulated directly
/// in the contrast space. `stream` names the random sub-stream.
pub fn rlrt_region(p: &SpmmProblem, null_sims: usize, seed: u64, stream: &str) -> Result<Rlrt> {
    if null_sims == 0 {
        return Err(Error::Config("null_sims must be positive".into()));
    }
    let profile = RemlProfile::new(p)?;
    let eta = profile.contrasts(&p.y);
    if eta.norm_squared() <= 1e-20 * p.y.norm_squared().max(f64::MIN_POSITIVE) {
        return Ok(Rlrt { stat: 0.0, p_value: 1.0 });
    }
    let stat = stat_for(&profile, &eta);
    let m = eta.len();
    let chunks = null_sims.div_ceil(SIM_CHUNK);
    let exceed: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = indexed_stream(seed, stream, c as u64);
            let draws = SIM_CHUNK.min(null_sims - c * SIM_CHUNK);
            (0..draws)
                .filter(|_| {
                    let e = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
                    stat_for(&profile, &e) >= stat - TIE_TOL
                })
                .count()
        })
        .sum();
    Ok(Rlrt {
        stat,
        p_value: (exceed + 1) as f64 / (null_sims + 1) as f64,
    })
}

/// `alpha * |H| / |H0|`.
pub fn alpha_local(alpha: f64, n_markers: usize, root_markers: usize) -> f64 {
    alpha * n_markers as f64 / root_markers as f64
}

/// Test the hierarchy top-down, descending only below rejected nodes.
///
/// `problem_for` builds the model for a node; it is called only for nodes
/// that get tested. Nodes of one level are tested concurrently.
pub fn hierarchical_test<F>(plan: &TestPlan, h: &RegionHierarchy, problem_for: F) -> Result<Vec<RegionTest>>
where
    F: Fn(&Region) -> Result<SpmmProblem> + Sync,
{
    plan.validate()?;
    hierarchical_test_unchecked(plan, h, problem_for)
}

/// As [`hierarchical_test`] without the lower bound on `null_sims`.
pub fn hierarchical_test_unchecked<F>(plan: &TestPlan, h: &RegionHierarchy, problem_for: F) -> Result<Vec<RegionTest>>
where
    F: Fn(&Region) -> Result<SpmmProblem> + Sync,
{
    let h0 = h.root().n_markers();
    let mut out: Vec<RegionTest> = h
        .regions()
        .iter()
        .map(|r| RegionTest {
            region_id: r.id.clone(),
            level: r.level,
            n_markers: r.n_markers(),
            rlrt_stat: None,
            p_value: None,
            alpha_local: alpha_local(plan.alpha, r.n_markers(), h0),
            tested: false,
            rejected: false,
        })
        .collect();
    let index: std::collections::HashMap<String, usize> =
        out.iter().enumerate().map(|(i, t)| (t.region_id.clone(), i)).collect();

    let mut frontier: Vec<&Region> = vec![h.root()];
    while !frontier.is_empty() {
        let results: Vec<Result<Rlrt>> = frontier
            .par_iter()
            .map(|r| {
                let p = problem_for(r).map_err(|e| Error::in_region(&r.id, e))?;
                rlrt_region(&p, plan.null_sims, plan.seed, &format!("rlrt/{}", r.id))
                    .map_err(|e| Error::in_region(&r.id, e))
            })
            .collect();
        let mut next = Vec::new();
        for (r, res) in frontier.iter().zip(results) {
            let t = &mut out[index[&r.id]];
            let res = res?;
            t.tested = true;
            t.rlrt_stat = Some(res.stat);
            t.p_value = Some(res.p_value);
            t.rejected = res.p_value <= t.alpha_local;
            if t.rejected {
                next.extend(h.children(&r.id));
            }
        }
        frontier = next;
    }
    Ok(out)
}

/// Any node rejected.
pub fn any_rejected(tests: &[RegionTest]) -> bool {
    tests.iter().any(|t| t.rejected)
}

pub fn write_tests(tests: &[RegionTest], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let na = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "region_id\tlevel\tn_markers\tstat\tp_value\talpha_local\ttested\trejected")?;
        for t in tests {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.region_id,
                t.level,
                t.n_markers,
                na(t.rlrt_stat),
                na(t.p_value),
                t.alpha_local,
                t.tested,
                t.rejected
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

//! Per-region model fits and the matrix of standardized local genetic
//! values that feeds the combiner.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{Alignment, FixedEffectTable, Incidence, MarkerMatrix};
use crate::kernel::{cross_gram, gram, normalize, KernelMatrix, KernelSpec};
use crate::linalg::{column_rank, prepend_intercept};
use crate::partition::{Region, RegionHierarchy};
use crate::pca::{pca_out_of_region, PcBasis};
use crate::reml::{fit_reml, predict_local, FitStatus, FittedRegionModel, SpmmProblem};

/// Raw columns whose standard deviation falls below this fraction of the
/// phenotypic standard deviation are treated as constant.
pub const DEFAULT_FLAG_TOL: f64 = 1e-6;

/// Where the out-of-region principal components come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcScope {
    /// Recomputed from the markers outside each region.
    #[default]
    PerRegion,
    /// No principal-component fixed effects.
    None,
}

impl std::str::FromStr for PcScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-region" => Ok(PcScope::PerRegion),
            "none" => Ok(PcScope::None),
            _ => Err(Error::Config(format!("unknown pc scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalGebvOptions {
    pub kernel: KernelSpec,
    pub n_pcs: usize,
    pub pc_scope: PcScope,
    /// Use every region of the hierarchy as a column, not only the leaves.
    pub all_levels: bool,
    pub flag_tol: f64,
}

impl Default for LocalGebvOptions {
    fn default() -> Self {
        LocalGebvOptions {
            kernel: KernelSpec::gaussian(),
            n_pcs: 5,
            pc_scope: PcScope::PerRegion,
            all_levels: false,
            flag_tol: DEFAULT_FLAG_TOL,
        }
    }
}

/// Phenotyped training lines and their observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Marker-matrix rows of the training lines; column `c` of `z` is line
    /// `rows[c]`.
    pub rows: Vec<usize>,
    pub line_ids: Vec<String>,
    pub y: DVector<f64>,
    pub z: Incidence,
    /// Observation-level covariates, without intercept.
    pub covariates: DMatrix<f64>,
}

impl TrainingSet {
    /// Keep only phenotyped lines of an alignment.
    pub fn from_alignment(al: &Alignment, covariates: Option<&FixedEffectTable>) -> Result<Self> {
        let rows = al.phenotyped_lines();
        let mut pos = vec![usize::MAX; al.z.q];
        for (p, &r) in rows.iter().enumerate() {
            pos[r] = p;
        }
        let x = match covariates {
            Some(t) => t.design(&al.obs, &al.line_ids)?,
            None => DMatrix::zeros(al.y.len(), 0),
        };
        Ok(TrainingSet {
            line_ids: rows.iter().map(|&r| al.line_ids[r].clone()).collect(),
            y: al.y.clone(),
            z: Incidence {
                cols: al.z.cols.iter().map(|&c| pos[c]).collect(),
                q: rows.len(),
            },
            covariates: x,
            rows,
        })
    }

    /// One observation per line, no covariates.
    pub fn per_line(markers: &MarkerMatrix, rows: Vec<usize>, y: DVector<f64>) -> Self {
        let q = rows.len();
        TrainingSet {
            line_ids: rows.iter().map(|&r| markers.line_ids[r].clone()).collect(),
            rows,
            y,
            z: Incidence::identity(q),
            covariates: DMatrix::zeros(q, 0),
        }
    }

    /// Restrict to the lines at positions `keep` (indices into `rows`).
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; self.rows.len()];
        for (p, &k) in keep.iter().enumerate() {
            pos[k] = p;
        }
        let obs: Vec<usize> = (0..self.y.len()).filter(|&i| pos[self.z.cols[i]] != usize::MAX).collect();
        TrainingSet {
            rows: keep.iter().map(|&k| self.rows[k]).collect(),
            line_ids: keep.iter().map(|&k| self.line_ids[k].clone()).collect(),
            y: DVector::from_iterator(obs.len(), obs.iter().map(|&i| self.y[i])),
            z: Incidence {
                cols: obs.iter().map(|&i| pos[self.z.cols[i]]).collect(),
                q: keep.len(),
            },
            covariates: DMatrix::from_fn(obs.len(), self.covariates.ncols(), |i, j| self.covariates[(obs[i], j)]),
        }
    }

    pub fn n_lines(&self) -> usize {
        self.rows.len()
    }

    /// Line label of every observation, for grouped folds.
    pub fn groups(&self) -> &[usize] {
        &self.z.cols
    }
}

/// Regions that become columns: leaves, or the whole tree in DFS order.
pub fn model_regions(h: &RegionHierarchy, all_levels: bool) -> Vec<&Region> {
    if all_levels {
        h.regions().iter().collect()
    } else {
        h.leaves()
    }
}

/// Everything needed to refit or evaluate one region.
#[derive(Debug, Clone)]
pub struct RegionProblem {
    pub problem: SpmmProblem,
    pub pcs: PcBasis,
}

/// Kernel, out-of-region PCs and the design `[1, covariates, Z PC]`.
pub fn region_problem(
    markers: &MarkerMatrix,
    data: &TrainingSet,
    marker_indices: &[usize],
    opts: &LocalGebvOptions,
) -> Result<RegionProblem> {
    let xr = markers.submatrix(&data.rows, marker_indices);
    let k = normalize(&gram(&xr, &opts.kernel, Some(&data.line_ids))?)?;
    let pcs = match opts.pc_scope {
        PcScope::PerRegion if opts.n_pcs > 0 => pca_out_of_region(markers, &data.rows, marker_indices, opts.n_pcs)?,
        _ => PcBasis::empty(),
    };
    let base = prepend_intercept(&data.covariates);
    let scores = data.z.apply_rows(&pcs.scores(markers, &data.rows));
    let mut xstar = base.clone().resize_horizontally(base.ncols() + scores.ncols(), 0.0);
    xstar.columns_mut(base.ncols(), scores.ncols()).copy_from(&scores);
    // PCs that duplicate covariates would make X* singular; drop from the end
    let mut used = scores.ncols();
    while used > 0 && column_rank(&xstar) < xstar.ncols() {
        used -= 1;
        xstar = xstar.columns(0, base.ncols() + used).into_owned();
    }
    let pcs = if used < pcs.r() {
        debug!("keeping {used} of {} principal components", pcs.r());
        PcBasis {
            loadings: pcs.loadings.columns(0, used).into_owned(),
            singular_values: pcs.singular_values[..used].to_vec(),
            ..pcs
        }
    } else {
        pcs
    };
    Ok(RegionProblem {
        problem: SpmmProblem::new(data.y.clone(), xstar, data.z.clone(), k)?,
        pcs,
    })
}

/// Fit of one region plus what is needed to evaluate it on new lines.
#[derive(Debug, Clone)]
pub struct RegionFit {
    pub region_id: String,
    pub marker_indices: Vec<usize>,
    /// `None` when the fit failed.
    pub model: Option<FittedRegionModel>,
    pub kernel: KernelSpec,
    pub bandwidth: Option<f64>,
    pub scale: f64,
    pub pcs: PcBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGebvMatrix {
    /// Lines by regions, standardized per column.
    pub values: DMatrix<f64>,
    pub region_ids: Vec<String>,
    pub col_means: Vec<f64>,
    pub col_sds: Vec<f64>,
    /// Constant or failed columns, stored as zeros.
    pub flagged: Vec<bool>,
    pub line_ids: Vec<String>,
}

impl LocalGebvMatrix {
    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    /// Rows expanded to observations (`Z G`).
    pub fn for_observations(&self, z: &Incidence) -> DMatrix<f64> {
        z.apply_rows(&self.values)
    }
}

/// Standardize raw columns with their own mean and sd; flag near-constant
/// ones relative to `reference_sd`.
fn standardize(raw: &DMatrix<f64>, failed: &[bool], reference_sd: f64, tol: f64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<bool>) {
    let (q, k) = raw.shape();
    let mut values = DMatrix::zeros(q, k);
    let mut means = vec![0.0; k];
    let mut sds = vec![0.0; k];
    let mut flagged = failed.to_vec();
    for j in 0..k {
        if failed[j] {
            continue;
        }
        let col: Vec<f64> = raw.column(j).iter().copied().collect();
        let m = crate::stats::mean(&col);
        let s = crate::stats::sd(&col);
        means[j] = m;
        sds[j] = s;
        if !(s > tol * reference_sd) {
            flagged[j] = true;
            continue;
        }
        for i in 0..q {
            values[(i, j)] = (col[i] - m) / s;
        }
    }
    (values, means, sds, flagged)
}

/// Fit every model region on the training set and build the standardized
/// matrix of training EBLUPs.
///
/// Regions run in parallel; results are assembled in region order. A region
/// that fails is zeroed and flagged; more than half failing is an error.
pub fn fit_all_regions(
    markers: &MarkerMatrix,
    data: &TrainingSet,
    regions: &[&Region],
    opts: &LocalGebvOptions,
) -> Result<(Vec<RegionFit>, LocalGebvMatrix)> {
    if regions.is_empty() {
        return Err(Error::Config("no regions to fit".into()));
    }
    let results: Vec<(RegionFit, Option<Error>)> = regions
        .par_iter()
        .map(|region| fit_region(markers, data, region, opts))
        .collect();

    let q = data.n_lines();
    let k = regions.len();
    let mut raw = DMatrix::zeros(q, k);
    let mut failed = vec![false; k];
    let mut fits = Vec::with_capacity(k);
    let mut n_failed = 0;
    let mut first_err: Option<Error> = None;
    for (j, (fit, err)) in results.into_iter().enumerate() {
        match (&fit.model, err) {
            (Some(m), _) => raw.set_column(j, &m.ebluphat),
            (None, e) => {
                failed[j] = true;
                n_failed += 1;
                if first_err.is_none() {
                    first_err = e;
                }
            }
        }
        fits.push(fit);
    }
    if 2 * n_failed > k {
        let first = first_err.ok_or_else(|| Error::Config("region fit failed without an error".into()))?;
        if k == 1 {
            return Err(first);
        }
        return Err(Error::TooManyFailedRegions {
            failed: n_failed,
            total: k,
            first: first.to_string(),
        });
    }
    let yv: Vec<f64> = data.y.iter().copied().collect();
    let ref_sd = crate::stats::sd(&yv).max(f64::MIN_POSITIVE);
    let (values, col_means, col_sds, flagged) = standardize(&raw, &failed, ref_sd, opts.flag_tol);
    Ok((
        fits,
        LocalGebvMatrix {
            values,
            region_ids: regions.iter().map(|r| r.id.clone()).collect(),
            col_means,
            col_sds,
            flagged,
            line_ids: data.line_ids.clone(),
        },
    ))
}

fn fit_region(markers: &MarkerMatrix, data: &TrainingSet, region: &Region, opts: &LocalGebvOptions) -> (RegionFit, Option<Error>) {
    let attempt = region_problem(markers, data, &region.marker_indices, opts)
        .and_then(|rp| fit_reml(&rp.problem).map(|m| (rp, m)));
    match attempt {
        Ok((rp, mut model)) => {
            model.region_id = region.id.clone();
            if model.status != FitStatus::Interior {
                debug!("region {}: {}", region.id, model.status.as_str());
            }
            (
                RegionFit {
                    region_id: region.id.clone(),
                    marker_indices: region.marker_indices.clone(),
                    kernel: rp.problem.k.spec,
                    bandwidth: rp.problem.k.bandwidth,
                    scale: rp.problem.k.scale,
                    pcs: rp.pcs,
                    model: Some(model),
                },
                None,
            )
        }
        Err(e) => {
            let e = Error::in_region(&region.id, e);
            warn!("{e}; column zeroed");
            (
                RegionFit {
                    region_id: region.id.clone(),
                    marker_indices: region.marker_indices.clone(),
                    model: None,
                    kernel: opts.kernel,
                    bandwidth: None,
                    scale: 1.0,
                    pcs: PcBasis::empty(),
                },
                Some(e),
            )
        }
    }
}

/// Raw local genetic values of new lines for one region.
pub fn predict_region(
    fit: &RegionFit,
    train_markers: &MarkerMatrix,
    train_rows: &[usize],
    new_markers: &MarkerMatrix,
    new_rows: &[usize],
) -> Result<DVector<f64>> {
    let Some(model) = &fit.model else {
        return Ok(DVector::zeros(new_rows.len()));
    };
    let xt = train_markers.submatrix(train_rows, &fit.marker_indices);
    let xn = new_markers.submatrix(new_rows, &fit.marker_indices);
    let cross = cross_gram(&xt, &xn, &fit.kernel, fit.bandwidth)? * fit.scale;
    predict_local(model, &cross)
}

/// Standardized local genetic values of new lines (`t x k`).
///
/// `new_markers` must use the training marker columns in the same order.
pub fn local_gebv_for_new(
    fits: &[RegionFit],
    gebv: &LocalGebvMatrix,
    train_markers: &MarkerMatrix,
    train_rows: &[usize],
    new_markers: &MarkerMatrix,
    new_rows: &[usize],
) -> Result<DMatrix<f64>> {
    if new_markers.n_markers() != train_markers.n_markers() {
        return Err(Error::ColumnMismatch {
            expected: train_markers.n_markers(),
            found: new_markers.n_markers(),
        });
    }
    let cols: Vec<Result<DVector<f64>>> = fits
        .par_iter()
        .enumerate()
        .map(|(j, fit)| {
            if gebv.flagged[j] {
                return Ok(DVector::zeros(new_rows.len()));
            }
            let raw = predict_region(fit, train_markers, train_rows, new_markers, new_rows)
                .map_err(|e| Error::in_region(&fit.region_id, e))?;
            Ok(raw.map(|v| (v - gebv.col_means[j]) / gebv.col_sds[j]))
        })
        .collect();
    let mut out = DMatrix::zeros(new_rows.len(), fits.len());
    for (j, c) in cols.into_iter().enumerate() {
        out.set_column(j, &c?);
    }
    Ok(out)
}

/// Kernel of a region over the training lines, normalized.
pub fn region_kernel(markers: &MarkerMatrix, rows: &[usize], region: &[usize], spec: &KernelSpec) -> Result<KernelMatrix> {
    normalize(&gram(&markers.submatrix(rows, region), spec, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Coding;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn markers(n: usize, m: usize, seed: u64) -> MarkerMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        MarkerMatrix::new(
            (0..n).map(|i| format!("L{i}")).collect(),
            (0..m).map(|j| format!("M{j}")).collect(),
            DMatrix::from_fn(n, m, |_, _| rng.gen_range(0..2) as f64),
            Coding::ZeroOne,
        )
        .unwrap()
    }

    fn region(id: &str, idx: std::ops::Range<usize>) -> Region {
        Region {
            id: id.into(),
            marker_indices: idx.collect(),
            level: 1,
            parent: Some("G".into()),
            children: Vec::new(),
            span: None,
        }
    }

    fn setup(seed: u64) -> (MarkerMatrix, TrainingSet, Vec<Region>) {
        let g = markers(60, 40, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        let y = DVector::from_fn(60, |i, _| {
            2.0 * g.values[(i, 3)] * g.values[(i, 4)] + rng.sample::<f64, _>(StandardNormal)
        });
        let data = TrainingSet::per_line(&g, (0..60).collect(), y);
        let regions = vec![region("A", 0..10), region("B", 10..20), region("C", 20..40)];
        (g, data, regions)
    }

    fn opts() -> LocalGebvOptions {
        LocalGebvOptions {
            n_pcs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn columns_are_standardized_or_flagged() {
        let (g, data, regions) = setup(1);
        let refs: Vec<&Region> = regions.iter().collect();
        let (_, m) = fit_all_regions(&g, &data, &refs, &opts()).unwrap();
        assert_eq!(m.values.shape(), (60, 3));
        for j in 0..3 {
            let col: Vec<f64> = m.values.column(j).iter().copied().collect();
            if m.flagged[j] {
                assert!(col.iter().all(|&v| v == 0.0));
            } else {
                assert!(crate::stats::mean(&col).abs() < 1e-10);
                assert!((crate::stats::sd(&col) - 1.0).abs() < 1e-10);
            }
        }
        assert!(!m.flagged[0], "the planted pair sits in region A");
    }

    #[test]
    fn training_lines_reproduce_training_matrix() {
        let (g, data, regions) = setup(2);
        let refs: Vec<&Region> = regions.iter().collect();
        let (fits, m) = fit_all_regions(&g, &data, &refs, &opts()).unwrap();
        let again = local_gebv_for_new(&fits, &m, &g, &data.rows, &g, &data.rows).unwrap();
        assert!((again - &m.values).abs().max() < 1e-8);
        // a single duplicated line
        let one = local_gebv_for_new(&fits, &m, &g, &data.rows, &g, &[17]).unwrap();
        assert!((one.row(0) - m.values.row(17)).abs().max() < 1e-8);
    }

    #[test]
    fn identical_regions_give_identical_columns() {
        let base = markers(40, 8, 3);
        let dup = MarkerMatrix::new(
            base.line_ids.clone(),
            (0..16).map(|j| format!("M{j}")).collect(),
            DMatrix::from_fn(40, 16, |i, j| base.values[(i, j % 8)]),
            Coding::ZeroOne,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let y = DVector::from_fn(40, |i, _| dup.values[(i, 1)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let data = TrainingSet::per_line(&dup, (0..40).collect(), y);
        let regions = [region("A", 0..8), region("B", 8..16)];
        let refs: Vec<&Region> = regions.iter().collect();
        let (_, m) = fit_all_regions(&dup, &data, &refs, &opts()).unwrap();
        assert!((m.values.column(0) - m.values.column(1)).abs().max() < 1e-8);
    }

    #[test]
    fn region_order_permutes_columns() {
        let (g, data, regions) = setup(5);
        let fwd: Vec<&Region> = regions.iter().collect();
        let rev: Vec<&Region> = regions.iter().rev().collect();
        let (_, a) = fit_all_regions(&g, &data, &fwd, &opts()).unwrap();
        let (_, b) = fit_all_regions(&g, &data, &rev, &opts()).unwrap();
        for j in 0..3 {
            assert_eq!(a.values.column(j), b.values.column(2 - j));
        }
    }

    #[test]
    fn flagged_region_predicts_zero() {
        let (g, data, regions) = setup(6);
        let refs: Vec<&Region> = regions.iter().collect();
        let (fits, mut m) = fit_all_regions(&g, &data, &refs, &opts()).unwrap();
        m.flagged[1] = true;
        let out = local_gebv_for_new(&fits, &m, &g, &data.rows, &g, &[0, 1, 2]).unwrap();
        assert!(out.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn failed_regions_are_zeroed_until_majority() {
        let (g, data, _) = setup(7);
        // a monomorphic region has a zero-bandwidth Gaussian kernel
        let mut mono = g.clone();
        for i in 0..60 {
            mono.values[(i, 0)] = 1.0;
        }
        let regions = [region("bad", 0..1), region("B", 10..20), region("C", 20..40)];
        let refs: Vec<&Region> = regions.iter().collect();
        let (fits, m) = fit_all_regions(&mono, &data, &refs, &opts()).unwrap();
        assert!(fits[0].model.is_none());
        assert!(m.flagged[0]);
        let two_bad = [region("bad", 0..1), region("bad2", 0..1), region("C", 20..40)];
        let refs: Vec<&Region> = two_bad.iter().collect();
        assert!(matches!(
            fit_all_regions(&mono, &data, &refs, &opts()),
            Err(Error::TooManyFailedRegions { failed: 2, total: 3, .. })
        ));
    }

    #[test]
    fn subset_remaps_lines() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let data = TrainingSet {
            rows: vec![0, 2, 4],
            line_ids: vec!["L0".into(), "L2".into(), "L4".into()],
            y,
            z: Incidence {
                cols: vec![0, 1, 2, 0, 1, 2],
                q: 3,
            },
            covariates: DMatrix::from_fn(6, 1, |i, _| i as f64),
        };
        let s = data.subset(&[2, 0]);
        assert_eq!(s.rows, vec![4, 0]);
        assert_eq!(s.z.cols, vec![1, 0, 1, 0]);
        assert_eq!(s.y.as_slice(), &[1.0, 3.0, 4.0, 6.0]);
        assert_eq!(s.covariates.column(0).as_slice(), &[0.0, 2.0, 3.0, 5.0]);
    }
}

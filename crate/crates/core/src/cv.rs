//! Repeated train/test evaluation of the multiple-kernel model against
//! whole-genome single-kernel baselines, and clustering of traits by their
//! region importance profiles.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::combiner::{fit_combiner, predict_full, CombinerOptions};
use crate::error::{Error, Result};
use crate::ingest::MarkerMatrix;
use crate::kernel::KernelSpec;
use crate::linalg::prepend_intercept;
use crate::local_gebv::{fit_all_regions, local_gebv_for_new, region_problem, LocalGebvOptions, PcScope, TrainingSet};
use crate::partition::Region;
use crate::reml::{fit_reml, predict_local};
use crate::rng::{derive_seed, indexed_stream};
use crate::stats::{mean, pearson, rmse, sd};

pub const MIN_TEST_LINES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    /// Local kernels combined by the penalized post-processing step.
    MultiKernel,
    LinearSingle,
    GaussianSingle,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MultiKernel => "mk",
            ModelKind::LinearSingle => "lin",
            ModelKind::GaussianSingle => "gaus",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mk" => Ok(ModelKind::MultiKernel),
            "lin" | "linear" => Ok(ModelKind::LinearSingle),
            "gaus" | "gaussian" => Ok(ModelKind::GaussianSingle),
            _ => Err(Error::Config(format!("unknown model `{s}`; expected mk, lin or gaus"))),
        }
    }
}

/// Parse `mk,lin,gaus`.
pub fn parse_models(s: &str) -> Result<Vec<ModelKind>> {
    let mut v: Vec<ModelKind> = s.split(',').map(|t| t.trim().parse()).collect::<Result<_>>()?;
    v.sort();
    v.dedup();
    if v.is_empty() {
        return Err(Error::Config("no models given".into()));
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub models: Vec<ModelKind>,
    pub train_frac: f64,
    pub replicates: usize,
    pub seed: u64,
    pub local: LocalGebvOptions,
    pub combiner: CombinerOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            models: vec![ModelKind::MultiKernel, ModelKind::LinearSingle, ModelKind::GaussianSingle],
            train_frac: 0.9,
            replicates: 30,
            seed: 0,
            local: LocalGebvOptions::default(),
            combiner: CombinerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRecord {
    pub replicate: usize,
    pub model: ModelKind,
    /// Pearson correlation of held-out phenotypes with the genotypic values.
    pub accuracy: f64,
    /// Root mean squared error of the full prediction.
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub records: Vec<CvRecord>,
    pub replicate_seeds: Vec<u64>,
    pub train_frac: f64,
    pub region_ids: Vec<String>,
    /// Mean `|alpha|` per region over replicates (empty without `mk`).
    pub mean_importance: Vec<f64>,
}

impl CvReport {
    pub fn accuracies(&self, model: ModelKind) -> Vec<f64> {
        self.records.iter().filter(|r| r.model == model).map(|r| r.accuracy).collect()
    }

    /// Mean and standard deviation of the accuracy of one model.
    pub fn summary(&self, model: ModelKind) -> (f64, f64) {
        let a = self.accuracies(model);
        (mean(&a), if a.len() > 1 { sd(&a) } else { 0.0 })
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut s = String::from("replicate\tmodel\taccuracy\trmse\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.replicate, r.model.name(), r.accuracy, r.rmse);
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_importance(&self, path: &Path) -> Result<()> {
        let mut s = String::from("region_id\tmean_importance\n");
        for (id, v) in self.region_ids.iter().zip(&self.mean_importance) {
            let _ = writeln!(s, "{id}\t{v}");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Random line split for one replicate: positions into the training set's
/// lines, each half sorted.
pub fn split_lines(n_lines: usize, train_frac: f64, seed: u64, replicate: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_lines).collect();
    idx.shuffle(&mut indexed_stream(seed, "cv-split", replicate as u64));
    let n_train = ((n_lines as f64) * train_frac).round() as usize;
    let (mut tr, mut te) = (idx[..n_train].to_vec(), idx[n_train..].to_vec());
    tr.sort_unstable();
    te.sort_unstable();
    (tr, te)
}

/// Predictions of one model for held-out lines: genotypic value per line and
/// full prediction per observation.
pub struct HeldOut {
    pub genotypic: DVector<f64>,
    pub full: DVector<f64>,
    /// `|alpha|` per region, multi-kernel only.
    pub importance: Option<Vec<f64>>,
}

/// Fit the multiple-kernel model on `train` and predict `test`.
pub fn multi_kernel_holdout(
    markers: &MarkerMatrix,
    train: &TrainingSet,
    test: &TrainingSet,
    regions: &[&Region],
    local: &LocalGebvOptions,
    combiner: &CombinerOptions,
) -> Result<HeldOut> {
    let (fits, gebv) = fit_all_regions(markers, train, regions, local)?;
    let g_obs = gebv.for_observations(&train.z);
    let model = fit_combiner(&g_obs, &train.covariates, &train.y, &gebv.region_ids, combiner, Some(train.groups()))?;
    let g_new = local_gebv_for_new(&fits, &gebv, markers, &train.rows, markers, &test.rows)?;
    let genotypic = &g_new * &model.alpha;
    let full = predict_full(&model, &test.z.apply_rows(&g_new), &test.covariates)?;
    Ok(HeldOut {
        genotypic,
        full,
        importance: Some(model.importance),
    })
}

/// Whole-genome single-kernel model on `train`, evaluated on `test`.
pub fn single_kernel_holdout(markers: &MarkerMatrix, train: &TrainingSet, test: &TrainingSet, spec: KernelSpec) -> Result<HeldOut> {
    let all: Vec<usize> = (0..markers.n_markers()).collect();
    let opts = LocalGebvOptions {
        kernel: spec,
        n_pcs: 0,
        pc_scope: PcScope::None,
        ..Default::default()
    };
    let rp = region_problem(markers, train, &all, &opts)?;
    let fit = fit_reml(&rp.problem)?;
    let xt = markers.submatrix(&train.rows, &all);
    let xn = markers.submatrix(&test.rows, &all);
    let cross = crate::kernel::cross_gram(&xt, &xn, &spec, rp.problem.k.bandwidth)? * rp.problem.k.scale;
    let genotypic = predict_local(&fit, &cross)?;
    let full = prepend_intercept(&test.covariates) * &fit.beta_star + test.z.apply(&genotypic);
    Ok(HeldOut {
        genotypic,
        full,
        importance: None,
    })
}

fn score(test: &TrainingSet, h: &HeldOut) -> (f64, f64) {
    let y: Vec<f64> = test.y.iter().copied().collect();
    let g: Vec<f64> = test.z.apply(&h.genotypic).iter().copied().collect();
    let full: Vec<f64> = h.full.iter().copied().collect();
    let acc = pearson(&y, &g);
    // a constant prediction carries no ranking information
    (if acc.is_nan() { 0.0 } else { acc }, rmse(&y, &full))
}

/// Repeated random line splits; every model sees the same splits.
pub fn run_cv(markers: &MarkerMatrix, data: &TrainingSet, regions: &[&Region], opts: &CvOptions) -> Result<CvReport> {
    if !(opts.train_frac > 0.5 && opts.train_frac < 0.95) {
        return Err(Error::Config(format!("train fraction must lie in (0.5, 0.95), got {}", opts.train_frac)));
    }
    if opts.replicates == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    let q = data.n_lines();
    let n_test = q - ((q as f64) * opts.train_frac).round() as usize;
    if n_test < MIN_TEST_LINES {
        return Err(Error::TooFewTestLines(n_test));
    }
    let per_rep: Vec<Result<(Vec<CvRecord>, Option<Vec<f64>>)>> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let (tr, te) = split_lines(q, opts.train_frac, opts.seed, r);
            let train = data.subset(&tr);
            let test = data.subset(&te);
            let mut records = Vec::new();
            let mut importance = None;
            for &m in &opts.models {
                let held = match m {
                    ModelKind::MultiKernel => {
                        let comb = CombinerOptions {
                            seed: derive_seed(opts.seed, &format!("cv-combiner/{r}")),
                            ..opts.combiner.clone()
                        };
                        multi_kernel_holdout(markers, &train, &test, regions, &opts.local, &comb)?
                    }
                    ModelKind::LinearSingle => single_kernel_holdout(markers, &train, &test, KernelSpec::linear())?,
                    ModelKind::GaussianSingle => {
                        let spec = match opts.local.kernel.kind {
                            crate::kernel::KernelKind::Gaussian => opts.local.kernel,
                            _ => KernelSpec::gaussian(),
                        };
                        single_kernel_holdout(markers, &train, &test, spec)?
                    }
                };
                let (accuracy, rmse) = score(&test, &held);
                if held.importance.is_some() {
                    importance = held.importance;
                }
                records.push(CvRecord {
                    replicate: r,
                    model: m,
                    accuracy,
                    rmse,
                });
            }
            Ok((records, importance))
        })
        .collect();

    let mut records = Vec::new();
    let mut imp_sum = vec![0.0; regions.len()];
    let mut n_imp = 0;
    for res in per_rep {
        let (recs, imp) = res?;
        records.extend(recs);
        if let Some(imp) = imp {
            for (s, v) in imp_sum.iter_mut().zip(imp) {
                *s += v;
            }
            n_imp += 1;
        }
    }
    Ok(CvReport {
        records,
        replicate_seeds: (0..opts.replicates)
            .map(|r| derive_seed(derive_seed(opts.seed, "cv-split"), &r.to_string()))
            .collect(),
        train_frac: opts.train_frac,
        region_ids: regions.iter().map(|r| r.id.clone()).collect(),
        mean_importance: if n_imp > 0 {
            imp_sum.into_iter().map(|s| s / n_imp as f64).collect()
        } else {
            Vec::new()
        },
    })
}

/// One agglomeration step. Cluster ids below `n` are the inputs; the merge
/// at step `s` creates id `n + s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitTree {
    pub names: Vec<String>,
    pub distances: DMatrix<f64>,
    pub merges: Vec<Merge>,
    pub newick: String,
}

/// Euclidean distances between trait importance vectors and their
/// average-linkage tree.
pub fn trait_similarity(traits: &[(String, Vec<f64>)]) -> Result<TraitTree> {
    let n = traits.len();
    if n < 2 {
        return Err(Error::Config("need at least two traits".into()));
    }
    let len = traits[0].1.len();
    if traits.iter().any(|(_, v)| v.len() != len) {
        return Err(Error::LengthMismatch);
    }
    let distances = DMatrix::from_fn(n, n, |i, j| {
        traits[i].1.iter().zip(&traits[j].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    });

    // active clusters: (id, size); pairwise distances kept by id
    let total = 2 * n - 1;
    let mut d = DMatrix::from_element(total, total, f64::INFINITY);
    d.view_mut((0, 0), (n, n)).copy_from(&distances);
    let mut active: Vec<(usize, usize)> = (0..n).map(|i| (i, 1)).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for x in 0..active.len() {
            for y in (x + 1)..active.len() {
                let v = d[(active[x].0, active[y].0)];
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        let (dist, x, y) = best;
        let (a, na) = active[x];
        let (b, nb) = active[y];
        let new = n + step;
        for &(c, _) in &active {
            if c != a && c != b {
                let v = (na as f64 * d[(a, c)] + nb as f64 * d[(b, c)]) / (na + nb) as f64;
                d[(new, c)] = v;
                d[(c, new)] = v;
            }
        }
        active.remove(y);
        active.remove(x);
        active.push((new, na + nb));
        merges.push(Merge {
            a,
            b,
            distance: dist,
            size: na + nb,
        });
    }
    let names: Vec<String> = traits.iter().map(|(n, _)| n.clone()).collect();
    let newick = newick(&names, &merges);
    Ok(TraitTree {
        names,
        distances,
        merges,
        newick,
    })
}

fn newick(names: &[String], merges: &[Merge]) -> String {
    let n = names.len();
    let height = |id: usize| if id < n { 0.0 } else { merges[id - n].distance / 2.0 };
    fn clean(s: &str) -> String {
        s.chars().map(|c| if " (),:;'".contains(c) { '_' } else { c }).collect()
    }
    fn render(id: usize, n: usize, names: &[String], merges: &[Merge], height: &dyn Fn(usize) -> f64) -> String {
        if id < n {
            return clean(&names[id]);
        }
        let m = merges[id - n];
        let h = height(id);
        format!(
            "({}:{},{}:{})",
            render(m.a, n, names, merges, height),
            h - height(m.a),
            render(m.b, n, names, merges, height),
            h - height(m.b)
        )
    }
    format!("{};", render(2 * n - 2, n, names, merges, &height))
}

//! Post-processing: a penalized additive model over the standardized local
//! genetic values,
//!
//! ```text
//! minimize  sum_i (y_i - b0 - sum_j a_j g_ij - sum_l b_l x_il)^2
//!           + lambda1 sum_j |a_j| + lambda2 sum_j a_j^2
//! ```
//!
//! Only the region weights `a` are penalized; the intercept and covariate
//! coefficients are free. The loss is a raw sum of squares (no `1/N`), so
//! `lambda` values are on the scale of `2 |g_j^T y|`.
//!
//! Solved by cyclic coordinate descent with soft-thresholding after
//! projecting the unpenalized columns out of `G` and `y`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{least_squares, orthonormal_basis, prepend_intercept};

pub const CONVERGENCE_TOL: f64 = 1e-9;
pub const MAX_SWEEPS: usize = 100_000;
pub const PATH_LEN: usize = 100;
pub const PATH_MIN_RATIO: f64 = 1e-3;
pub const MIN_CV_OBS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for Penalty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Penalty::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(Penalty::Fixed(v)),
            _ => Err(Error::Config(format!("penalty must be `auto` or a number >= 0, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Penalty::Auto => f.write_str("auto"),
            Penalty::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CombinerOptions {
    pub lambda1: Penalty,
    /// `Auto` means `0.1 * lambda1` when there are more regions than
    /// observations, otherwise zero (plain lasso).
    pub lambda2: Penalty,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CombinerOptions {
    fn default() -> Self {
        CombinerOptions {
            lambda1: Penalty::Auto,
            lambda2: Penalty::Auto,
            folds: 10,
            seed: 0,
        }
    }
}

/// One point of the regularization path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub lambda1: f64,
    pub cv_error: f64,
    pub nonzero: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerModel {
    pub beta0: f64,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `|alpha|`, per region.
    pub importance: Vec<f64>,
    pub region_ids: Vec<String>,
    pub cv_path: Vec<PathPoint>,
}

/// Unpenalized columns projected out of the design.
struct Profiled {
    g: DMatrix<f64>,
    y: DVector<f64>,
    col_sq: Vec<f64>,
}

fn profile(g: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Profiled> {
    let u = prepend_intercept(x);
    let q = orthonormal_basis(&u).ok_or(Error::RankDeficientCovariates)?;
    let gp = g - &q * (q.transpose() * g);
    let yp = y - &q * (q.transpose() * y);
    let col_sq = (0..gp.ncols()).map(|j| gp.column(j).norm_squared()).collect();
    Ok(Profiled { g: gp, y: yp, col_sq })
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent from `alpha` (warm start) on a profiled problem.
fn coordinate_descent(p: &Profiled, lambda1: f64, lambda2: f64, alpha: &mut DVector<f64>) -> Result<usize> {
    let k = p.g.ncols();
    let mut resid = &p.y - &p.g * &*alpha;
    for sweep in 1..=MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            let old = alpha[j];
            let denom = p.col_sq[j] + lambda2;
            let new = if p.col_sq[j] == 0.0 {
                0.0
            } else {
                let rho = p.g.column(j).dot(&resid) + p.col_sq[j] * old;
                soft_threshold(rho, 0.5 * lambda1) / denom
            };
            if new != old {
                resid.axpy(old - new, &p.g.column(j), 1.0);
                alpha[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        if max_change < CONVERGENCE_TOL {
            return Ok(sweep);
        }
    }
    Err(Error::NonConvergence(MAX_SWEEPS))
}

fn lambda_max_profiled(p: &Profiled) -> f64 {
    (p.g.transpose() * &p.y).iter().map(|v| 2.0 * v.abs()).fold(0.0, f64::max)
}

/// Smallest `lambda1` for which every region weight is zero.
pub fn lambda_max(g: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(lambda_max_profiled(&profile(g, x, y)?))
}

fn resolve_lambda2(opts: &CombinerOptions, lambda1: f64, n: usize, k: usize) -> f64 {
    match opts.lambda2 {
        Penalty::Fixed(v) => v,
        Penalty::Auto if k > n => 0.1 * lambda1,
        Penalty::Auto => 0.0,
    }
}

fn unpenalized(x: &DMatrix<f64>, g: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    let u = prepend_intercept(x);
    least_squares(&u, &(y - g * alpha)).ok_or(Error::RankDeficientCovariates)
}

/// Fit at fixed penalties.
pub fn fit_fixed(
    g: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dims(g, x, y)?;
    let p = profile(g, x, y)?;
    let mut alpha = DVector::zeros(g.ncols());
    coordinate_descent(&p, lambda1, lambda2, &mut alpha)?;
    let b = unpenalized(x, g, y, &alpha)?;
    Ok((alpha, b))
}

fn check_dims(g: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if g.nrows() != y.len() || x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "G has {} rows, X {} and y {}",
            g.nrows(),
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn select_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// Fit the combiner.
///
/// `g` holds one row per observation (standardized local values of the
/// observed line), `x` the covariates (may have zero columns). `groups`,
/// when given, keeps observations of one group in the same CV fold.
pub fn fit_combiner(
    g: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    region_ids: &[String],
    opts: &CombinerOptions,
    groups: Option<&[usize]>,
) -> Result<CombinerModel> {
    check_dims(g, x, y)?;
    let (n, k) = (y.len(), g.ncols());
    if region_ids.len() != k {
        return Err(Error::DimensionMismatch(format!("{k} columns but {} region ids", region_ids.len())));
    }
    let full = profile(g, x, y)?;

    let (alpha, lambda1, lambda2, cv_path) = match opts.lambda1 {
        Penalty::Fixed(l1) => {
            let l2 = resolve_lambda2(opts, l1, n, k);
            let mut alpha = DVector::zeros(k);
            coordinate_descent(&full, l1, l2, &mut alpha)?;
            (alpha, l1, l2, Vec::new())
        }
        Penalty::Auto => {
            if n < MIN_CV_OBS {
                return Err(Error::DegenerateFolds(n));
            }
            let lmax = lambda_max_profiled(&full);
            if lmax == 0.0 {
                (DVector::zeros(k), 0.0, resolve_lambda2(opts, 0.0, n, k), Vec::new())
            } else {
                let path: Vec<f64> = (0..PATH_LEN)
                    .map(|i| lmax * PATH_MIN_RATIO.powf(i as f64 / (PATH_LEN - 1) as f64))
                    .collect();
                let errors = cv_errors(g, x, y, &path, opts, groups)?;
                let mut alpha = DVector::zeros(k);
                let mut points = Vec::with_capacity(PATH_LEN);
                let mut best = (f64::INFINITY, 0usize, DVector::zeros(k));
                for (i, &l1) in path.iter().enumerate() {
                    let l2 = resolve_lambda2(opts, l1, n, k);
                    coordinate_descent(&full, l1, l2, &mut alpha)?;
                    points.push(PathPoint {
                        lambda1: l1,
                        cv_error: errors[i],
                        nonzero: alpha.iter().filter(|&&a| a != 0.0).count(),
                    });
                    if errors[i] < best.0 {
                        best = (errors[i], i, alpha.clone());
                    }
                }
                let l1 = path[best.1];
                (best.2, l1, resolve_lambda2(opts, l1, n, k), points)
            }
        }
    };
    let b = unpenalized(x, g, y, &alpha)?;
    Ok(CombinerModel {
        beta0: b[0],
        beta: b.rows(1, b.len() - 1).into_owned(),
        importance: alpha.iter().map(|a| a.abs()).collect(),
        alpha,
        lambda1,
        lambda2,
        region_ids: region_ids.to_vec(),
        cv_path,
    })
}

/// Mean squared prediction error of every path point under K-fold CV.
fn cv_errors(
    g: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    path: &[f64],
    opts: &CombinerOptions,
    groups: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let n = y.len();
    let k = g.ncols();
    let folds = opts.folds.max(2);
    let fold_of = assign_folds(n, folds, opts.seed, groups);
    let per_fold: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        (0..folds)
            .into_par_iter()
            .map(|f| {
                let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
                let mut sse = vec![0.0; path.len()];
                if test.is_empty() || train.is_empty() {
                    return Ok(sse);
                }
                let (gt, xt, yt) = (select_rows(g, &train), select_rows(x, &train), select_vec(y, &train));
                let (gv, xv, yv) = (select_rows(g, &test), select_rows(x, &test), select_vec(y, &test));
                let p = match profile(&gt, &xt, &yt) {
                    Ok(p) => p,
                    // covariates can lose rank inside a fold; such a fold predicts the mean
                    Err(Error::RankDeficientCovariates) => {
                        let m = yt.mean();
                        let e: f64 = yv.iter().map(|v| (v - m) * (v - m)).sum();
                        return Ok(vec![e; path.len()]);
                    }
                    Err(e) => return Err(e),
                };
                let mut alpha = DVector::zeros(k);
                for (i, &l1) in path.iter().enumerate() {
                    let l2 = resolve_lambda2(opts, l1, train.len(), k);
                    coordinate_descent(&p, l1, l2, &mut alpha)?;
                    let b = unpenalized(&xt, &gt, &yt, &alpha)?;
                    let pred = prepend_intercept(&xv) * &b + &gv * &alpha;
                    sse[i] = (&yv - pred).norm_squared();
                }
                Ok(sse)
            })
            .collect()
    };
    let mut total = vec![0.0; path.len()];
    for r in per_fold {
        for (t, e) in total.iter_mut().zip(r?) {
            *t += e;
        }
    }
    Ok(total.into_iter().map(|t| t / n as f64).collect())
}

/// Fold label per observation; whole groups move together.
fn assign_folds(n: usize, folds: usize, seed: u64, groups: Option<&[usize]>) -> Vec<usize> {
    let mut rng = crate::rng::stream(seed, "combiner-folds");
    match groups {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut out = vec![0; n];
            for (pos, &i) in idx.iter().enumerate() {
                out[i] = pos % folds;
            }
            out
        }
        Some(gr) => {
            let mut labels: Vec<usize> = gr.to_vec();
            labels.sort_unstable();
            labels.dedup();
            labels.shuffle(&mut rng);
            let fold: std::collections::HashMap<usize, usize> =
                labels.iter().enumerate().map(|(pos, &l)| (l, pos % folds)).collect();
            gr.iter().map(|l| fold[l]).collect()
        }
    }
}

/// `G_new alpha`: the genotypic value, without intercept or covariates.
pub fn predict_genotypic(model: &CombinerModel, g_new: &DMatrix<f64>) -> Result<DVector<f64>> {
    if g_new.ncols() != model.alpha.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} columns, model has {} regions",
            g_new.ncols(),
            model.alpha.len()
        )));
    }
    Ok(g_new * &model.alpha)
}

/// `b0 + G_new alpha + X_new b`.
pub fn predict_full(model: &CombinerModel, g_new: &DMatrix<f64>, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
    let gv = predict_genotypic(model, g_new)?;
    if x_new.ncols() != model.beta.len() || x_new.nrows() != g_new.nrows() {
        return Err(Error::DimensionMismatch("covariate matrix does not match the model".into()));
    }
    Ok(gv + x_new * &model.beta + DVector::from_element(g_new.nrows(), model.beta0))
}

/// Regions ranked by `|alpha|`, descending; ties keep genome order.
pub fn importance_scores(model: &CombinerModel) -> Vec<(String, f64)> {
    let mut out: Vec<(usize, f64)> = model.importance.iter().copied().enumerate().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(i, s)| (model.region_ids[i].clone(), s)).collect()
}

/// Value of the penalized objective.
pub fn objective(
    g: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta0: f64,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    let r = y - g * alpha - x * beta - DVector::from_element(y.len(), beta0);
    r.norm_squared() + lambda1 * alpha.iter().map(|a| a.abs()).sum::<f64>() + lambda2 * alpha.norm_squared()
}

/// Largest violation of the optimality conditions for `alpha`, using the
/// full residual.
pub fn kkt_violation(
    g: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &CombinerModel,
) -> f64 {
    let r = y - g * &model.alpha - x * &model.beta - DVector::from_element(y.len(), model.beta0);
    let grad = g.transpose() * r * -2.0;
    let mut worst: f64 = 0.0;
    for j in 0..model.alpha.len() {
        let a = model.alpha[j];
        let v = if a != 0.0 {
            (grad[j] + 2.0 * model.lambda2 * a + model.lambda1 * a.signum()).abs()
        } else {
            (grad[j].abs() - model.lambda1).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

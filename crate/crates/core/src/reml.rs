//! Single-kernel mixed model `y = X*b* + Z g + e`, `g ~ N(0, s2g K)`,
//! `e ~ N(0, s2e I)`, fitted by restricted maximum likelihood.
//!
//! Both variances are profiled onto the ratio `delta = s2e / s2g`. One
//! eigendecomposition of the projected `Z K Z^T` turns every likelihood
//! evaluation into an `O(n)` sum, so the one-dimensional search over
//! `log delta` is cheap, and so are the parametric null simulations in
//! [`crate::testing`] that reuse it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ingest::Incidence;
use crate::kernel::KernelMatrix;
use crate::linalg::{least_squares, orthonormal_basis, sorted_symmetric_eigen};

pub const DELTA_MIN: f64 = 1e-5;
pub const DELTA_MAX: f64 = 1e5;
const LOG_DELTA_TOL: f64 = 1e-8;
const COARSE_GRID: usize = 100;
/// Local maxima of the coarse grid that get refined.
const MAX_PEAKS: usize = 3;
const POLISH_HALF_WIDTH: f64 = 1e-6;
const POLISH_ITERS: usize = 60;

#[derive(Debug, Clone)]
pub struct SpmmProblem {
    pub y: DVector<f64>,
    /// Fixed-effect design: intercept, covariates and out-of-region PCs.
    pub xstar: DMatrix<f64>,
    pub z: Incidence,
    pub k: KernelMatrix,
}

impl SpmmProblem {
    pub fn new(y: DVector<f64>, xstar: DMatrix<f64>, z: Incidence, k: KernelMatrix) -> Result<Self> {
        let n = y.len();
        if xstar.nrows() != n || z.n_obs() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has {n} rows, X* {} and Z {}",
                xstar.nrows(),
                z.n_obs()
            )));
        }
        if k.dim() != z.q {
            return Err(Error::DimensionMismatch(format!(
                "Z has {} columns but K is {}x{}",
                z.q,
                k.dim(),
                k.dim()
            )));
        }
        if n <= xstar.ncols() {
            return Err(Error::SingularXstar);
        }
        Ok(SpmmProblem { y, xstar, z, k })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.z.q
    }

    /// `s2g Z K Z^T + s2e I`.
    pub fn covariance(&self, sigma2_g: f64, sigma2_e: f64) -> DMatrix<f64> {
        let mut v = self.z.sandwich(&self.k.values) * sigma2_g;
        for i in 0..self.n() {
            v[(i, i)] += sigma2_e;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    /// Optimum strictly inside the search interval.
    Interior,
    /// Genetic variance estimated as zero.
    NullBoundary,
    /// Optimum at the smallest admissible `delta`.
    LowerBoundary,
    /// Residuals vanish: `y` lies in the column space of `X*`.
    ZeroResidual,
    /// Likelihood flat in `delta`: only the total variance is identified.
    Ridge,
}

impl FitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FitStatus::Interior => "interior",
            FitStatus::NullBoundary => "null-boundary",
            FitStatus::LowerBoundary => "lower-boundary",
            FitStatus::ZeroResidual => "zero-residual",
            FitStatus::Ridge => "ridge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            FitStatus::Interior,
            FitStatus::NullBoundary,
            FitStatus::LowerBoundary,
            FitStatus::ZeroResidual,
            FitStatus::Ridge,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
    }
}

/// Spectral state of one problem: the restricted contrasts and the
/// eigenvalues of `Z K Z^T` projected off the fixed effects.
#[derive(Debug, Clone)]
pub struct RemlProfile {
    /// `n x (n - p)` orthonormal basis of the residual space.
    pub basis: DMatrix<f64>,
    /// Eigenvalues of the projected `Z K Z^T`, descending.
    pub xi: DVector<f64>,
    pub n: usize,
    pub p: usize,
}

/// Where the one-dimensional search landed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    /// `None` means `delta = infinity`, i.e. zero genetic variance.
    pub delta: Option<f64>,
    pub loglik: f64,
    pub status: FitStatus,
}

impl RemlProfile {
    pub fn new(problem: &SpmmProblem) -> Result<Self> {
        let n = problem.n();
        let q = orthonormal_basis(&problem.xstar).ok_or(Error::SingularXstar)?;
        let p = q.ncols();
        if n <= p {
            return Err(Error::SingularXstar);
        }
        // S (ZKZ' + I) S has eigenvalue 0 on col(X) and xi + 1 >= 1 on its
        // complement, which separates the two subspaces cleanly.
        let a = problem.z.sandwich(&problem.k.values) + DMatrix::identity(n, n);
        let qt_a = q.transpose() * &a;
        let aq = &a * &q;
        let qaq = &qt_a * &q;
        let mut sas = a - &q * qt_a - aq * q.transpose() + &q * qaq * q.transpose();
        crate::linalg::symmetrize(&mut sas);
        let (vals, vecs) = sorted_symmetric_eigen(sas);
        let m = n - p;
        let mut xi = DVector::from_iterator(m, vals.iter().take(m).map(|v| v - 1.0));
        let scale = xi.iter().copied().fold(1.0, f64::max);
        let min = xi.min();
        if min < -1e-8 * scale {
            return Err(Error::NonPsdK(min));
        }
        xi.apply(|v| *v = v.max(0.0));
        Ok(RemlProfile {
            basis: vecs.columns(0, m).into_owned(),
            xi,
            n,
            p,
        })
    }

    /// Residual contrasts `eta = U_R^T y`.
    pub fn contrasts(&self, y: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * y
    }

    /// Restricted log-likelihood at `delta` with the residual variance
    /// profiled out, up to a constant depending only on `X*`. `None` means
    /// `delta = infinity`.
    pub fn loglik(&self, eta: &DVector<f64>, delta: Option<f64>) -> f64 {
        let m = (self.n - self.p) as f64;
        let (mut quad, mut logdet) = (0.0, 0.0);
        match delta {
            None => quad = eta.norm_squared(),
            Some(d) => {
                for (e, x) in eta.iter().zip(self.xi.iter()) {
                    let h = 1.0 + x / d;
                    quad += e * e / h;
                    logdet += h.ln();
                }
            }
        }
        let s2 = quad / m;
        -0.5 * (m * (2.0 * std::f64::consts::PI * s2).ln() + logdet + m)
    }

    /// Profiled residual variance at `delta`.
    pub fn sigma2_e(&self, eta: &DVector<f64>, delta: Option<f64>) -> f64 {
        let m = (self.n - self.p) as f64;
        match delta {
            None => eta.norm_squared() / m,
            Some(d) => eta.iter().zip(self.xi.iter()).map(|(e, x)| e * e / (1.0 + x / d)).sum::<f64>() / m,
        }
    }

    /// Derivative of [`loglik`](Self::loglik) with respect to `ln delta`.
    fn dloglik(&self, eta: &DVector<f64>, t: f64) -> f64 {
        let m = (self.n - self.p) as f64;
        let d = t.exp();
        let (mut q, mut dq, mut dlog) = (0.0, 0.0, 0.0);
        for (e, x) in eta.iter().zip(self.xi.iter()) {
            let h = 1.0 + x / d;
            let r = (h - 1.0) / h;
            q += e * e / h;
            dq += e * e * r / h;
            dlog += r;
        }
        -0.5 * (m * dq / q - dlog)
    }

    /// Sharpen an interior maximum found by golden section: a function-value
    /// search stops near `sqrt(eps)`, a root of the derivative does not.
    fn polish(&self, eta: &DVector<f64>, t: f64) -> f64 {
        let g = |t: f64| self.dloglik(eta, t);
        let (mut a, mut b) = (t - POLISH_HALF_WIDTH, t + POLISH_HALF_WIDTH);
        let (mut ga, mut gb) = (g(a), g(b));
        if !(ga > 0.0 && gb < 0.0) {
            return t;
        }
        // Illinois variant of regula falsi
        let mut side = 0i8;
        let mut c = t;
        for _ in 0..POLISH_ITERS {
            c = (a * gb - b * ga) / (gb - ga);
            let gc = g(c);
            if gc == 0.0 || (b - a).abs() < 1e-14 {
                break;
            }
            if gc > 0.0 {
                a = c;
                ga = gc;
                if side == 1 {
                    gb *= 0.5;
                }
                side = 1;
            } else {
                b = c;
                gb = gc;
                if side == -1 {
                    ga *= 0.5;
                }
                side = -1;
            }
        }
        c
    }

    fn is_ridge(&self) -> bool {
        let max = self.xi.max();
        let min = self.xi.min();
        max > 0.0 && (max - min) <= 1e-9 * max
    }

    /// Maximise the restricted likelihood over `log delta` in
    /// `[ln 1e-5, ln 1e5]`, also checking `delta = infinity`.
    ///
    /// A coarse grid locates the local maxima; the best few are refined by golden
    /// section to `1e-8` in `log delta`.
    pub fn maximize(&self, eta: &DVector<f64>) -> Optimum {
        if self.xi.max() <= 1e-12 {
            return Optimum {
                delta: None,
                loglik: self.loglik(eta, None),
                status: FitStatus::NullBoundary,
            };
        }
        if self.is_ridge() {
            return Optimum {
                delta: Some(1.0),
                loglik: self.loglik(eta, Some(1.0)),
                status: FitStatus::Ridge,
            };
        }
        let (lo, hi) = (DELTA_MIN.ln(), DELTA_MAX.ln());
        let step = (hi - lo) / (COARSE_GRID - 1) as f64;
        let grid: Vec<f64> = (0..COARSE_GRID).map(|i| lo + step * i as f64).collect();
        let f = |t: f64| self.loglik(eta, Some(t.exp()));
        let vals: Vec<f64> = grid.iter().map(|&t| f(t)).collect();

        let mut peaks: Vec<usize> = (0..COARSE_GRID)
            .filter(|&i| {
                let left = if i == 0 { f64::NEG_INFINITY } else { vals[i - 1] };
                let right = if i + 1 == COARSE_GRID { f64::NEG_INFINITY } else { vals[i + 1] };
                vals[i] >= left && vals[i] >= right
            })
            .collect();
        peaks.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        peaks.truncate(MAX_PEAKS);

        let mut best_t = grid[0];
        let mut best = vals[0];
        for i in peaks {
            let a = grid[i.saturating_sub(1)];
            let b = grid[(i + 1).min(COARSE_GRID - 1)];
            let (t, v) = golden_max(&f, a, b, LOG_DELTA_TOL);
            let (t, v) = if vals[i] > v { (grid[i], vals[i]) } else { (t, v) };
            if v > best {
                best = v;
                best_t = t;
            }
        }
        let null = self.loglik(eta, None);
        if null >= best {
            return Optimum {
                delta: None,
                loglik: null,
                status: FitStatus::NullBoundary,
            };
        }
        let status = if best_t - lo <= LOG_DELTA_TOL {
            FitStatus::LowerBoundary
        } else {
            FitStatus::Interior
        };
        if status == FitStatus::Interior {
            let t = self.polish(eta, best_t);
            let v = f(t);
            if t < hi && v >= best - 1e-12 * best.abs() {
                best_t = t;
                best = v.max(best);
            }
        }
        Optimum {
            delta: Some(best_t.exp()),
            loglik: best,
            status,
        }
    }
}

/// Golden-section search for the maximum of `f` on `[a, b]`.
fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    let ft = f(t);
    [(c, fc), (d, fd), (t, ft)]
        .into_iter()
        .fold((t, ft), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// Quantities needed to evaluate the region's genetic effect on new lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionState {
    /// `Z^T V^-1 (y - X* b*)`, one entry per training line.
    pub weights: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedRegionModel {
    pub region_id: String,
    pub sigma2_g: f64,
    pub sigma2_e: f64,
    /// `None` when `sigma2_g = 0`.
    pub delta: Option<f64>,
    pub beta_star: DVector<f64>,
    pub reml_loglik: f64,
    /// Restricted log-likelihood with `sigma2_g = 0`.
    pub null_loglik: f64,
    pub status: FitStatus,
    /// Training EBLUPs of `g`, one per line (column of `Z`).
    pub ebluphat: DVector<f64>,
    pub solver_state: PredictionState,
}

impl FittedRegionModel {
    /// Restricted likelihood ratio statistic against `sigma2_g = 0`.
    pub fn rlrt_stat(&self) -> f64 {
        (2.0 * (self.reml_loglik - self.null_loglik)).max(0.0)
    }
}

/// Fit the model by REML; fixed effects by generalized least squares at the
/// optimum; EBLUPs via [`eblup`].
pub fn fit_reml(p: &SpmmProblem) -> Result<FittedRegionModel> {
    let profile = RemlProfile::new(p)?;
    fit_with_profile(p, &profile)
}

pub fn fit_with_profile(p: &SpmmProblem, profile: &RemlProfile) -> Result<FittedRegionModel> {
    let eta = profile.contrasts(&p.y);
    let null_loglik = profile.loglik(&eta, None);
    let q = p.q();

    if eta.norm_squared() <= 1e-20 * p.y.norm_squared().max(f64::MIN_POSITIVE) {
        let beta = least_squares(&p.xstar, &p.y).ok_or(Error::SingularXstar)?;
        return Ok(FittedRegionModel {
            region_id: String::new(),
            sigma2_g: 0.0,
            sigma2_e: 0.0,
            delta: None,
            beta_star: beta,
            reml_loglik: f64::INFINITY,
            null_loglik: f64::INFINITY,
            status: FitStatus::ZeroResidual,
            ebluphat: DVector::zeros(q),
            solver_state: PredictionState {
                weights: DVector::zeros(q),
            },
        });
    }

    let opt = profile.maximize(&eta);
    let sigma2_e = profile.sigma2_e(&eta, opt.delta);
    let sigma2_g = match opt.delta {
        Some(d) => sigma2_e / d,
        None => 0.0,
    };
    let v = p.covariance(sigma2_g, sigma2_e);
    let chol = v.clone().cholesky().ok_or(Error::NonPsdK(f64::NAN))?;
    let l = chol.l();
    let xt = l.solve_lower_triangular(&p.xstar).ok_or(Error::SingularXstar)?;
    let yt = l.solve_lower_triangular(&p.y).ok_or(Error::SingularXstar)?;
    let beta = least_squares(&xt, &yt).ok_or(Error::SingularXstar)?;

    let mut fit = FittedRegionModel {
        region_id: String::new(),
        sigma2_g,
        sigma2_e,
        delta: opt.delta,
        beta_star: beta,
        reml_loglik: opt.loglik,
        null_loglik,
        status: opt.status,
        ebluphat: DVector::zeros(q),
        solver_state: PredictionState {
            weights: DVector::zeros(q),
        },
    };
    let (g, w) = eblup_parts(&fit, p, Some(&chol))?;
    fit.ebluphat = g;
    fit.solver_state.weights = w;
    Ok(fit)
}

/// `s2g K Z^T (s2g Z K Z^T + s2e I)^-1 (y - X* b*)` at the fitted values.
pub fn eblup(fit: &FittedRegionModel, p: &SpmmProblem) -> Result<DVector<f64>> {
    Ok(eblup_parts(fit, p, None)?.0)
}

fn eblup_parts(
    fit: &FittedRegionModel,
    p: &SpmmProblem,
    chol: Option<&nalgebra::Cholesky<f64, nalgebra::Dyn>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let q = p.q();
    if fit.sigma2_g == 0.0 {
        return Ok((DVector::zeros(q), DVector::zeros(q)));
    }
    assert!(fit.sigma2_e > 0.0, "V is singular when sigma2_e = 0");
    let resid = &p.y - &p.xstar * &fit.beta_star;
    let s = match chol {
        Some(c) => c.solve(&resid),
        None => p
            .covariance(fit.sigma2_g, fit.sigma2_e)
            .cholesky()
            .ok_or(Error::NonPsdK(f64::NAN))?
            .solve(&resid),
    };
    let w = p.z.apply_transpose(&s);
    let g = &p.k.values * &w * fit.sigma2_g;
    Ok((g, w))
}

/// Genetic effect of the region for new lines from their cross kernel
/// against the training lines (`t x q`, already on the training scale).
pub fn predict_local(fit: &FittedRegionModel, cross: &DMatrix<f64>) -> Result<DVector<f64>> {
    let q = fit.solver_state.weights.len();
    if cross.ncols() != q {
        return Err(Error::DimensionMismatch(format!(
            "cross kernel has {} columns, model has {q} training lines",
            cross.ncols()
        )));
    }
    Ok(cross * &fit.solver_state.weights * fit.sigma2_g)
}

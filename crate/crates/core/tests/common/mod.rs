//! Independent dense oracles and random instance generators shared by the
//! integration tests. Nothing here calls into the solvers under test.

#![allow(dead_code)]

use legp::ingest::{Coding, Incidence, MarkerMatrix};
use legp::kernel::KernelMatrix;
use legp::reml::SpmmProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random mixed model: `n` observations on `q` lines (every line observed at
/// least once), intercept plus `p - 1` covariates, a random PSD kernel of
/// random rank and data drawn from the model itself.
pub fn random_spmm(rng: &mut ChaCha8Rng, n_max: usize, q_max: usize) -> SpmmProblem {
    let n = rng.gen_range(10..=n_max);
    let q = rng.gen_range(4..=q_max.min(n));
    let p = rng.gen_range(1..=3);
    let mut cols: Vec<usize> = (0..q).collect();
    cols.extend((q..n).map(|_| rng.gen_range(0..q)));
    let z = Incidence { cols, q };

    let rank = rng.gen_range(1..=q);
    let a = DMatrix::from_fn(q, rank, |_, _| normal(rng));
    let mut k = &a * a.transpose();
    let c = (q as f64 / k.trace()).sqrt();
    k *= c * c;

    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { normal(rng) });
    let s2g: f64 = 1.0;
    let s2e = (rng.gen_range(-2.0..2.0f64)).exp();
    let u = &a * DVector::from_fn(rank, |_, _| normal(rng)) * (c * s2g.sqrt());
    let beta = DVector::from_fn(p, |_, _| normal(rng));
    let y = &x * beta + z.apply(&u) + DVector::from_fn(n, |_, _| normal(rng) * s2e.sqrt());
    SpmmProblem::new(y, x, z, KernelMatrix::from_values(k)).expect("valid instance")
}

fn ln_det_spd(m: &DMatrix<f64>) -> f64 {
    let c = m.clone().cholesky().expect("positive definite");
    2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Restricted log-likelihood with `sigma2_g` profiled out, up to a constant,
/// from dense matrices: `H = Z K Z^T + delta I`,
/// `-1/2 [(n - p) ln(y^T P y) + ln|H| + ln|X^T H^-1 X|]`.
pub fn dense_reml(p: &SpmmProblem, delta: f64) -> f64 {
    let n = p.y.len();
    let k = p.xstar.ncols();
    let zd = p.z.to_dense();
    let h = &zd * &p.k.values * zd.transpose() + DMatrix::identity(n, n) * delta;
    let hinv = h.clone().try_inverse().expect("H invertible");
    let xthx = p.xstar.transpose() * &hinv * &p.xstar;
    let xthx_inv = xthx.clone().try_inverse().expect("X^T H^-1 X invertible");
    let proj = &hinv - &hinv * &p.xstar * xthx_inv * p.xstar.transpose() * &hinv;
    let ypy = (p.y.transpose() * proj * &p.y)[0];
    -0.5 * ((n - k) as f64 * ypy.ln() + ln_det_spd(&h) + ln_det_spd(&xthx))
}

/// Limit of [`dense_reml`] as `delta -> infinity`.
pub fn dense_reml_null(p: &SpmmProblem) -> f64 {
    let n = p.y.len();
    let k = p.xstar.ncols();
    let xtx = p.xstar.transpose() * &p.xstar;
    let b = xtx.clone().try_inverse().expect("X full rank") * p.xstar.transpose() * &p.y;
    let r = &p.y - &p.xstar * b;
    -0.5 * ((n - k) as f64 * r.norm_squared().ln() + ln_det_spd(&xtx))
}

/// GLS coefficients and EBLUP `s2g K Z^T V^-1 (y - X b)` with dense inverses.
pub fn dense_eblup(p: &SpmmProblem, s2g: f64, s2e: f64) -> (DVector<f64>, DVector<f64>) {
    let n = p.y.len();
    let zd = p.z.to_dense();
    let v = &zd * &p.k.values * zd.transpose() * s2g + DMatrix::identity(n, n) * s2e;
    let vinv = v.try_inverse().expect("V invertible");
    let xtvx = p.xstar.transpose() * &vinv * &p.xstar;
    let b = xtvx.try_inverse().expect("X^T V^-1 X invertible") * p.xstar.transpose() * &vinv * &p.y;
    let g = &p.k.values * zd.transpose() * &vinv * (&p.y - &p.xstar * &b) * s2g;
    (b, g)
}

/// `[1, X]`, and the least-squares coefficients of `r` on it.
fn unpenalized_fit(x: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let u = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let utu = u.transpose() * &u;
    utu.try_inverse().expect("[1, X] full rank") * u.transpose() * r
}

/// Penalized objective at `alpha`, with intercept and covariates at their
/// least-squares values.
pub fn lasso_objective(g: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>, l1: f64, l2: f64) -> f64 {
    let r = y - g * alpha;
    let b = unpenalized_fit(x, &r);
    let u = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let res = r - u * b;
    res.norm_squared() + l1 * alpha.iter().map(|a| a.abs()).sum::<f64>() + l2 * alpha.norm_squared()
}

/// Project the columns of `[1, X]` out of `m`.
fn residualize(x: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let u = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let utu_inv = (u.transpose() * &u).try_inverse().expect("[1, X] full rank");
    m - &u * (utu_inv * (u.transpose() * m))
}

/// Exact minimizer by enumerating every sign pattern in `{-1, 0, 1}^k`: each
/// pattern fixes a quadratic whose stationary point is kept only if its
/// signs agree with the pattern. The global minimizer is always among them.
pub fn exhaustive_lasso(g: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>, l1: f64, l2: f64) -> (DVector<f64>, f64) {
    let k = g.ncols();
    let gt = residualize(x, g);
    let yt = residualize(x, &DMatrix::from_column_slice(y.len(), 1, y.as_slice())).column(0).into_owned();
    let mut best = (DVector::zeros(k), lasso_objective(g, x, y, &DVector::zeros(k), l1, l2));
    let total = 3usize.pow(k as u32);
    for code in 1..total {
        let mut c = code;
        let signs: Vec<i32> = (0..k)
            .map(|_| {
                let s = (c % 3) as i32 - 1;
                c /= 3;
                s
            })
            .collect();
        let active: Vec<usize> = (0..k).filter(|&j| signs[j] != 0).collect();
        if active.is_empty() {
            continue;
        }
        let ga = DMatrix::from_fn(gt.nrows(), active.len(), |i, a| gt[(i, active[a])]);
        let lhs = ga.transpose() * &ga + DMatrix::identity(active.len(), active.len()) * l2;
        let rhs = ga.transpose() * &yt - DVector::from_iterator(active.len(), active.iter().map(|&j| 0.5 * l1 * signs[j] as f64));
        let Some(sol) = lhs.lu().solve(&rhs) else { continue };
        if active.iter().enumerate().any(|(a, &j)| sol[a] * signs[j] as f64 <= 0.0) {
            continue;
        }
        let mut alpha = DVector::zeros(k);
        for (a, &j) in active.iter().enumerate() {
            alpha[j] = sol[a];
        }
        let f = lasso_objective(g, x, y, &alpha, l1, l2);
        if f < best.1 {
            best = (alpha, f);
        }
    }
    best
}

/// Accelerated proximal gradient (FISTA with adaptive restart) on the
/// profiled problem.
pub fn fista_lasso(g: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>, l1: f64, l2: f64, iters: usize) -> (DVector<f64>, f64) {
    let k = g.ncols();
    let gt = residualize(x, g);
    let yt = residualize(x, &DMatrix::from_column_slice(y.len(), 1, y.as_slice())).column(0).into_owned();
    let gtg = gt.transpose() * &gt;
    let gty = gt.transpose() * &yt;
    let lip = 2.0 * gtg.clone().symmetric_eigen().eigenvalues.max() + 2.0 * l2;
    let step = 1.0 / lip;
    let smooth = |a: &DVector<f64>| -> f64 { (&yt - &gt * a).norm_squared() + l2 * a.norm_squared() };
    let mut a = DVector::zeros(k);
    let mut z = a.clone();
    let mut t = 1.0f64;
    let mut prev = f64::INFINITY;
    for _ in 0..iters {
        let grad = (&gtg * &z - &gty) * 2.0 + &z * (2.0 * l2);
        let w = &z - grad * step;
        let next = w.map(|v| v.signum() * (v.abs() - step * l1).max(0.0));
        let f = smooth(&next) + l1 * next.iter().map(|v| v.abs()).sum::<f64>();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if f > prev {
            // restart momentum
            z = a.clone();
            t = 1.0;
            continue;
        }
        z = &next + (&next - &a) * ((t - 1.0) / t_next);
        a = next;
        t = t_next;
        prev = f;
    }
    let f = lasso_objective(g, x, y, &a, l1, l2);
    (a, f)
}

/// Random 0/1/2 genotypes.
pub fn random_markers(rng: &mut ChaCha8Rng, n: usize, m: usize) -> MarkerMatrix {
    let values = DMatrix::from_fn(n, m, |_, _| rng.gen_range(0..3) as f64);
    MarkerMatrix::new(
        (0..n).map(|i| format!("l{i}")).collect(),
        (0..m).map(|j| format!("m{j}")).collect(),
        values,
        Coding::ZeroOneTwo,
    )
    .expect("valid markers")
}

/// Peak resident set size of this process in bytes (Linux only).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

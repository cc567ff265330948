//! Gram matrices over marker submatrices.
//!
//! Rows of the input are subjects (lines), columns are the markers of one
//! region. Kernels are built per region and dropped once the region is
//! fitted, so at most one region's markers are materialised at a time.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Linear,
    Polynomial,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Mean squared distance over all distinct training pairs.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Polynomial offset.
    pub c: f64,
    /// Polynomial degree.
    pub d: u32,
    /// Gaussian bandwidth.
    pub h: Bandwidth,
    /// Multiply the Gaussian kernel by `1/sqrt(2 pi h)`.
    pub include_gaussian_norm_constant: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::gaussian()
    }
}

impl KernelSpec {
    pub fn linear() -> Self {
        KernelSpec {
            kind: KernelKind::Linear,
            c: 0.0,
            d: 1,
            h: Bandwidth::Auto,
            include_gaussian_norm_constant: false,
        }
    }

    pub fn polynomial(c: f64, d: u32) -> Self {
        KernelSpec {
            kind: KernelKind::Polynomial,
            c,
            d,
            ..KernelSpec::linear()
        }
    }

    pub fn gaussian() -> Self {
        KernelSpec {
            kind: KernelKind::Gaussian,
            ..KernelSpec::linear()
        }
    }

    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.h = Bandwidth::Fixed(h);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("polynomial degree must be >= 1".into()));
        }
        if let Bandwidth::Fixed(h) = self.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            KernelKind::Linear => "linear",
            KernelKind::Polynomial => "poly",
            KernelKind::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub subject_ids: Vec<String>,
    pub spec: KernelSpec,
    pub normalized: bool,
    /// Bandwidth actually used (Gaussian only).
    pub bandwidth: Option<f64>,
    /// Factor applied by [`normalize`]; cross kernels must be scaled by it too.
    pub scale: f64,
}

impl KernelMatrix {
    /// Wrap an explicit matrix (no spec-driven construction).
    pub fn from_values(values: DMatrix<f64>) -> Self {
        let q = values.nrows();
        KernelMatrix {
            values,
            subject_ids: (0..q).map(|i| i.to_string()).collect(),
            spec: KernelSpec::linear(),
            normalized: false,
            bandwidth: None,
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Errors unless the smallest eigenvalue is at least `-1e-8` times the
    /// largest.
    pub fn check_psd(&self) -> Result<()> {
        let eig = self.values.clone().symmetric_eigen().eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if min < -1e-8 * max.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NonPsdK(min));
        }
        Ok(())
    }
}

fn row_sq_norms(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.nrows()).map(|i| x.row(i).norm_squared()).collect()
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
fn sq_distances(a: &DMatrix<f64>, b: &DMatrix<f64>, dots: &DMatrix<f64>) -> DMatrix<f64> {
    let na = row_sq_norms(a);
    let nb = row_sq_norms(b);
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| (na[i] + nb[j] - 2.0 * dots[(i, j)]).max(0.0))
}

fn apply_kernel(dots: DMatrix<f64>, dist: Option<DMatrix<f64>>, spec: &KernelSpec, h: Option<f64>) -> DMatrix<f64> {
    match spec.kind {
        KernelKind::Linear => dots,
        KernelKind::Polynomial => dots.map(|v| (v + spec.c).powi(spec.d as i32)),
        KernelKind::Gaussian => {
            let h = h.expect("bandwidth resolved");
            let norm = if spec.include_gaussian_norm_constant {
                1.0 / (2.0 * std::f64::consts::PI * h).sqrt()
            } else {
                1.0
            };
            dist.expect("distances computed").map(|d2| norm * (-d2 / (2.0 * h)).exp())
        }
    }
}

/// Gram matrix of the rows of `markers` (`q x m_j`).
pub fn gram(markers: &DMatrix<f64>, spec: &KernelSpec, subject_ids: Option<&[String]>) -> Result<KernelMatrix> {
    spec.validate()?;
    let q = markers.nrows();
    if markers.ncols() == 0 {
        return Err(Error::ColumnMismatch {
            expected: 1,
            found: 0,
        });
    }
    let dots = markers * markers.transpose();
    let (dist, h) = if spec.kind == KernelKind::Gaussian {
        let mut d = sq_distances(markers, markers, &dots);
        for i in 0..q {
            d[(i, i)] = 0.0;
        }
        let h = match spec.h {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => {
                let pairs = q * (q - 1) / 2;
                let mut sum = 0.0;
                for j in 0..q {
                    for i in (j + 1)..q {
                        sum += d[(i, j)];
                    }
                }
                let h = if pairs > 0 { sum / pairs as f64 } else { 0.0 };
                if !(h > 0.0) {
                    return Err(Error::ZeroVarianceInput);
                }
                h
            }
        };
        (Some(d), Some(h))
    } else {
        (None, None)
    };
    let mut values = apply_kernel(dots, dist, spec, h);
    crate::linalg::symmetrize(&mut values);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry);
    }
    Ok(KernelMatrix {
        values,
        subject_ids: match subject_ids {
            Some(ids) => ids.to_vec(),
            None => (0..q).map(|i| i.to_string()).collect(),
        },
        spec: *spec,
        normalized: false,
        bandwidth: h,
        scale: 1.0,
    })
}

/// Scale so the mean diagonal entry is one.
pub fn normalize(k: &KernelMatrix) -> Result<KernelMatrix> {
    let q = k.dim();
    let trace = k.values.trace();
    if !(trace > 0.0) {
        return Err(Error::ZeroTrace);
    }
    let f = q as f64 / trace;
    let mut out = k.clone();
    out.values *= f;
    out.normalized = true;
    out.scale = k.scale * f;
    Ok(out)
}

/// Kernel between new rows (`t x m_j`) and training rows (`q x m_j`), with
/// the Gaussian bandwidth fixed to `h_from_training`. Unscaled: multiply by
/// the training [`KernelMatrix::scale`] to match a normalized training gram.
pub fn cross_gram(
    train_rows: &DMatrix<f64>,
    new_rows: &DMatrix<f64>,
    spec: &KernelSpec,
    h_from_training: Option<f64>,
) -> Result<DMatrix<f64>> {
    if train_rows.ncols() != new_rows.ncols() {
        return Err(Error::ColumnMismatch {
            expected: train_rows.ncols(),
            found: new_rows.ncols(),
        });
    }
    let dots = new_rows * train_rows.transpose();
    let (dist, h) = if spec.kind == KernelKind::Gaussian {
        let h = match (h_from_training, spec.h) {
            (Some(h), _) | (None, Bandwidth::Fixed(h)) => h,
            (None, Bandwidth::Auto) => {
                return Err(Error::Config("cross kernel needs the training bandwidth".into()))
            }
        };
        (Some(sq_distances(new_rows, train_rows, &dots)), Some(h))
    } else {
        (None, None)
    };
    let values = apply_kernel(dots, dist, spec, h);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(data: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(data.len(), data[0].len(), |i, j| data[i][j])
    }

    #[test]
    fn linear_is_dot_product() {
        let k = gram(&rows(&[&[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]]), &KernelSpec::linear(), None).unwrap();
        assert_eq!(k.values[(0, 1)], 2.0);
    }

    #[test]
    fn polynomial_offset_and_degree() {
        let k = gram(&rows(&[&[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]]), &KernelSpec::polynomial(1.0, 2), None).unwrap();
        assert_eq!(k.values[(0, 1)], 9.0);
    }

    #[test]
    fn gaussian_zero_distance() {
        let x = rows(&[&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]]);
        let k = gram(&x, &KernelSpec::gaussian().with_bandwidth(3.7), None).unwrap();
        assert_eq!(k.values[(0, 1)], 1.0);
        assert_eq!(k.values[(2, 2)], 1.0);
        let mut spec = KernelSpec::gaussian().with_bandwidth(1.0);
        spec.include_gaussian_norm_constant = true;
        let k = gram(&x, &spec, None).unwrap();
        assert!((k.values[(0, 0)] - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn auto_bandwidth_is_mean_pair_distance() {
        // squared distances: (0,1)=1, (0,2)=4, (1,2)=1 -> h = 2
        let x = rows(&[&[0.0], &[1.0], &[2.0]]);
        let k = gram(&x, &KernelSpec::gaussian(), None).unwrap();
        assert_eq!(k.bandwidth, Some(2.0));
        assert!((k.values[(0, 2)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_have_no_auto_bandwidth() {
        let x = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(gram(&x, &KernelSpec::gaussian(), None), Err(Error::ZeroVarianceInput)));
    }

    #[test]
    fn normalize_examples() {
        let id = KernelMatrix::from_values(DMatrix::identity(4, 4));
        assert_eq!(normalize(&id).unwrap().values, DMatrix::identity(4, 4));
        let two = KernelMatrix::from_values(DMatrix::identity(4, 4) * 2.0);
        let n = normalize(&two).unwrap();
        assert_eq!(n.values, DMatrix::identity(4, 4));
        assert_eq!(n.scale, 0.5);
        let zero = KernelMatrix::from_values(DMatrix::zeros(3, 3));
        assert!(matches!(normalize(&zero), Err(Error::ZeroTrace)));
    }

    #[test]
    fn cross_gram_consistency() {
        let x = rows(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, 1.0], &[2.0, 2.0, 0.0], &[1.0, 1.0, 1.0]]);
        let lin = KernelSpec::linear();
        assert_eq!(cross_gram(&x, &x, &lin, None).unwrap(), gram(&x, &lin, None).unwrap().values);

        let g = gram(&x, &KernelSpec::gaussian(), None).unwrap();
        let new = x.rows(2, 1).into_owned();
        let c = cross_gram(&x, &new, &KernelSpec::gaussian(), g.bandwidth).unwrap();
        for j in 0..4 {
            assert!((c[(0, j)] - g.values[(2, j)]).abs() < 1e-14);
        }

        let orth = rows(&[&[0.0, 0.0, 0.0]]);
        assert!(cross_gram(&x, &orth, &lin, None).unwrap().iter().all(|&v| v == 0.0));
        let bad = rows(&[&[0.0, 0.0]]);
        assert!(matches!(cross_gram(&x, &bad, &lin, None), Err(Error::ColumnMismatch { .. })));
    }

    #[test]
    fn psd_check_rejects_indefinite() {
        let k = KernelMatrix::from_values(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(k.check_psd(), Err(Error::NonPsdK(_))));
    }

    fn marker_matrix() -> impl Strategy<Value = DMatrix<f64>> {
        (2usize..12, 1usize..8).prop_flat_map(|(q, m)| {
            proptest::collection::vec(0u8..3, q * m)
                .prop_map(move |v| DMatrix::from_iterator(q, m, v.into_iter().map(f64::from)))
        })
    }

    proptest! {
        #[test]
        fn permutation_equivariance(x in marker_matrix(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let q = x.nrows();
            let mut perm: Vec<usize> = (0..q).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let px = DMatrix::from_fn(q, x.ncols(), |i, j| x[(perm[i], j)]);
            for spec in [KernelSpec::linear(), KernelSpec::polynomial(1.0, 2), KernelSpec::gaussian().with_bandwidth(2.0)] {
                let k = gram(&x, &spec, None).unwrap().values;
                let pk = gram(&px, &spec, None).unwrap().values;
                for i in 0..q {
                    for j in 0..q {
                        prop_assert!((pk[(i, j)] - k[(perm[i], perm[j])]).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn gaussian_decreases_with_distance(h in 0.1f64..10.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let x = DMatrix::from_row_slice(3, 1, &[0.0, a, b]);
            let k = gram(&x, &KernelSpec::gaussian().with_bandwidth(h), None).unwrap();
            let (near, far) = if a < b { (1, 2) } else { (2, 1) };
            prop_assert!(k.values[(0, near)] > k.values[(0, far)]);
        }

        #[test]
        fn normalize_is_idempotent(x in marker_matrix()) {
            let k = gram(&x, &KernelSpec::polynomial(1.0, 2), None).unwrap();
            let once = normalize(&k).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert!((once.values - twice.values).abs().max() < 1e-12);
        }
    }
}

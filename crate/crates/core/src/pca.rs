//! Principal components of the markers outside a region, used as fixed
//! effects that absorb background population structure.

use std::collections::HashSet;

use log::warn;
use nalgebra::DMatrix;

use crate::error::Result;
use crate::ingest::MarkerMatrix;
use crate::linalg::sorted_symmetric_eigen;

/// Column block size for streaming products over many markers.
const BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PcBasis {
    /// Marker columns the basis was computed from.
    pub marker_indices: Vec<usize>,
    /// Training means of those columns.
    pub means: Vec<f64>,
    /// `m_out x r`, orthonormal columns.
    pub loadings: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl PcBasis {
    pub fn empty() -> Self {
        PcBasis {
            marker_indices: Vec::new(),
            means: Vec::new(),
            loadings: DMatrix::zeros(0, 0),
            singular_values: Vec::new(),
        }
    }

    pub fn r(&self) -> usize {
        self.loadings.ncols()
    }

    /// Scores `(X - mean) V` for the given lines of `markers`.
    pub fn scores(&self, markers: &MarkerMatrix, rows: &[usize]) -> DMatrix<f64> {
        let r = self.r();
        let mut out = DMatrix::zeros(rows.len(), r);
        if r == 0 {
            return out;
        }
        for (b, cols) in self.marker_indices.chunks(BLOCK).enumerate() {
            let off = b * BLOCK;
            let block = centered_block(markers, rows, cols, &self.means[off..off + cols.len()]);
            let v = self.loadings.rows(off, cols.len());
            out += &block * v;
        }
        out
    }
}

fn centered_block(markers: &MarkerMatrix, rows: &[usize], cols: &[usize], means: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| markers.values[(rows[i], cols[j])] - means[j])
}

/// Top-`r` principal components of the column-centred matrix of markers not
/// in `region`, restricted to lines `rows`.
///
/// Works from the smaller of the two cross-product matrices and streams over
/// marker blocks, so no `m x m` matrix is formed when lines are fewer than
/// markers. If fewer than `r` singular values are non-zero, `r` is reduced.
pub fn pca_out_of_region(markers: &MarkerMatrix, rows: &[usize], region: &[usize], r: usize) -> Result<PcBasis> {
    let inside: HashSet<usize> = region.iter().copied().collect();
    let cols: Vec<usize> = (0..markers.n_markers()).filter(|c| !inside.contains(c)).collect();
    let n = rows.len();
    if r == 0 || cols.is_empty() || n < 2 {
        return Ok(PcBasis::empty());
    }
    let means: Vec<f64> = cols
        .iter()
        .map(|&c| rows.iter().map(|&i| markers.values[(i, c)]).sum::<f64>() / n as f64)
        .collect();

    let m_out = cols.len();
    let (sigma, loadings) = if n <= m_out {
        let mut g = DMatrix::<f64>::zeros(n, n);
        for (b, chunk) in cols.chunks(BLOCK).enumerate() {
            let off = b * BLOCK;
            let block = centered_block(markers, rows, chunk, &means[off..off + chunk.len()]);
            g.gemm(1.0, &block, &block.transpose(), 1.0);
        }
        let (vals, vecs) = sorted_symmetric_eigen(g);
        let keep = effective_rank(&vals, r);
        let sigma: Vec<f64> = (0..keep).map(|k| vals[k].sqrt()).collect();
        // V = Xc^T U S^-1
        let mut u = vecs.columns(0, keep).into_owned();
        for k in 0..keep {
            u.column_mut(k).scale_mut(1.0 / sigma[k]);
        }
        let mut v = DMatrix::zeros(m_out, keep);
        for (b, chunk) in cols.chunks(BLOCK).enumerate() {
            let off = b * BLOCK;
            let block = centered_block(markers, rows, chunk, &means[off..off + chunk.len()]);
            v.rows_mut(off, chunk.len()).copy_from(&(block.transpose() * &u));
        }
        (sigma, v)
    } else {
        let xc = centered_block(markers, rows, &cols, &means);
        let c = xc.transpose() * &xc;
        let (vals, vecs) = sorted_symmetric_eigen(c);
        let keep = effective_rank(&vals, r);
        let sigma = (0..keep).map(|k| vals[k].sqrt()).collect();
        (sigma, vecs.columns(0, keep).into_owned())
    };
    Ok(PcBasis {
        marker_indices: cols,
        means,
        loadings,
        singular_values: sigma,
    })
}

fn effective_rank(eigenvalues: &nalgebra::DVector<f64>, r: usize) -> usize {
    let max = eigenvalues.iter().copied().fold(0.0, f64::max);
    let nonzero = eigenvalues.iter().filter(|&&l| l > 1e-11 * max && l > 0.0).count();
    if nonzero < r {
        warn!("only {nonzero} non-zero singular values; using {nonzero} principal components instead of {r}");
    }
    nonzero.min(r)
}

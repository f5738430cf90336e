//! Dense helpers shared by the generators and the verification code.

use nalgebra::{DMatrix, DVector};

/// Threshold used to decide which singular values count as nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RankTolerance {
    /// `max(rows, cols) * eps * sigma_max`.
    #[default]
    Auto,
    /// `factor * sigma_max`.
    Relative(f64),
    /// Fixed absolute cutoff.
    Absolute(f64),
}

impl RankTolerance {
    pub fn cutoff(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match *self {
            RankTolerance::Auto => rows.max(cols) as f64 * f64::EPSILON * sigma_max,
            RankTolerance::Relative(f) => f * sigma_max,
            RankTolerance::Absolute(a) => a,
        }
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut s = m.clone().singular_values();
    sort_desc(s.as_mut_slice());
    s
}

fn sort_desc(v: &mut [f64]) {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
}

pub fn numerical_rank(m: &DMatrix<f64>, tol: RankTolerance) -> usize {
    let s = singular_values(m);
    if s.is_empty() || s[0] == 0.0 {
        return 0;
    }
    let cut = tol.cutoff(m.nrows(), m.ncols(), s[0]);
    s.iter().filter(|&&v| v > cut).count()
}

/// Orthonormal basis (as columns) of the null space of `m`.
pub fn null_space_basis(m: &DMatrix<f64>, tol: RankTolerance) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Pad wide matrices so the thin SVD returns a full right basis.
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let cut = tol.cutoff(rows, cols, smax);
    let null_rows: Vec<usize> = (0..sigma.len()).filter(|&i| smax == 0.0 || sigma[i] <= cut).collect();
    let mut basis = DMatrix::zeros(cols, null_rows.len());
    for (j, &i) in null_rows.iter().enumerate() {
        basis.set_column(j, &v_t.row(i).transpose());
    }
    basis
}

/// Largest residual `|v - B B^T v|` over the columns `v` of `from`, where
/// `onto` has orthonormal columns. Measures how far span(from) sticks out of
/// span(onto).
pub fn max_projection_residual(from: &DMatrix<f64>, onto: &DMatrix<f64>) -> f64 {
    if from.ncols() == 0 {
        return 0.0;
    }
    if onto.ncols() == 0 {
        return from.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    }
    let coeff = onto.transpose() * from;
    let resid = from - onto * coeff;
    resid.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Divides every column by its Euclidean norm (zero columns untouched).
pub fn normalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let nrm = col.norm();
        if nrm > 0.0 {
            col /= nrm;
        }
    }
    out
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

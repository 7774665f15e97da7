//! Dense SVD utilities: numerical rank, null spaces, minimum-norm solves.

use nalgebra::{DMatrix, DVector};

/// Singular value decomposition with values sorted descending and a full set
/// of right singular vectors (columns of `v`), including those of a wide
/// matrix's trivial kernel.
#[derive(Clone, Debug)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SortedSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (rows, cols) = a.shape();
        // Pad wide matrices with zero rows so every right singular vector
        // comes back.
        let padded = if rows < cols {
            let mut p = DMatrix::zeros(cols, cols);
            p.view_mut((0, 0), (rows, cols)).copy_from(a);
            p
        } else {
            a.clone()
        };
        let k = padded.ncols();
        if k == 0 {
            return Self { u: DMatrix::zeros(rows, 0), singular_values: DVector::zeros(0), v: DMatrix::zeros(0, 0) };
        }
        let svd = padded.svd(true, true);
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let s = svd.singular_values;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
        let singular_values = DVector::from_iterator(s.len(), order.iter().map(|&i| s[i]));
        let v = DMatrix::from_fn(k, order.len(), |r, c| vt[(order[c], r)]);
        let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
        Self { u, singular_values, v }
    }

    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values at or above `rel_tol·σ_max`. A zero matrix
    /// has rank zero.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let smax = self.max_singular_value();
        if smax == 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|&&s| s >= rel_tol * smax).count()
    }

    /// Orthonormal basis of the numerical kernel, sign-normalized.
    pub fn kernel(&self, rel_tol: f64) -> Vec<DVector<f64>> {
        let r = self.rank(rel_tol);
        (r..self.v.ncols()).map(|c| sign_normalized(self.v.column(c).into_owned())).collect()
    }

    /// Minimum-norm least-squares solution of `A x = b` with singular values
    /// below `rel_tol·σ_max` treated as zero.
    pub fn solve_min_norm(&self, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
        let r = self.rank(rel_tol);
        let mut x = DVector::zeros(self.v.nrows());
        for i in 0..r {
            let ui = self.u.column(i);
            let coef = ui.rows(0, b.len()).dot(b) / self.singular_values[i];
            x.axpy(coef, &self.v.column(i), 1.0);
        }
        x
    }
}

/// Right null space of `a`.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> Vec<DVector<f64>> {
    if a.nrows() == 0 {
        return (0..a.ncols()).map(|i| unit_vector(a.ncols(), i)).collect();
    }
    SortedSvd::new(a).kernel(rel_tol)
}

/// Left null space of `a`: vectors `u` with `uᵀa = 0`.
pub fn left_null_space(a: &DMatrix<f64>, rel_tol: f64) -> Vec<DVector<f64>> {
    null_space(&a.transpose(), rel_tol)
}

pub fn unit_vector(m: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(m);
    e[i] = 1.0;
    e
}

/// Unit norm, first component with magnitude above 1e-12 positive.
pub fn sign_normalized(mut u: DVector<f64>) -> DVector<f64> {
    let norm = u.norm();
    if norm > 0.0 {
        u /= norm;
    }
    if let Some(first) = u.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            u.neg_mut();
        }
    }
    u
}

/// Largest principal angle between the spans of two orthonormal sets.
pub fn subspace_angle(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    if a.len() != b.len() {
        return std::f64::consts::FRAC_PI_2;
    }
    if a.is_empty() {
        return 0.0;
    }
    let qa = DMatrix::from_columns(a);
    let qb = DMatrix::from_columns(b);
    // Residual of b after projection onto span(a).
    let resid = &qb - &qa * (qa.transpose() * &qb);
    let s = resid.singular_values();
    s.iter().copied().fold(0.0f64, f64::max).min(1.0).asin()
}

/// Residual of `g` after orthogonal projection onto the column span of the
/// orthonormal columns `q`.
pub fn project_out(q: &[DVector<f64>], g: &DVector<f64>) -> DVector<f64> {
    let mut r = g.clone();
    for qi in q {
        let c = qi.dot(&r);
        r.axpy(-c, qi, 1.0);
    }
    // Second pass for numerical orthogonality.
    for qi in q {
        let c = qi.dot(&r);
        r.axpy(-c, qi, 1.0);
    }
    r
}

/// Orthonormal basis of the column span of `cols`, by modified Gram–Schmidt
/// with relative dropping threshold `tol`.
pub fn orthonormal_basis(cols: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut q: Vec<DVector<f64>> = Vec::new();
    for c in cols {
        let norm = c.norm();
        if norm == 0.0 {
            continue;
        }
        let r = project_out(&q, c);
        let rn = r.norm();
        if rn > tol * norm {
            q.push(r / rn);
        }
    }
    q
}

//! Dense factorizations used by the matcher: Householder orthonormalization,
//! the minimum-norm reverse projection, nullspace extraction and SVD-based
//! alignment of two subspaces. Singular value decompositions go through
//! `faer`, which stays accurate on exactly rank-deficient input.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::projection::ProjectionMatrix;

/// Relative factor for the default dependent-column tolerance.
pub const DEFAULT_DEPENDENCE_FACTOR: f64 = 1e-10;

/// Singular values below this are treated as zero:
/// `max(rows, cols) * eps * sigma_max`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// `aᵀ b`. nalgebra's `tr_mul` runs dot-product loops; transposing the
/// narrower operand and using the blocked product is several times faster
/// for tall inputs.
pub fn cross_gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() <= b.ncols() {
        a.transpose() * b
    } else {
        (b.transpose() * a).transpose()
    }
}

/// Thin SVD `m = U diag(values) Vᵀ` with `min(rows, cols)` columns in `U`
/// and `V`; values nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub values: Vec<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(ThinSvd {
            u: DMatrix::zeros(r, 0),
            values: Vec::new(),
            v: DMatrix::zeros(c, 0),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix passed to the SVD".into()));
    }
    let svd = to_faer(m)
        .thin_svd()
        .map_err(|_| Error::NoConvergence("thin SVD"))?;
    let s = svd.S().column_vector();
    Ok(ThinSvd {
        u: from_faer(svd.U()),
        values: (0..s.nrows()).map(|i| s[i]).collect(),
        v: from_faer(svd.V()),
    })
}

/// SVD of a matrix that is finite by construction (projection operators,
/// cross-Grams of orthonormal bases).
fn svd_of_finite(m: &DMatrix<f64>) -> ThinSvd {
    thin_svd(m).expect("SVD of a finite matrix converges")
}

/// Singular values of `m`, sorted nonincreasing.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut values = to_faer(m)
        .singular_values()
        .expect("SVD of a finite matrix converges");
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Numerical rank under [`rank_tolerance`].
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let Some(&max) = sv.first() else { return 0 };
    let tol = rank_tolerance(m.nrows(), m.ncols(), max);
    sv.iter().filter(|&&s| s > tol).count()
}

/// A `d x k` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
}

impl OrthonormalBasis {
    /// Wraps columns that are already orthonormal, verifying it to `tol`
    /// (elementwise on `QᵀQ - I`).
    pub fn from_orthonormal(columns: DMatrix<f64>, tol: f64) -> Result<Self> {
        if columns.ncols() > columns.nrows() {
            return Err(Error::DimensionTooLarge {
                requested: columns.ncols(),
                max: columns.nrows(),
            });
        }
        let basis = Self { columns };
        let err = basis.orthonormality_error();
        if err > tol {
            return Err(Error::InvalidParameter(format!(
                "columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(basis)
    }

    pub(crate) fn new_unchecked(columns: DMatrix<f64>) -> Self {
        debug_assert!(columns.ncols() <= columns.nrows());
        Self { columns }
    }

    /// A rank-0 basis of `R^d`.
    pub fn empty(ambient_dim: usize) -> Self {
        Self {
            columns: DMatrix::zeros(ambient_dim, 0),
        }
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_columns(self) -> DMatrix<f64> {
        self.columns
    }

    pub fn ambient_dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.rank() == 0
    }

    /// Largest elementwise deviation of `QᵀQ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = cross_gram(&self.columns, &self.columns);
        let k = gram.nrows();
        let mut worst = 0.0f64;
        for j in 0..k {
            for i in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Coordinates of `m`'s columns in this basis, `Qᵀ m`.
    pub fn coordinates(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        cross_gram(&self.columns, m)
    }

    /// Component of `m`'s columns orthogonal to the span, `m - Q Qᵀ m`.
    pub fn residual(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_empty() {
            return m.clone();
        }
        m - &self.columns * self.coordinates(m)
    }

    /// Right-multiplies by `rotation`, which must have orthonormal columns.
    pub fn rotate(&self, rotation: &DMatrix<f64>) -> OrthonormalBasis {
        OrthonormalBasis::new_unchecked(&self.columns * rotation)
    }
}

/// Householder QR of a tall matrix that drops numerically dependent columns.
///
/// The accepted reflectors are kept in compact WY form `Q = I - V T Vᵀ`,
/// so any block of columns of `Q` is produced with one matrix product.
#[derive(Debug, Clone)]
pub struct Householder {
    /// Zero-padded reflector vectors, one per accepted column.
    vectors: DMatrix<f64>,
    taus: Vec<f64>,
    /// Indices of the input columns that were kept.
    accepted: Vec<usize>,
}

impl Householder {
    /// Factors `a`, dropping any column whose residual against the previously
    /// accepted columns has norm `<= tol`.
    pub fn factor(a: &DMatrix<f64>, tol: f64) -> Self {
        let (m, n) = a.shape();
        let mut work = a.clone();
        let mut vectors: Vec<DVector<f64>> = Vec::new();
        let mut taus = Vec::new();
        let mut accepted = Vec::new();

        for j in 0..n {
            let r = vectors.len();
            if r == m {
                break;
            }
            let x = work.view((r, j), (m - r, 1));
            let norm = x.norm();
            if norm <= tol {
                continue;
            }
            let mut v = x.column(0).clone_owned();
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let tau = 2.0 / v.norm_squared();
            for k in (j + 1)..n {
                let mut col = work.column_mut(k);
                let mut tail = col.rows_mut(r, m - r);
                let s = tau * v.dot(&tail);
                tail.axpy(-s, &v, 1.0);
            }
            let mut full = DVector::zeros(m);
            full.rows_mut(r, m - r).copy_from(&v);
            vectors.push(full);
            taus.push(tau);
            accepted.push(j);
        }

        let vectors = if vectors.is_empty() {
            DMatrix::zeros(m, 0)
        } else {
            DMatrix::from_columns(&vectors)
        };
        Self {
            vectors,
            taus,
            accepted,
        }
    }

    pub fn rank(&self) -> usize {
        self.taus.len()
    }

    pub fn accepted(&self) -> &[usize] {
        &self.accepted
    }

    /// Upper-triangular `T` of the compact WY representation.
    fn wy_factor(&self) -> DMatrix<f64> {
        let r = self.rank();
        let gram = cross_gram(&self.vectors, &self.vectors);
        let mut t = DMatrix::zeros(r, r);
        for i in 0..r {
            if i > 0 {
                let w = t.view((0, 0), (i, i)) * gram.view((0, i), (i, 1));
                t.view_mut((0, i), (i, 1)).copy_from(&(w * -self.taus[i]));
            }
            t[(i, i)] = self.taus[i];
        }
        t
    }

    /// Columns `range` of the full orthogonal factor `Q`.
    pub fn q_columns(&self, range: Range<usize>) -> DMatrix<f64> {
        let m = self.vectors.nrows();
        let width = range.len();
        let mut q = DMatrix::zeros(m, width);
        for (k, i) in range.clone().enumerate() {
            q[(i, k)] = 1.0;
        }
        if self.rank() == 0 || width == 0 {
            return q;
        }
        let t = self.wy_factor();
        let v_rows = self.vectors.rows(range.start, width);
        let coeff = t * v_rows.transpose();
        q.gemm(-1.0, &self.vectors, &coeff, 1.0);
        q
    }
}

/// Orthonormal basis of the column span of `columns` via Householder QR.
///
/// Columns whose residual after projection onto the previously accepted
/// columns has norm `<= tol` are dropped.
pub fn orthonormalize(columns: &DMatrix<f64>, tol: f64) -> Result<OrthonormalBasis> {
    if columns.ncols() == 0 {
        return Err(Error::InvalidParameter(
            "orthonormalize needs at least one column".into(),
        ));
    }
    let qr = Householder::factor(columns, tol);
    if qr.rank() == 0 {
        return Err(Error::EmptySpan);
    }
    Ok(OrthonormalBasis::new_unchecked(qr.q_columns(0..qr.rank())))
}

/// [`orthonormalize`] with the tolerance `1e-10 * (largest column norm)`.
pub fn orthonormalize_default(columns: &DMatrix<f64>) -> Result<OrthonormalBasis> {
    let max_norm = columns
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    orthonormalize(columns, DEFAULT_DEPENDENCE_FACTOR * max_norm)
}

/// Orthonormal basis of the orthogonal complement of `basis` in its ambient space.
pub fn orthogonal_complement(basis: &OrthonormalBasis) -> OrthonormalBasis {
    let d = basis.ambient_dim();
    let k = basis.rank();
    if k == 0 {
        return OrthonormalBasis::new_unchecked(DMatrix::identity(d, d));
    }
    let qr = Householder::factor(basis.columns(), 0.5);
    debug_assert_eq!(qr.rank(), k);
    OrthonormalBasis::new_unchecked(qr.q_columns(k..d))
}

/// Orthonormal directions spanning the part of `extra`'s columns not already
/// in `base`. Returns an empty basis when nothing new is added.
///
/// The residual is projected out twice before the Householder pass.
pub fn extension_basis(base: &OrthonormalBasis, extra: &DMatrix<f64>) -> Result<OrthonormalBasis> {
    if extra.nrows() != base.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: base.ambient_dim(),
            actual: extra.nrows(),
            context: "basis extension",
        });
    }
    let scale = extra.column_iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    let residual = base.residual(&base.residual(extra));
    let qr = Householder::factor(&residual, DEFAULT_DEPENDENCE_FACTOR.sqrt() * scale);
    if qr.rank() == 0 {
        return Ok(OrthonormalBasis::empty(base.ambient_dim()));
    }
    let ext = qr.q_columns(0..qr.rank());
    // One more sweep against the base keeps the joint basis orthonormal to
    // working precision.
    let ext = base.residual(&ext);
    orthonormalize(&ext, 0.5)
}

/// Concatenates two mutually orthogonal orthonormal bases.
pub fn concat_bases(
    first: &OrthonormalBasis,
    second: &OrthonormalBasis,
) -> Result<OrthonormalBasis> {
    if first.ambient_dim() != second.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: first.ambient_dim(),
            actual: second.ambient_dim(),
            context: "basis concatenation",
        });
    }
    let d = first.ambient_dim();
    let (a, b) = (first.rank(), second.rank());
    let mut m = DMatrix::zeros(d, a + b);
    m.columns_mut(0, a).copy_from(first.columns());
    m.columns_mut(a, b).copy_from(second.columns());
    Ok(OrthonormalBasis::new_unchecked(m))
}

fn hstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Row space and nullspace bases of a general (non-separable) matrix from
/// its SVD: right singular vectors up to the rank, then their complement.
fn row_and_null_general(m: &DMatrix<f64>) -> (OrthonormalBasis, OrthonormalBasis) {
    let n = m.ncols();
    if m.nrows() == 0 {
        return (
            OrthonormalBasis::empty(n),
            OrthonormalBasis::new_unchecked(DMatrix::identity(n, n)),
        );
    }
    let svd = svd_of_finite(m);
    let sv = &svd.values;
    let tol = rank_tolerance(m.nrows(), n, sv.first().copied().unwrap_or(0.0));
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let row = OrthonormalBasis::new_unchecked(svd.v.columns(0, rank).into_owned());
    let null = orthogonal_complement(&row);
    (row, null)
}

/// Orthonormal basis of the row space of `P` (a subspace of `R^{d_h}`).
pub fn row_space_basis(p: &ProjectionMatrix) -> OrthonormalBasis {
    match p.separable_factors() {
        Some((a, b)) => {
            let (ra, _) = row_and_null_general(a);
            let (rb, _) = row_and_null_general(b);
            OrthonormalBasis::new_unchecked(ra.columns().kronecker(rb.columns()))
        }
        None => row_and_null_general(p.matrix()).0,
    }
}

/// Orthonormal basis of `null(P)`, of rank `d_h - rank(P)`.
///
/// Separable operators `A ⊗ B` use `null(A ⊗ B) = null(A) ⊗ R^{w} ⊕ row(A) ⊗ null(B)`
/// with each factor handled by the SVD route.
pub fn nullspace_basis(p: &ProjectionMatrix) -> OrthonormalBasis {
    match p.separable_factors() {
        Some((a, b)) => {
            let (ra, na) = row_and_null_general(a);
            let (_, nb) = row_and_null_general(b);
            let eye = DMatrix::<f64>::identity(b.ncols(), b.ncols());
            let first = na.columns().kronecker(&eye);
            let second = ra.columns().kronecker(nb.columns());
            OrthonormalBasis::new_unchecked(hstack(&[first, second]))
        }
        None => row_and_null_general(p.matrix()).1,
    }
}

fn check_full_row_rank(m: &DMatrix<f64>) -> Result<()> {
    let sv = singular_values(m);
    let (Some(&max), Some(&min)) = (sv.first(), sv.last()) else {
        return Err(Error::RankDeficient("empty operator".into()));
    };
    let tol = rank_tolerance(m.nrows(), m.ncols(), max);
    if sv.len() < m.nrows() || min <= tol {
        return Err(Error::RankDeficient(format!(
            "smallest singular value {min:e} <= tolerance {tol:e}"
        )));
    }
    Ok(())
}

/// `Pᵀ (P Pᵀ)⁻¹` through a Cholesky solve.
fn reverse_general(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_full_row_rank(m)?;
    let gram = m * m.transpose();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("P Pᵀ is not positive definite".into()))?;
    Ok(chol.solve(m).transpose())
}

/// Minimum-norm right inverse `P_R = Pᵀ (P Pᵀ)⁻¹`, so that `P P_R = I`.
pub fn reverse_projection(p: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    match p.separable_factors() {
        Some((a, b)) => Ok(reverse_general(a)?.kronecker(&reverse_general(b)?)),
        None => reverse_general(p.matrix()),
    }
}

/// Reference route for [`reverse_projection`] that ignores separability.
pub fn reverse_projection_dense(p: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    reverse_general(p.matrix())
}

/// Reference route for [`nullspace_basis`] that ignores separability.
pub fn nullspace_basis_dense(p: &ProjectionMatrix) -> OrthonormalBasis {
    row_and_null_general(p.matrix()).1
}

/// SVD of `B_aᵀ B_b` for two orthonormal bases.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularAlignment {
    /// `u_1 … u_r`, coordinates in the first basis.
    pub left_directions: DMatrix<f64>,
    /// `v_1 … v_r`, coordinates in the second basis.
    pub right_directions: DMatrix<f64>,
    /// Cosines of the principal angles, nonincreasing.
    pub values: Vec<f64>,
}

impl SingularAlignment {
    /// The largest principal correlation, or 0 for an empty alignment.
    pub fn top(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// SVD of an arbitrary small cross-Gram matrix, sorted nonincreasing.
pub fn align_cross_gram(cross: DMatrix<f64>) -> SingularAlignment {
    let (ka, kb) = cross.shape();
    if ka == 0 || kb == 0 {
        return SingularAlignment {
            left_directions: DMatrix::zeros(ka, 0),
            right_directions: DMatrix::zeros(kb, 0),
            values: Vec::new(),
        };
    }
    let svd = svd_of_finite(&cross);
    SingularAlignment {
        left_directions: svd.u,
        right_directions: svd.v,
        values: svd.values,
    }
}

/// Principal-correlation alignment of two subspaces of the same ambient space.
pub fn paired_alignment(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<SingularAlignment> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: a.ambient_dim(),
            actual: b.ambient_dim(),
            context: "paired alignment",
        });
    }
    Ok(align_cross_gram(cross_gram(a.columns(), b.columns())))
}

/// Cosines of the principal angles between the column spans of two
/// arbitrary (not necessarily orthonormal) matrices.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let qa = orthonormalize_default(a)?;
    let qb = orthonormalize_default(b)?;
    Ok(paired_alignment(&qa, &qb)?.values)
}

/// Largest principal angle (radians) between two equal-dimensional spans.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let qa = orthonormalize_default(a)?;
    let qb = orthonormalize_default(b)?;
    if qa.rank() != qb.rank() {
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    // sin of the largest angle is the norm of the residual of one span
    // against the other; more accurate than acos near zero.
    let res = qb.residual(qa.columns());
    let sin = singular_values(&res).first().copied().unwrap_or(0.0);
    Ok(sin.min(1.0).asin())
}

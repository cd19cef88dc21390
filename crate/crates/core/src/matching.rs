//! Cross-resolution subspace matching.
//!
//! A `D`-dimensional subspace learned from `d_l`-pixel images is compared
//! with one learned from `d_h`-pixel images in two ways:
//!
//! * **naive**: re-project the low-resolution basis with the minimum-norm
//!   reverse operator `P_R`, orthonormalize, and compare directly;
//! * **constrained**: any high-resolution preimage of the low-resolution
//!   data differs from the re-projection by a vector in `null(P)`, so the
//!   reconstruction is free to rotate within `span([null(P) | B*_X])`. The
//!   `D` directions of that joint span best aligned with the reference are
//!   read off the SVD of `B_Yᵀ B_Xc`.
//!
//! The similarity of two subspaces is always the top principal correlation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::SubspaceModel;
use crate::linalg::{
    align_cross_gram, cross_gram, nullspace_basis, orthonormalize, orthonormalize_default,
    reverse_projection, row_space_basis, Householder, OrthonormalBasis, DEFAULT_DEPENDENCE_FACTOR,
};
use crate::projection::{ImageGeometry, KernelKind, ProjectionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Naive,
    Constrained,
}

impl MatchMethod {
    pub const ALL: [MatchMethod; 2] = [MatchMethod::Naive, MatchMethod::Constrained];

    pub fn as_str(&self) -> &'static str {
        match self {
            MatchMethod::Naive => "naive",
            MatchMethod::Constrained => "constrained",
        }
    }
}

impl fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(MatchMethod::Naive),
            "constrained" => Ok(MatchMethod::Constrained),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchOptions {
    /// Downgrade the `D >= d_l` degeneracy error to a warning.
    pub allow_degenerate: bool,
}

/// Everything about a downsampling operator that does not depend on data:
/// `P`, its reverse `P_R`, and the nullspace (ambiguity) basis `B_c`.
#[derive(Debug)]
pub struct CorrectionModel {
    projection: ProjectionMatrix,
    reverse: DMatrix<f64>,
    row_basis: OrthonormalBasis,
    ambiguity: OnceCell<OrthonormalBasis>,
}

impl CorrectionModel {
    pub fn new(projection: ProjectionMatrix) -> Result<Self> {
        let reverse = reverse_projection(&projection)?;
        let row_basis = row_space_basis(&projection);
        Ok(Self {
            projection,
            reverse,
            row_basis,
            ambiguity: OnceCell::new(),
        })
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    /// `P_R = Pᵀ (P Pᵀ)⁻¹`.
    pub fn reverse(&self) -> &DMatrix<f64> {
        &self.reverse
    }

    /// Orthonormal basis of the row space of `P`, the orthogonal complement
    /// of the ambiguity subspace.
    pub fn row_basis(&self) -> &OrthonormalBasis {
        &self.row_basis
    }

    /// `B_c`, computed on first use.
    pub fn ambiguity_basis(&self) -> &OrthonormalBasis {
        self.ambiguity
            .get_or_init(|| nullspace_basis(&self.projection))
    }

    /// Minimum-norm high-resolution preimage `P_R v` of a low-resolution
    /// vector.
    pub fn lift(&self, low: &[f64]) -> Result<Vec<f64>> {
        if low.len() != self.low_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.low_dim(),
                actual: low.len(),
                context: "low-resolution vector",
            });
        }
        Ok((&self.reverse * DVector::from_column_slice(low))
            .as_slice()
            .to_vec())
    }

    pub fn low_dim(&self) -> usize {
        self.projection.low_dim()
    }

    pub fn high_dim(&self) -> usize {
        self.projection.high_dim()
    }
}

/// Bundles `P` with `P_R` and `B_c`.
pub fn prepare_correction_model(p: ProjectionMatrix) -> Result<CorrectionModel> {
    let cm = CorrectionModel::new(p)?;
    cm.ambiguity_basis();
    Ok(cm)
}

type CacheKey = (ImageGeometry, ImageGeometry, KernelKind);

/// Correction models keyed by `(src, dst, kernel)`. Readers share built
/// models; each key is populated by exactly one builder.
#[derive(Debug, Default)]
pub struct CorrectionCache {
    cells: Mutex<HashMap<CacheKey, Arc<OnceCell<Arc<CorrectionModel>>>>>,
}

impl CorrectionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &self,
        src: ImageGeometry,
        dst: ImageGeometry,
        kernel: KernelKind,
    ) -> Result<Arc<CorrectionModel>> {
        let cell = {
            let mut cells = self.cells.lock().expect("correction cache poisoned");
            cells.entry((src, dst, kernel)).or_default().clone()
        };
        cell.get_or_try_init(|| {
            let p = ProjectionMatrix::build(src, dst, kernel)?;
            CorrectionModel::new(p).map(Arc::new)
        })
        .cloned()
    }

    pub fn len(&self) -> usize {
        self.cells.lock().expect("correction cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.cells
            .lock()
            .expect("correction cache poisoned")
            .clear();
    }
}

/// A matched pair of directions, both in the high-resolution image space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePair {
    pub reference: Vec<f64>,
    pub reconstructed: Vec<f64>,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub method: MatchMethod,
    /// Top principal correlation, `spectrum[0]`.
    pub similarity: f64,
    /// `D` principal correlations, nonincreasing (zero-padded when the
    /// reference has fewer dimensions than the reconstruction).
    pub spectrum: Vec<f64>,
    /// `B*_X` (naive) or `B'_X` (constrained).
    pub reconstructed_basis: OrthonormalBasis,
    /// `T = [v_1 | … | v_D]`, constrained only. Rows index the joint basis
    /// columns ordered as `[B_c | B*_X ⊖ B_c]`.
    pub rotation: Option<DMatrix<f64>>,
    /// `(B_Y u_i, reconstructed_i)` for each aligned pair, strongest first.
    pub mode_pairs: Vec<ModePair>,
}

fn check_low(b_x: &OrthonormalBasis, cm: &CorrectionModel) -> Result<()> {
    if b_x.ambient_dim() != cm.low_dim() {
        return Err(Error::DimensionMismatch {
            expected: cm.low_dim(),
            actual: b_x.ambient_dim(),
            context: "low-resolution basis",
        });
    }
    Ok(())
}

fn check_high(b_y: &OrthonormalBasis, cm: &CorrectionModel) -> Result<()> {
    if b_y.ambient_dim() != cm.high_dim() {
        return Err(Error::DimensionMismatch {
            expected: cm.high_dim(),
            actual: b_y.ambient_dim(),
            context: "high-resolution basis",
        });
    }
    Ok(())
}

fn check_degeneracy(dim: usize, cm: &CorrectionModel, opts: MatchOptions) -> Result<()> {
    let low = cm.low_dim();
    if dim >= low && low < cm.high_dim() {
        if opts.allow_degenerate {
            log::warn!("subspace dimension {dim} >= low-resolution pixel count {low}; constrained similarity is vacuous");
        } else {
            return Err(Error::Degenerate { dim, low_dim: low });
        }
    }
    Ok(())
}

fn warn_dim_mismatch(a: usize, b: usize) {
    if a != b {
        log::warn!("matching subspaces of different dimensions ({a} vs {b})");
    }
}

/// `B*_X = orth(P_R B_X)`.
pub fn naive_reconstruct(b_x: &OrthonormalBasis, cm: &CorrectionModel) -> Result<OrthonormalBasis> {
    check_low(b_x, cm)?;
    if b_x.is_empty() {
        return Ok(OrthonormalBasis::empty(cm.high_dim()));
    }
    orthonormalize_default(&(cm.reverse() * b_x.columns()))
}

fn padded(values: &[f64], len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = values.iter().take(len).copied().collect();
    out.resize(len, 0.0);
    out
}

fn mode_pairs(
    b_y: &OrthonormalBasis,
    left: &DMatrix<f64>,
    reconstructed: &DMatrix<f64>,
    values: &[f64],
) -> Vec<ModePair> {
    let count = values.len().min(reconstructed.ncols()).min(left.ncols());
    (0..count)
        .map(|i| ModePair {
            reference: (b_y.columns() * left.column(i)).as_slice().to_vec(),
            reconstructed: reconstructed.column(i).iter().copied().collect(),
            correlation: values[i],
        })
        .collect()
}

/// Naive matching: principal correlations between `B_Y` and `B*_X`.
pub fn naive_match(
    b_x: &OrthonormalBasis,
    b_y: &OrthonormalBasis,
    cm: &CorrectionModel,
) -> Result<MatchResult> {
    check_high(b_y, cm)?;
    warn_dim_mismatch(b_x.rank(), b_y.rank());
    let recon = naive_reconstruct(b_x, cm)?;
    let al = align_cross_gram(cross_gram(b_y.columns(), recon.columns()));
    let aligned = recon.columns() * &al.right_directions;
    let dim = b_x.rank();
    Ok(MatchResult {
        method: MatchMethod::Naive,
        similarity: al.top(),
        spectrum: padded(&al.values, dim),
        mode_pairs: mode_pairs(b_y, &al.left_directions, &aligned, &al.values),
        reconstructed_basis: recon,
        rotation: None,
    })
}

/// The part of `B*_X` outside `B_c`; with `B_c` this spans the joint basis.
fn joint_extension(recon: &OrthonormalBasis, cm: &CorrectionModel) -> Result<OrthonormalBasis> {
    if cm.ambiguity_basis().is_empty() {
        return Ok(recon.clone());
    }
    // span(B_c) is the complement of row(P), so projecting twice onto the
    // small row-space basis removes the B_c component without touching the
    // large nullspace basis.
    let row = cm.row_basis();
    let once = row.columns() * row.coordinates(recon.columns());
    let twice = row.columns() * row.coordinates(&once);
    let scale = recon
        .columns()
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    let qr = Householder::factor(&twice, DEFAULT_DEPENDENCE_FACTOR.sqrt() * scale);
    if qr.rank() == 0 {
        return Ok(OrthonormalBasis::empty(cm.high_dim()));
    }
    Ok(OrthonormalBasis::new_unchecked(qr.q_columns(0..qr.rank())))
}

/// Columns of `T` orthogonal to the leading `right` directions, used only
/// when the reference has fewer dimensions than the reconstruction.
fn complete_rotation(right: &DMatrix<f64>, ext_offset: usize, want: usize) -> Result<DMatrix<f64>> {
    let rows = right.nrows();
    let have = right.ncols();
    if have >= want {
        return Ok(right.columns(0, want).into_owned());
    }
    let mut seeds = DMatrix::zeros(rows, rows - ext_offset);
    for (k, i) in (ext_offset..rows).enumerate() {
        seeds[(i, k)] = 1.0;
    }
    let basis = OrthonormalBasis::new_unchecked(right.clone());
    let extra = orthonormalize(&basis.residual(&basis.residual(&seeds)), 1e-8)?;
    let mut t = DMatrix::zeros(rows, want);
    t.columns_mut(0, have).copy_from(right);
    let take = (want - have).min(extra.rank());
    t.columns_mut(have, take)
        .copy_from(&extra.columns().columns(0, take));
    Ok(t)
}

/// Constrained reconstruction of `B_X` toward `B_Y`: joint basis
/// `B_Xc = orth([B_c | B*_X])`, SVD `B_Yᵀ B_Xc = U Σ Vᵀ`, `B'_X = B_Xc V_D`.
pub fn constrained_reconstruct(
    b_x: &OrthonormalBasis,
    b_y: &OrthonormalBasis,
    cm: &CorrectionModel,
    opts: MatchOptions,
) -> Result<MatchResult> {
    check_low(b_x, cm)?;
    check_high(b_y, cm)?;
    let dim = b_x.rank();
    check_degeneracy(dim, cm, opts)?;
    warn_dim_mismatch(dim, b_y.rank());

    let recon = naive_reconstruct(b_x, cm)?;
    let ext = joint_extension(&recon, cm)?;
    let ambiguity = cm.ambiguity_basis();
    let n_c = ambiguity.rank();
    let n_e = ext.rank();

    let mut cross = DMatrix::zeros(b_y.rank(), n_c + n_e);
    if n_c > 0 {
        cross
            .columns_mut(0, n_c)
            .copy_from(&cross_gram(b_y.columns(), ambiguity.columns()));
    }
    cross
        .columns_mut(n_c, n_e)
        .copy_from(&cross_gram(b_y.columns(), ext.columns()));

    let al = align_cross_gram(cross);
    let rotation = complete_rotation(&al.right_directions, n_c, dim)?;

    let mut refined = ext.columns() * rotation.rows(n_c, n_e);
    if n_c > 0 {
        refined.gemm(1.0, ambiguity.columns(), &rotation.rows(0, n_c), 1.0);
    }

    Ok(MatchResult {
        method: MatchMethod::Constrained,
        similarity: al.top(),
        spectrum: padded(&al.values, dim),
        mode_pairs: mode_pairs(b_y, &al.left_directions, &refined, &al.values),
        reconstructed_basis: OrthonormalBasis::new_unchecked(refined),
        rotation: Some(rotation),
    })
}

/// Principal correlations of the constrained match computed without the
/// nullspace basis.
///
/// `span(B_Xc)` is the orthogonal complement of `row(P) ⊖ span(B*_X)`, so a
/// unit reference direction `y` keeps `1 - |F y|²` of its energy in the
/// joint span, where `F` projects row-space coordinates onto the part of
/// the row space not covered by `B*_X`. Returns all `rank(B_Y)` values,
/// nonincreasing.
pub fn constrained_correlations(
    b_x: &OrthonormalBasis,
    b_y: &OrthonormalBasis,
    cm: &CorrectionModel,
    opts: MatchOptions,
) -> Result<Vec<f64>> {
    check_low(b_x, cm)?;
    check_high(b_y, cm)?;
    check_degeneracy(b_x.rank(), cm, opts)?;
    if b_y.is_empty() {
        return Ok(Vec::new());
    }
    let recon = naive_reconstruct(b_x, cm)?;
    let row = cm.row_basis();
    let z = row.coordinates(b_y.columns());
    let lost = match orthonormalize_default(&row.coordinates(recon.columns())) {
        Ok(c) => c.residual(&z),
        Err(Error::EmptySpan) => z,
        Err(e) => return Err(e),
    };
    let gram = cross_gram(&lost, &lost);
    let mut values: Vec<f64> = gram
        .symmetric_eigenvalues()
        .iter()
        .map(|&l| (1.0 - l).max(0.0).sqrt())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn correction_for(
    model_lo: &SubspaceModel,
    model_hi: &SubspaceModel,
    kernel: KernelKind,
    cache: &CorrectionCache,
) -> Result<Arc<CorrectionModel>> {
    let (lo, hi) = (model_lo.geometry, model_hi.geometry);
    if !lo.fits_within(&hi) {
        return Err(Error::Upsampling {
            src: hi.to_string(),
            dst: lo.to_string(),
        });
    }
    cache.get(hi, lo, kernel)
}

/// Matches a low-resolution model against a high-resolution reference.
pub fn match_models(
    model_lo: &SubspaceModel,
    model_hi: &SubspaceModel,
    kernel: KernelKind,
    method: MatchMethod,
    cache: &CorrectionCache,
    opts: MatchOptions,
) -> Result<MatchResult> {
    let cm = correction_for(model_lo, model_hi, kernel, cache)?;
    match method {
        MatchMethod::Naive => naive_match(&model_lo.basis, &model_hi.basis, &cm),
        MatchMethod::Constrained => {
            constrained_reconstruct(&model_lo.basis, &model_hi.basis, &cm, opts)
        }
    }
}

/// Similarity score only. The constrained path uses
/// [`constrained_correlations`], which avoids materializing `B_c`.
pub fn match_similarity(
    model_lo: &SubspaceModel,
    model_hi: &SubspaceModel,
    kernel: KernelKind,
    method: MatchMethod,
    cache: &CorrectionCache,
    opts: MatchOptions,
) -> Result<f64> {
    let cm = correction_for(model_lo, model_hi, kernel, cache)?;
    // With no ambiguity both methods coincide; share one code path so the
    // scores agree bit for bit.
    let method = if cm.low_dim() == cm.high_dim() {
        MatchMethod::Naive
    } else {
        method
    };
    match method {
        MatchMethod::Naive => {
            check_high(&model_hi.basis, &cm)?;
            let recon = naive_reconstruct(&model_lo.basis, &cm)?;
            Ok(align_cross_gram(cross_gram(model_hi.basis.columns(), recon.columns())).top())
        }
        MatchMethod::Constrained => {
            Ok(
                constrained_correlations(&model_lo.basis, &model_hi.basis, &cm, opts)?
                    .first()
                    .copied()
                    .unwrap_or(0.0),
            )
        }
    }
}

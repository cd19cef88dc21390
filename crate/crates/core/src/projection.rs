//! Linear downsampling operators.
//!
//! A [`ProjectionMatrix`] maps a row-major rasterized image of one geometry
//! onto a smaller geometry of the same aspect ratio. It is built separably:
//! one 1-D resampling matrix per axis, combined by a Kronecker product.
//!
//! Sampling grid: output pixel center `j` maps to the source coordinate
//! `(j + 0.5) * src_len / dst_len - 0.5`. Source taps falling outside the
//! image are clamped to the nearest edge pixel and every row is renormalized
//! to sum to one.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter of the cubic convolution kernel.
pub const BICUBIC_A: f64 = -0.5;

const ASPECT_TOLERANCE: f64 = 1e-9;

/// Height and width of a greyscale image, in pixels. Serialized as `WxH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
}

impl ImageGeometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGeometry(format!(
                "zero-sized geometry {width}x{height}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// Number of pixels, the dimension of the image space.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn aspect(&self) -> f64 {
        self.height as f64 / self.width as f64
    }

    pub fn same_aspect(&self, other: &ImageGeometry) -> bool {
        (self.aspect() - other.aspect()).abs()
            <= ASPECT_TOLERANCE * self.aspect().max(other.aspect())
    }

    /// True when `self` fits inside `other` on both axes.
    pub fn fits_within(&self, other: &ImageGeometry) -> bool {
        self.height <= other.height && self.width <= other.width
    }
}

/// Formats as `WxH`.
impl fmt::Display for ImageGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Parses `WxH`.
impl FromStr for ImageGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidGeometry(format!("expected WxH, got {s:?}"));
        let (w, h) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let width = w.trim().parse::<usize>().map_err(|_| bad())?;
        let height = h.trim().parse::<usize>().map_err(|_| bad())?;
        ImageGeometry::new(height, width)
    }
}

impl From<ImageGeometry> for String {
    fn from(g: ImageGeometry) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for ImageGeometry {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Interpolation model used to build the downsampling operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Bilinear,
    Bicubic,
}

impl KernelKind {
    pub const ALL: [KernelKind; 2] = [KernelKind::Bilinear, KernelKind::Bicubic];

    /// Half-width of the kernel support.
    pub fn support(&self) -> f64 {
        match self {
            KernelKind::Bilinear => 1.0,
            KernelKind::Bicubic => 2.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Bilinear => "bilinear",
            KernelKind::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bilinear" => Ok(KernelKind::Bilinear),
            "bicubic" => Ok(KernelKind::Bicubic),
            other => Err(Error::InvalidParameter(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Interpolation weight of `kernel` at signed distance `offset`.
pub fn kernel_weight(kernel: KernelKind, offset: f64) -> f64 {
    let x = offset.abs();
    match kernel {
        KernelKind::Bilinear => (1.0 - x).max(0.0),
        KernelKind::Bicubic => {
            let a = BICUBIC_A;
            if x <= 1.0 {
                ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
            } else if x < 2.0 {
                ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
            } else {
                0.0
            }
        }
    }
}

/// 1-D resampling matrix of shape `dst_len x src_len`.
pub fn resample_matrix_1d(src_len: usize, dst_len: usize, kernel: KernelKind) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dst_len, src_len);
    if src_len == dst_len {
        m.fill_with_identity();
        return m;
    }
    let scale = src_len as f64 / dst_len as f64;
    let support = kernel.support() as isize;
    let last = src_len as isize - 1;
    for j in 0..dst_len {
        let center = (j as f64 + 0.5) * scale - 0.5;
        let base = center.floor() as isize;
        for i in (base - support + 1)..=(base + support) {
            let w = kernel_weight(kernel, center - i as f64);
            if w != 0.0 {
                let col = i.clamp(0, last) as usize;
                m[(j, col)] += w;
            }
        }
        let sum: f64 = m.row(j).sum();
        m.row_mut(j).unscale_mut(sum);
    }
    m
}

/// Dense `d_l x d_h` downsampling operator together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: DMatrix<f64>,
    src: ImageGeometry,
    dst: ImageGeometry,
    kernel: KernelKind,
    /// Per-axis factors `(rows, cols)` with `entries = rows ⊗ cols`.
    factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ProjectionMatrix {
    /// Builds the operator taking `src` images down to `dst`.
    pub fn build(src: ImageGeometry, dst: ImageGeometry, kernel: KernelKind) -> Result<Self> {
        for g in [src, dst] {
            if g.pixels() == 0 {
                return Err(Error::InvalidGeometry(format!("zero-sized geometry {g}")));
            }
        }
        if !dst.fits_within(&src) {
            return Err(Error::Upsampling {
                src: src.to_string(),
                dst: dst.to_string(),
            });
        }
        if !src.same_aspect(&dst) {
            return Err(Error::AspectMismatch {
                src: src.to_string(),
                dst: dst.to_string(),
            });
        }
        let rows = resample_matrix_1d(src.height, dst.height, kernel);
        let cols = resample_matrix_1d(src.width, dst.width, kernel);
        Ok(Self {
            entries: rows.kronecker(&cols),
            src,
            dst,
            kernel,
            factors: Some((rows, cols)),
        })
    }

    /// Wraps an explicit matrix. Used for hand-built operators in tests and
    /// tooling; the geometries must agree with the shape.
    pub fn from_matrix(
        entries: DMatrix<f64>,
        src: ImageGeometry,
        dst: ImageGeometry,
        kernel: KernelKind,
    ) -> Result<Self> {
        if entries.nrows() != dst.pixels() {
            return Err(Error::DimensionMismatch {
                expected: dst.pixels(),
                actual: entries.nrows(),
                context: "projection rows",
            });
        }
        if entries.ncols() != src.pixels() {
            return Err(Error::DimensionMismatch {
                expected: src.pixels(),
                actual: entries.ncols(),
                context: "projection columns",
            });
        }
        Ok(Self {
            entries,
            src,
            dst,
            kernel,
            factors: None,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// The per-axis resampling matrices when the operator is separable.
    pub fn separable_factors(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        self.factors.as_ref().map(|(r, c)| (r, c))
    }

    pub fn src(&self) -> ImageGeometry {
        self.src
    }

    pub fn dst(&self) -> ImageGeometry {
        self.dst
    }

    pub fn kernel(&self) -> KernelKind {
        self.kernel
    }

    /// High-resolution dimension `d_h`.
    pub fn high_dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Low-resolution dimension `d_l`.
    pub fn low_dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn apply(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.high_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.high_dim(),
                actual: image.len(),
                context: "image length",
            });
        }
        let v = DVector::from_column_slice(image);
        Ok((&self.entries * v).as_slice().to_vec())
    }

    /// Applies the operator to every column of `images` (`d_h x n`).
    pub fn apply_columns(&self, images: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if images.nrows() != self.high_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.high_dim(),
                actual: images.nrows(),
                context: "image length",
            });
        }
        Ok(&self.entries * images)
    }
}

/// Convenience wrapper for [`ProjectionMatrix::build`].
pub fn build_projection(
    src: ImageGeometry,
    dst: ImageGeometry,
    kernel: KernelKind,
) -> Result<ProjectionMatrix> {
    ProjectionMatrix::build(src, dst, kernel)
}

/// Downsamples a single rasterized image.
pub fn apply_downsample(p: &ProjectionMatrix, image: &[f64]) -> Result<Vec<f64>> {
    p.apply(image)
}

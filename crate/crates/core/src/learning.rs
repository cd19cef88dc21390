//! Mean + orthonormal-basis subspace models estimated from image sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, OrthonormalBasis};
use crate::projection::{ImageGeometry, ProjectionMatrix};

/// Relative gap below which the `D`-th and `(D+1)`-th singular values are
/// considered tied.
const SPECTRAL_TIE: f64 = 1e-12;

/// A set of rasterized greyscale images of one class under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub geometry: ImageGeometry,
    /// One column per sample, row-major pixel order.
    samples: DMatrix<f64>,
    pub class_label: String,
    pub condition_label: String,
}

impl ImageSet {
    pub fn new(
        geometry: ImageGeometry,
        samples: DMatrix<f64>,
        class_label: impl Into<String>,
        condition_label: impl Into<String>,
    ) -> Result<Self> {
        let class_label = class_label.into();
        let condition_label = condition_label.into();
        if samples.nrows() != geometry.pixels() {
            return Err(Error::DimensionMismatch {
                expected: geometry.pixels(),
                actual: samples.nrows(),
                context: "sample length",
            });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "samples of {class_label:?}/{condition_label:?}"
            )));
        }
        if samples.ncols() < 2 {
            return Err(Error::TooFewSamples {
                required: 2,
                actual: samples.ncols(),
            });
        }
        Ok(Self {
            geometry,
            samples,
            class_label,
            condition_label,
        })
    }

    /// Builds a set from individual sample vectors.
    pub fn from_vectors(
        geometry: ImageGeometry,
        vectors: &[Vec<f64>],
        class_label: impl Into<String>,
        condition_label: impl Into<String>,
    ) -> Result<Self> {
        let d = geometry.pixels();
        if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: bad.len(),
                context: "sample length",
            });
        }
        let columns: Vec<DVector<f64>> = vectors
            .iter()
            .map(|v| DVector::from_column_slice(v))
            .collect();
        let samples = if columns.is_empty() {
            DMatrix::zeros(d, 0)
        } else {
            DMatrix::from_columns(&columns)
        };
        Self::new(geometry, samples, class_label, condition_label)
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample(&self, i: usize) -> Vec<f64> {
        self.samples.column(i).iter().copied().collect()
    }

    /// Downsamples every sample with `p`; labels are kept.
    pub fn downsample(&self, p: &ProjectionMatrix) -> Result<ImageSet> {
        if p.src() != self.geometry {
            return Err(Error::InvalidGeometry(format!(
                "projection expects {} images, set holds {}",
                p.src(),
                self.geometry
            )));
        }
        Ok(ImageSet {
            geometry: p.dst(),
            samples: p.apply_columns(&self.samples)?,
            class_label: self.class_label.clone(),
            condition_label: self.condition_label.clone(),
        })
    }

    pub(crate) fn with_samples(&self, samples: DMatrix<f64>) -> ImageSet {
        debug_assert_eq!(samples.shape(), self.samples.shape());
        ImageSet {
            samples,
            ..self.clone()
        }
    }
}

/// Linear subspace model of one image set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceModel {
    pub geometry: ImageGeometry,
    pub mean: Vec<f64>,
    pub basis: OrthonormalBasis,
    /// Fraction of the total sample variance captured by the basis.
    pub energy_captured: f64,
}

impl SubspaceModel {
    pub fn new(
        geometry: ImageGeometry,
        mean: Vec<f64>,
        basis: OrthonormalBasis,
        energy_captured: f64,
    ) -> Result<Self> {
        let d = geometry.pixels();
        if mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: mean.len(),
                context: "model mean",
            });
        }
        if basis.ambient_dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: basis.ambient_dim(),
                context: "model basis",
            });
        }
        Ok(Self {
            geometry,
            mean,
            basis,
            energy_captured,
        })
    }

    /// Subspace dimension `D`.
    pub fn dim(&self) -> usize {
        self.basis.rank()
    }
}

struct CenteredSpectrum {
    mean: DVector<f64>,
    /// Left singular vectors of the scaled, centered data.
    directions: DMatrix<f64>,
    /// Singular values, nonincreasing. Their squares are covariance eigenvalues.
    values: Vec<f64>,
}

fn centered_spectrum(set: &ImageSet) -> Result<CenteredSpectrum> {
    let n = set.len();
    if n < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: n,
        });
    }
    let x = set.samples();
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    centered.unscale_mut(((n - 1) as f64).sqrt());
    let svd = thin_svd(&centered)?;
    let values = svd.values;
    if values.iter().all(|&s| s == 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(CenteredSpectrum {
        mean,
        directions: svd.u,
        values,
    })
}

fn energy_fraction(values: &[f64], dim: usize) -> f64 {
    let total: f64 = values.iter().map(|s| s * s).sum();
    let top: f64 = values.iter().take(dim).map(|s| s * s).sum();
    top / total
}

/// Largest admissible subspace dimension for a set.
pub fn max_dimension(set: &ImageSet) -> usize {
    (set.len().saturating_sub(1)).min(set.geometry.pixels())
}

/// Estimates the mean and the top-`dim` principal directions of the sample
/// covariance, from the thin SVD of the centered data scaled by `1/sqrt(N-1)`.
pub fn estimate_subspace(set: &ImageSet, dim: usize) -> Result<SubspaceModel> {
    if set.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: set.len(),
        });
    }
    let max = max_dimension(set);
    if dim == 0 || dim > max {
        return Err(Error::DimensionTooLarge {
            requested: dim,
            max,
        });
    }
    let spec = centered_spectrum(set)?;
    if let (Some(&last), Some(&next)) = (spec.values.get(dim - 1), spec.values.get(dim)) {
        if (last - next).abs() <= SPECTRAL_TIE * spec.values[0] {
            log::warn!(
                "class {:?}/{:?}: singular values {dim} and {} are tied; the {dim}-dimensional span is not unique",
                set.class_label,
                set.condition_label,
                dim + 1
            );
        }
    }
    let basis = OrthonormalBasis::new_unchecked(spec.directions.columns(0, dim).into_owned());
    Ok(SubspaceModel {
        geometry: set.geometry,
        mean: spec.mean.as_slice().to_vec(),
        basis,
        energy_captured: energy_fraction(&spec.values, dim),
    })
}

/// Smallest dimension whose captured energy reaches `fraction`.
pub fn choose_dimension(set: &ImageSet, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "energy fraction must be in (0, 1], got {fraction}"
        )));
    }
    let spec = centered_spectrum(set)?;
    let max = max_dimension(set);
    let total: f64 = spec.values.iter().map(|s| s * s).sum();
    let target = fraction * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, s) in spec.values.iter().take(max).enumerate() {
        acc += s * s;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_principal_angle;

    fn geo(h: usize, w: usize) -> ImageGeometry {
        ImageGeometry::new(h, w).unwrap()
    }

    #[test]
    fn axis_aligned_variance() {
        let set = ImageSet::from_vectors(
            geo(1, 2),
            &[
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![2.0, 0.0],
                vec![-2.0, 0.0],
            ],
            "a",
            "0",
        )
        .unwrap();
        let m = estimate_subspace(&set, 1).unwrap();
        assert_eq!(m.mean, vec![0.0, 0.0]);
        assert!((m.basis.columns()[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((m.energy_captured - 1.0).abs() < 1e-14);
    }

    #[test]
    fn full_rank_capture() {
        let vectors: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..12).map(|j| ((i * 7 + j * 3) % 11) as f64).collect())
            .collect();
        let set = ImageSet::from_vectors(geo(3, 4), &vectors, "a", "0").unwrap();
        let m = estimate_subspace(&set, 4).unwrap();
        assert!((m.energy_captured - 1.0).abs() < 1e-10);
        assert_eq!(choose_dimension(&set, 1.0).unwrap(), 4);
    }

    #[test]
    fn rejects_bad_requests() {
        let set = ImageSet::from_vectors(
            geo(1, 3),
            &[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 1.0]],
            "a",
            "0",
        )
        .unwrap();
        assert!(matches!(
            estimate_subspace(&set, 2),
            Err(Error::DimensionTooLarge { .. })
        ));
        let flat = ImageSet::from_vectors(
            geo(1, 3),
            &[vec![5.0; 3], vec![5.0; 3], vec![5.0; 3]],
            "a",
            "0",
        )
        .unwrap();
        assert!(matches!(
            estimate_subspace(&flat, 1),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            choose_dimension(&flat, 0.5),
            Err(Error::ZeroVariance)
        ));
        assert!(ImageSet::from_vectors(geo(1, 3), &[vec![1.0; 3]], "a", "0").is_err());
        assert!(choose_dimension(&set, 0.0).is_err());
        assert!(choose_dimension(&set, 1.5).is_err());
    }

    #[test]
    fn isotropic_energy_steps() {
        let mut vectors = Vec::new();
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut v = vec![0.0; 3];
                v[axis] = sign;
                vectors.push(v);
            }
        }
        let set = ImageSet::from_vectors(geo(1, 3), &vectors, "iso", "0").unwrap();
        assert_eq!(choose_dimension(&set, 0.34).unwrap(), 2);
        assert_eq!(choose_dimension(&set, 0.33).unwrap(), 1);
        assert_eq!(choose_dimension(&set, 1.0).unwrap(), 3);
    }

    #[test]
    fn mean_shift_leaves_span() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // Column j scaled by (j + 1) so the spectrum is well separated.
        let vectors: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                (0..9)
                    .map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64)
                    .collect()
            })
            .collect();
        let shifted: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                v.iter()
                    .enumerate()
                    .map(|(j, x)| x + 3.0 * j as f64 - 7.0)
                    .collect()
            })
            .collect();
        let a = estimate_subspace(
            &ImageSet::from_vectors(geo(3, 3), &vectors, "a", "0").unwrap(),
            3,
        )
        .unwrap();
        let b = estimate_subspace(
            &ImageSet::from_vectors(geo(3, 3), &shifted, "a", "0").unwrap(),
            3,
        )
        .unwrap();
        for j in 0..9 {
            assert!((b.mean[j] - a.mean[j] - (3.0 * j as f64 - 7.0)).abs() < 1e-12);
        }
        assert!(max_principal_angle(a.basis.columns(), b.basis.columns()).unwrap() < 1e-8);
    }
}

//! Experimental protocol: similarity matrices, class separation, nearest-class
//! assignment, synthetic data, and scale / noise sweeps.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{estimate_subspace, ImageSet, SubspaceModel};
use crate::matching::{match_similarity, CorrectionCache, MatchMethod, MatchOptions};
use crate::projection::{ImageGeometry, KernelKind, ProjectionMatrix};

/// Diagonal means closer to 1 than this make the separation infinite.
pub const PERFECT_DIAGONAL_TOL: f64 = 1e-12;

/// A subspace model tagged with the set it was learned from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledModel {
    pub class_label: String,
    pub condition_label: String,
    pub model: SubspaceModel,
}

impl LabeledModel {
    pub fn learn(set: &ImageSet, dim: usize) -> Result<Self> {
        Ok(Self {
            class_label: set.class_label.clone(),
            condition_label: set.condition_label.clone(),
            model: estimate_subspace(set, dim)?,
        })
    }
}

/// `values[(i, j)]` is the similarity of probe `j` to gallery model `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: DMatrix<f64>,
    pub gallery_labels: Vec<String>,
    pub probe_labels: Vec<String>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Mean diagonal minus mean off-diagonal similarity.
    pub fn diagonal_dominance(&self) -> f64 {
        let m = self.size();
        let diag: f64 = (0..m).map(|i| self.values[(i, i)]).sum::<f64>() / m as f64;
        let off: f64 = (self.values.sum() - diag * m as f64) / (m * (m - 1)).max(1) as f64;
        diag - off
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {jobs} worker threads: {e}")))
}

/// Similarity of every probe against every gallery model. Probes are
/// reordered to follow the gallery's class order, so the diagonal holds
/// same-class pairs.
pub fn similarity_matrix(
    gallery: &[LabeledModel],
    probes: &[LabeledModel],
    kernel: KernelKind,
    method: MatchMethod,
    cache: &CorrectionCache,
    opts: MatchOptions,
) -> Result<SimilarityMatrix> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::InvalidParameter(
            "empty gallery or probe list".into(),
        ));
    }
    let mut by_label: BTreeMap<&str, &LabeledModel> = BTreeMap::new();
    for p in probes {
        if by_label.insert(p.class_label.as_str(), p).is_some() {
            return Err(Error::LabelMismatch(format!(
                "probe class {:?} appears more than once",
                p.class_label
            )));
        }
    }
    let gallery_set: BTreeSet<&str> = gallery.iter().map(|g| g.class_label.as_str()).collect();
    if gallery_set.len() != gallery.len() {
        return Err(Error::LabelMismatch(
            "gallery classes are not unique".into(),
        ));
    }
    let probe_set: BTreeSet<&str> = by_label.keys().copied().collect();
    if gallery_set != probe_set {
        return Err(Error::LabelMismatch(format!(
            "gallery classes {gallery_set:?} differ from probe classes {probe_set:?}"
        )));
    }
    let ordered: Vec<&LabeledModel> = gallery
        .iter()
        .map(|g| by_label[g.class_label.as_str()])
        .collect();

    let m = gallery.len();
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            match_similarity(
                &ordered[j].model,
                &gallery[i].model,
                kernel,
                method,
                cache,
                opts,
            )
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityMatrix {
        values: DMatrix::from_row_slice(m, m, &scores),
        gallery_labels: gallery.iter().map(|g| g.class_label.clone()).collect(),
        probe_labels: ordered.iter().map(|p| p.class_label.clone()).collect(),
    })
}

/// Mean mismatch confidences and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// `1 - mean(diagonal)`.
    pub within: f64,
    /// `1 - mean(off-diagonal)`.
    pub between: f64,
    /// `between / within`; `+inf` when the diagonal is perfect.
    pub mu: f64,
}

impl Separation {
    pub fn is_infinite(&self) -> bool {
        self.mu.is_infinite()
    }
}

pub fn class_separation(sm: &SimilarityMatrix) -> Result<Separation> {
    let m = sm.size();
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "class separation needs at least 2 classes, got {m}"
        )));
    }
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                diag += sm.values[(i, j)];
            } else {
                off += sm.values[(i, j)];
            }
        }
    }
    let within = 1.0 - diag / m as f64;
    let between = 1.0 - off / (m * (m - 1)) as f64;
    let mu = if within <= PERFECT_DIAGONAL_TOL {
        log::warn!("within-class mismatch {within:e} is zero; separation reported as infinite");
        f64::INFINITY
    } else {
        between / within
    };
    Ok(Separation {
        within,
        between,
        mu,
    })
}

/// Ratio of two separations, with `inf / inf = 1`.
pub fn separation_ratio(num: f64, den: f64) -> f64 {
    if num.is_infinite() && den.is_infinite() {
        1.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class_label: String,
    pub gallery_index: usize,
    pub similarity: f64,
    /// More than one gallery model reached the top similarity.
    pub tie: bool,
}

/// Assigns the probe to the gallery class of highest similarity; ties go to
/// the lowest gallery index.
pub fn classify(
    probe: &SubspaceModel,
    gallery: &[LabeledModel],
    kernel: KernelKind,
    method: MatchMethod,
    cache: &CorrectionCache,
    opts: MatchOptions,
) -> Result<Classification> {
    if gallery.is_empty() {
        return Err(Error::InvalidParameter("empty gallery".into()));
    }
    let scores: Vec<f64> = gallery
        .iter()
        .map(|g| match_similarity(probe, &g.model, kernel, method, cache, opts))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let tie = scores.iter().filter(|&&s| s == scores[best]).count() > 1;
    if tie {
        log::warn!("classification tie at similarity {}", scores[best]);
    }
    Ok(Classification {
        class_label: gallery[best].class_label.clone(),
        gallery_index: best,
        similarity: scores[best],
        tie,
    })
}

/// Adds independent zero-mean Gaussian noise of standard deviation `sigma`
/// to every pixel. Values are not clipped.
pub fn add_gaussian_noise(set: &ImageSet, sigma: f64, seed: u64) -> Result<ImageSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be a finite value >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(set.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = set.samples().clone();
    for v in samples.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(set.with_samples(samples))
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameters of the planted appearance model used for synthetic classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub geometry: ImageGeometry,
    pub intrinsic_dim: usize,
    /// Number of acquisition conditions per class.
    pub conditions: usize,
    /// Highest cosine frequency index used in basis images.
    pub max_frequency: usize,
    /// Relative magnitude of the smooth per-condition basis distortion.
    pub condition_strength: f64,
    /// Relative magnitude of the fine-scale (pixel-alternating) per-condition
    /// distortion, the part low-resolution sensors average away.
    pub texture_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(
        classes: usize,
        samples: usize,
        geometry: ImageGeometry,
        intrinsic_dim: usize,
        seed: u64,
    ) -> Self {
        Self {
            classes,
            samples,
            geometry,
            intrinsic_dim,
            conditions: 2,
            max_frequency: 6,
            condition_strength: 0.2,
            texture_strength: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.intrinsic_dim == 0 {
            return Err(Error::InvalidParameter(
                "intrinsic dimension must be >= 1".into(),
            ));
        }
        if self.samples < self.intrinsic_dim + 2 {
            return Err(Error::InvalidParameter(format!(
                "need N >= intrinsic_dim + 2 samples ({} < {} + 2)",
                self.samples, self.intrinsic_dim
            )));
        }
        if self.conditions == 0 {
            return Err(Error::InvalidParameter(
                "need at least one condition".into(),
            ));
        }
        if self.intrinsic_dim >= self.geometry.pixels() {
            return Err(Error::InvalidParameter(
                "intrinsic dimension must be below the pixel count".into(),
            ));
        }
        if !(self.condition_strength >= 0.0) || !(self.texture_strength >= 0.0) {
            return Err(Error::InvalidParameter(
                "distortion strengths must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Random smooth image: cosine modes up to `max_freq` with amplitudes
/// falling off as `1 / (1 + |f|)`, normalized to unit RMS.
fn smooth_image(rng: &mut ChaCha8Rng, geo: ImageGeometry, max_freq: usize) -> Vec<f64> {
    let (h, w) = (geo.height, geo.width);
    let fy_max = max_freq.min(h.saturating_sub(1));
    let fx_max = max_freq.min(w.saturating_sub(1));
    let mut img = vec![0.0; h * w];
    let cos_y: Vec<Vec<f64>> = (0..=fy_max)
        .map(|u| {
            (0..h)
                .map(|y| (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / h as f64).cos())
                .collect()
        })
        .collect();
    let cos_x: Vec<Vec<f64>> = (0..=fx_max)
        .map(|v| {
            (0..w)
                .map(|x| (std::f64::consts::PI * v as f64 * (x as f64 + 0.5) / w as f64).cos())
                .collect()
        })
        .collect();
    for u in 0..=fy_max {
        for v in 0..=fx_max {
            if u == 0 && v == 0 {
                continue;
            }
            let radius = ((u * u + v * v) as f64).sqrt();
            let amp: f64 = StandardNormal.sample(rng);
            let amp = amp / (1.0 + radius);
            for y in 0..h {
                let row = amp * cos_y[u][y];
                for x in 0..w {
                    img[y * w + x] += row * cos_x[v][x];
                }
            }
        }
    }
    let rms = (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt();
    if rms > 0.0 {
        img.iter_mut().for_each(|v| *v /= rms);
    }
    img
}

/// Smooth envelope modulated by a pixel checkerboard: detail at the finest
/// scale the high-resolution grid can hold.
fn texture_image(rng: &mut ChaCha8Rng, geo: ImageGeometry, max_freq: usize) -> Vec<f64> {
    let mut img = smooth_image(rng, geo, max_freq);
    for (i, v) in img.iter_mut().enumerate() {
        let (y, x) = (i / geo.width, i % geo.width);
        if (x + y) % 2 == 1 {
            *v = -*v;
        }
    }
    img
}

/// Generates `classes x conditions` image sets from a planted
/// `intrinsic_dim`-dimensional appearance model per class.
///
/// Each class has a smooth mean image and smooth basis images; every
/// condition distorts the basis by adding a smooth image scaled by
/// `condition_strength` and a fine-scale texture scaled by
/// `texture_strength`. Each class is finally mapped affinely onto
/// `[0, 255]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<ImageSet>> {
    spec.validate()?;
    let geo = spec.geometry;
    let d = geo.pixels();
    let k = spec.intrinsic_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.conditions);
    let label_width = (spec.classes - 1).to_string().len();

    for c in 0..spec.classes {
        let mean = smooth_image(&mut rng, geo, spec.max_frequency / 2);
        let basis: Vec<Vec<f64>> = (0..k)
            .map(|_| smooth_image(&mut rng, geo, spec.max_frequency))
            .collect();
        let scales: Vec<f64> = (0..k).map(|i| 1.0 / (1.0 + 0.25 * i as f64)).collect();

        let mut sets = Vec::with_capacity(spec.conditions);
        for _ in 0..spec.conditions {
            let distorted: Vec<Vec<f64>> = basis
                .iter()
                .map(|b| {
                    let e = smooth_image(&mut rng, geo, spec.max_frequency);
                    let t = texture_image(&mut rng, geo, spec.max_frequency);
                    b.iter()
                        .zip(&e)
                        .zip(&t)
                        .map(|((x, y), z)| {
                            x + spec.condition_strength * y + spec.texture_strength * z
                        })
                        .collect()
                })
                .collect();
            let mut samples = DMatrix::zeros(d, spec.samples);
            for n in 0..spec.samples {
                let mut col = mean.clone();
                for (i, b) in distorted.iter().enumerate() {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let a = a * scales[i];
                    col.iter_mut().zip(b).for_each(|(p, q)| *p += a * q);
                }
                samples.set_column(n, &nalgebra::DVector::from_vec(col));
            }
            sets.push(samples);
        }

        let lo = sets
            .iter()
            .flat_map(|s| s.iter())
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = sets
            .iter()
            .flat_map(|s| s.iter())
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 1.0 };
        for (cond, mut samples) in sets.into_iter().enumerate() {
            samples.apply(|v| *v = (*v - lo) * scale);
            out.push(ImageSet::new(
                geo,
                samples,
                format!("class{c:0label_width$}"),
                format!("cond{cond}"),
            )?);
        }
    }
    Ok(out)
}

/// [`generate_synthetic`] with default condition settings.
pub fn generate_synthetic_classes(
    classes: usize,
    samples: usize,
    geometry: ImageGeometry,
    intrinsic_dim: usize,
    seed: u64,
) -> Result<Vec<ImageSet>> {
    generate_synthetic(&SyntheticSpec::new(
        classes,
        samples,
        geometry,
        intrinsic_dim,
        seed,
    ))
}

/// Configuration shared by scale and noise sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scales: Vec<ImageGeometry>,
    pub kernels: Vec<KernelKind>,
    pub methods: Vec<MatchMethod>,
    pub noise_sigmas: Vec<f64>,
    pub subspace_dim: usize,
    pub seed: u64,
    /// Condition used for the high-resolution gallery; defaults to the first
    /// condition in sorted order.
    #[serde(default)]
    pub gallery_condition: Option<String>,
    /// Condition used for the low-resolution probes; defaults to the second
    /// condition in sorted order, or the gallery condition if there is only one.
    #[serde(default)]
    pub probe_condition: Option<String>,
    #[serde(default)]
    pub allow_degenerate: bool,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.kernels.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidParameter(
                "scales, kernels and methods must be non-empty".into(),
            ));
        }
        if self.noise_sigmas.is_empty() {
            return Err(Error::InvalidParameter(
                "noise sigmas must be non-empty".into(),
            ));
        }
        if let Some(s) = self.noise_sigmas.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::InvalidParameter(format!("negative noise sigma {s}")));
        }
        if self.subspace_dim == 0 {
            return Err(Error::InvalidParameter(
                "subspace dimension must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn options(&self) -> MatchOptions {
        MatchOptions {
            allow_degenerate: self.allow_degenerate,
        }
    }
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub method: MatchMethod,
    pub kernel: KernelKind,
    pub low_geometry: ImageGeometry,
    pub high_geometry: ImageGeometry,
    pub noise_sigma: f64,
    pub seed: u64,
    pub separation: Separation,
}

struct Partition<'a> {
    gallery: Vec<&'a ImageSet>,
    probes: Vec<&'a ImageSet>,
    high: ImageGeometry,
}

fn partition<'a>(cfg: &SweepConfig, data: &'a [ImageSet]) -> Result<Partition<'a>> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty dataset".into()))?;
    let high = first.geometry;
    if let Some(bad) = data.iter().find(|s| s.geometry != high) {
        return Err(Error::InvalidGeometry(format!(
            "dataset mixes geometries {high} and {}",
            bad.geometry
        )));
    }
    let conditions: BTreeSet<&str> = data.iter().map(|s| s.condition_label.as_str()).collect();
    let conds: Vec<&str> = conditions.into_iter().collect();
    let gallery_cond = cfg.gallery_condition.as_deref().unwrap_or(conds[0]);
    let probe_cond = cfg
        .probe_condition
        .as_deref()
        .unwrap_or_else(|| conds.get(1).copied().unwrap_or(gallery_cond));
    let pick = |cond: &str| -> Result<Vec<&'a ImageSet>> {
        let sets: Vec<&ImageSet> = data.iter().filter(|s| s.condition_label == cond).collect();
        if sets.is_empty() {
            return Err(Error::LabelMismatch(format!(
                "no image sets for condition {cond:?}"
            )));
        }
        Ok(sets)
    };
    Ok(Partition {
        gallery: pick(gallery_cond)?,
        probes: pick(probe_cond)?,
        high,
    })
}

fn learn_all(sets: &[ImageSet], dim: usize) -> Result<Vec<LabeledModel>> {
    sets.iter().map(|s| LabeledModel::learn(s, dim)).collect()
}

fn noisy_probes(
    probes: &[&ImageSet],
    p: &ProjectionMatrix,
    sigma: f64,
    seed: u64,
) -> Result<Vec<ImageSet>> {
    probes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let low = s.downsample(p)?;
            let stream = mix_seed(mix_seed(seed, i as u64), sigma.to_bits());
            add_gaussian_noise(&low, sigma, stream)
        })
        .collect()
}

fn run_cells(
    cfg: &SweepConfig,
    data: &[ImageSet],
    sigmas: &[f64],
    jobs: usize,
) -> Result<Vec<SeparationReport>> {
    cfg.validate()?;
    let part = partition(cfg, data)?;
    let gallery_sets: Vec<ImageSet> = part.gallery.iter().map(|s| (*s).clone()).collect();
    let gallery = learn_all(&gallery_sets, cfg.subspace_dim)?;

    let mut scales = cfg.scales.clone();
    scales.sort();
    scales.dedup();
    let mut kernels = cfg.kernels.clone();
    kernels.sort();
    kernels.dedup();
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let mut cells = Vec::new();
    for &scale in &scales {
        for &kernel in &kernels {
            for &sigma in sigmas {
                cells.push((scale, kernel, sigma));
            }
        }
    }

    let run = || -> Result<Vec<Vec<SeparationReport>>> {
        cells
            .par_iter()
            .map(|&(scale, kernel, sigma)| {
                let cache = CorrectionCache::new();
                let cm = cache.get(part.high, scale, kernel)?;
                let low_sets = noisy_probes(&part.probes, cm.projection(), sigma, cfg.seed)?;
                let probes = learn_all(&low_sets, cfg.subspace_dim)?;
                methods
                    .iter()
                    .map(|&method| {
                        let sm = similarity_matrix(
                            &gallery,
                            &probes,
                            kernel,
                            method,
                            &cache,
                            cfg.options(),
                        )?;
                        Ok(SeparationReport {
                            method,
                            kernel,
                            low_geometry: scale,
                            high_geometry: part.high,
                            noise_sigma: sigma,
                            seed: cfg.seed,
                            separation: class_separation(&sm)?,
                        })
                    })
                    .collect()
            })
            .collect()
    };
    let nested = if jobs == 0 {
        run()?
    } else {
        pool(jobs)?.install(run)?
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Separation for every `(scale, kernel, method)` on noise-free data.
/// Reports are ordered by scale, kernel, then method.
pub fn run_scale_sweep(
    cfg: &SweepConfig,
    data: &[ImageSet],
    jobs: usize,
) -> Result<Vec<SeparationReport>> {
    run_cells(cfg, data, &[0.0], jobs)
}

/// Separation for every `(scale, kernel, sigma, method)`, with noise added
/// to the downsampled probe images before their subspaces are learned.
pub fn run_noise_sweep(
    cfg: &SweepConfig,
    data: &[ImageSet],
    jobs: usize,
) -> Result<Vec<SeparationReport>> {
    let mut sigmas = cfg.noise_sigmas.clone();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    run_cells(cfg, data, &sigmas, jobs)
}

/// Improvement of the constrained over the naive method for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub kernel: KernelKind,
    pub low_geometry: ImageGeometry,
    pub high_geometry: ImageGeometry,
    pub noise_sigma: f64,
    pub seed: u64,
    pub mu_naive: f64,
    pub mu_constrained: f64,
    pub ratio: f64,
}

type CellKey = (KernelKind, ImageGeometry, ImageGeometry, u64, u64);

fn cell_key(r: &SeparationReport) -> CellKey {
    (
        r.kernel,
        r.low_geometry,
        r.high_geometry,
        r.noise_sigma.to_bits(),
        r.seed,
    )
}

/// `mu_constrained / mu_naive` for every cell holding both methods, in the
/// order the cells first appear.
pub fn improvement_ratios(reports: &[SeparationReport]) -> Vec<ImprovementRow> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut pairs: BTreeMap<CellKey, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in reports {
        let key = cell_key(r);
        let entry = pairs.entry(key).or_insert_with(|| {
            order.push(key);
            (None, None)
        });
        match r.method {
            MatchMethod::Naive => entry.0 = Some(r.separation.mu),
            MatchMethod::Constrained => entry.1 = Some(r.separation.mu),
        }
    }
    order
        .into_iter()
        .filter_map(|key| {
            let (Some(n), Some(c)) = pairs[&key] else {
                return None;
            };
            Some(ImprovementRow {
                kernel: key.0,
                low_geometry: key.1,
                high_geometry: key.2,
                noise_sigma: f64::from_bits(key.3),
                seed: key.4,
                mu_naive: n,
                mu_constrained: c,
                ratio: separation_ratio(c, n),
            })
        })
        .collect()
}

/// Separation relative to the noise-free baseline of the same cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub method: MatchMethod,
    pub kernel: KernelKind,
    pub low_geometry: ImageGeometry,
    pub high_geometry: ImageGeometry,
    pub noise_sigma: f64,
    pub seed: u64,
    pub mu: f64,
    pub mu_baseline: f64,
    pub ratio_to_baseline: f64,
}

/// Pairs every report with the `sigma = 0` report of the same method,
/// kernel, geometry and seed. Cells without a baseline are skipped.
pub fn noise_relative(reports: &[SeparationReport]) -> Vec<NoiseRow> {
    let baseline: BTreeMap<(MatchMethod, KernelKind, ImageGeometry, ImageGeometry, u64), f64> =
        reports
            .iter()
            .filter(|r| r.noise_sigma == 0.0)
            .map(|r| {
                (
                    (r.method, r.kernel, r.low_geometry, r.high_geometry, r.seed),
                    r.separation.mu,
                )
            })
            .collect();
    reports
        .iter()
        .filter_map(|r| {
            let base =
                *baseline.get(&(r.method, r.kernel, r.low_geometry, r.high_geometry, r.seed))?;
            Some(NoiseRow {
                method: r.method,
                kernel: r.kernel,
                low_geometry: r.low_geometry,
                high_geometry: r.high_geometry,
                noise_sigma: r.noise_sigma,
                seed: r.seed,
                mu: r.separation.mu,
                mu_baseline: base,
                ratio_to_baseline: separation_ratio(r.separation.mu, base),
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

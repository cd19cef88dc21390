//! Dataset manifests, image files, persisted models and report artifacts.
//!
//! # Model file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size      | field                                  |
//! |--------|-----------|----------------------------------------|
//! | 0      | 8         | magic `XSCLMODL`                       |
//! | 8      | 4 (u32)   | format version                         |
//! | 12     | 4 (u32)   | reserved, zero                         |
//! | 16     | 8 (u64)   | image height                           |
//! | 24     | 8 (u64)   | image width                            |
//! | 32     | 8 (u64)   | `d`, pixel count                       |
//! | 40     | 8 (u64)   | `D`, subspace dimension                |
//! | 48     | 8 (f64)   | captured energy fraction               |
//! | 56     | 8·d       | mean                                   |
//! | ...    | 8·d·D     | basis, column-major                    |
//! | ...    | 32        | SHA-256 of all preceding bytes         |
//!
//! Labels and provenance live in a JSON sidecar at `<path>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{
    ImprovementRow, LabeledModel, NoiseRow, SeparationReport, SimilarityMatrix,
};
use crate::learning::{ImageSet, SubspaceModel};
use crate::linalg::OrthonormalBasis;
use crate::matching::MatchResult;
use crate::projection::ImageGeometry;

pub const MODEL_MAGIC: &[u8; 8] = b"XSCLMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
const HEADER_LEN: usize = 56;
const CHECKSUM_LEN: usize = 32;

/// Tolerance on `BᵀB - I` accepted when loading a basis.
const LOAD_ORTHONORMALITY_TOL: f64 = 1e-8;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

// ---------------------------------------------------------------- images

/// Supported on-disk image encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("pgm") | Some("ppm") | Some("pnm") => Ok(ImageFormat::Pgm),
            Some("png") if cfg!(feature = "png") => Ok(ImageFormat::Png),
            _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

/// A decoded greyscale image, row-major, values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreyImage {
    pub geometry: ImageGeometry,
    pub pixels: Vec<f64>,
}

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

struct PnmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmTokens<'a> {
    fn next_token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn next_uint(&mut self) -> Option<usize> {
        std::str::from_utf8(self.next_token()?).ok()?.parse().ok()
    }
}

/// Decodes binary or ASCII PGM (`P5`/`P2`) and PPM (`P6`/`P3`) data. Colour
/// input is converted to luminance; samples are rescaled to `[0, 255]`
/// when the file's maximum value differs from 255.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<GreyImage> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut tok = PnmTokens { bytes, pos: 0 };
    let magic = tok.next_token().ok_or_else(|| bad("empty file"))?;
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P5" => (1, true),
        b"P3" => (3, false),
        b"P6" => (3, true),
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    let width = tok.next_uint().ok_or_else(|| bad("missing width"))?;
    let height = tok.next_uint().ok_or_else(|| bad("missing height"))?;
    let maxval = tok.next_uint().ok_or_else(|| bad("missing maxval"))?;
    if !(1..=65535).contains(&maxval) {
        return Err(bad("maxval out of range"));
    }
    let geometry = ImageGeometry::new(height, width).map_err(|_| bad("zero-sized image"))?;
    let count = width * height * channels;
    let raw: Vec<f64> = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = tok.pos + 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let data = bytes
            .get(start..start + need)
            .ok_or_else(|| bad("raster is truncated"))?;
        if wide {
            data.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect()
        } else {
            data.iter().map(|&b| b as f64).collect()
        }
    } else {
        (0..count)
            .map(|_| {
                tok.next_uint()
                    .map(|v| v as f64)
                    .ok_or_else(|| bad("raster is truncated"))
            })
            .collect::<Result<_>>()?
    };
    if raw.iter().any(|&v| v > maxval as f64) {
        return Err(bad("sample exceeds maxval"));
    }
    let scale = if maxval == 255 {
        1.0
    } else {
        255.0 / maxval as f64
    };
    let pixels = if channels == 1 {
        raw.into_iter().map(|v| v * scale).collect()
    } else {
        raw.chunks_exact(3)
            .map(|c| luminance(c[0], c[1], c[2]) * scale)
            .collect()
    };
    Ok(GreyImage { geometry, pixels })
}

/// Encodes 8-bit binary PGM. Values are rounded and clamped to `[0, 255]`.
pub fn encode_pgm(geometry: ImageGeometry, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", geometry.width, geometry.height).into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    out
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8], path: &Path) -> Result<GreyImage> {
    use image::{ColorType, DynamicImage};
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let geometry = ImageGeometry::new(img.height() as usize, img.width() as usize)
        .map_err(|_| Error::format(path, "zero-sized image"))?;
    let grey = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    let pixels = if grey {
        DynamicImage::to_luma16(&img)
            .pixels()
            .map(|p| p.0[0] as f64 * 255.0 / 65535.0)
            .collect()
    } else {
        img.to_rgb8()
            .pixels()
            .map(|p| luminance(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64))
            .collect()
    };
    Ok(GreyImage { geometry, pixels })
}

#[cfg(feature = "png")]
fn encode_png(geometry: ImageGeometry, pixels: &[f64], path: &Path) -> Result<Vec<u8>> {
    let buf: Vec<u8> = pixels.iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(geometry.width as u32, geometry.height as u32, buf)
        .ok_or_else(|| Error::format(path, "pixel count does not match geometry"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(out.into_inner())
}

pub fn read_image(path: &Path) -> Result<GreyImage> {
    let format = ImageFormat::from_path(path)?;
    let bytes = read_bytes(path)?;
    match format {
        ImageFormat::Pgm => decode_pnm(&bytes, path),
        #[cfg(feature = "png")]
        ImageFormat::Png => decode_png(&bytes, path),
        #[cfg(not(feature = "png"))]
        ImageFormat::Png => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Writes an image in the format implied by the file extension.
pub fn write_image(path: &Path, geometry: ImageGeometry, pixels: &[f64]) -> Result<()> {
    if pixels.len() != geometry.pixels() {
        return Err(Error::DimensionMismatch {
            expected: geometry.pixels(),
            actual: pixels.len(),
            context: "image pixels",
        });
    }
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Pgm => encode_pgm(geometry, pixels),
        #[cfg(feature = "png")]
        ImageFormat::Png => encode_png(geometry, pixels, path)?,
        #[cfg(not(feature = "png"))]
        ImageFormat::Png => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    write_bytes(path, &bytes)
}

// -------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class: String,
    pub condition: String,
    /// Paths relative to the manifest's directory.
    pub images: Vec<PathBuf>,
}

/// A dataset description. Image paths resolve against `root`, the
/// directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub geometry: ImageGeometry,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_bytes(path, text.as_bytes())
    }

    pub fn image_count(&self) -> usize {
        self.entries.iter().map(|e| e.images.len()).sum()
    }
}

/// Loads every image referenced by a manifest and groups them by
/// `(class, condition)` in order of first appearance.
pub fn load_image_sets(manifest_path: &Path) -> Result<Vec<ImageSet>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let mut groups: Vec<((String, String), Vec<PathBuf>)> = Vec::new();
    for e in &manifest.entries {
        let key = (e.class.clone(), e.condition.clone());
        let paths = e.images.iter().map(|p| manifest.root.join(p));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.extend(paths),
            None => groups.push((key, paths.collect())),
        }
    }
    let geometry = manifest.geometry;
    groups
        .into_iter()
        .map(|((class, condition), paths)| {
            let columns: Vec<Vec<f64>> = paths
                .par_iter()
                .map(|p| {
                    let img = read_image(p)?;
                    if img.geometry != geometry {
                        return Err(Error::GeometryMismatch {
                            path: p.clone(),
                            expected: geometry.to_string(),
                            found: img.geometry.to_string(),
                        });
                    }
                    Ok(img.pixels)
                })
                .collect::<Result<_>>()?;
            ImageSet::from_vectors(geometry, &columns, class, condition)
        })
        .collect()
}

/// Writes each set as images under `dir/<class>/<condition>/NNNN.<ext>` plus
/// `dir/manifest.json`. Returns the manifest path.
pub fn write_dataset(sets: &[ImageSet], dir: &Path, format: ImageFormat) -> Result<PathBuf> {
    let geometry = sets
        .first()
        .ok_or_else(|| Error::InvalidParameter("no image sets to write".into()))?
        .geometry;
    let mut entries = Vec::with_capacity(sets.len());
    for set in sets {
        if set.geometry != geometry {
            return Err(Error::InvalidGeometry(
                "image sets differ in geometry".into(),
            ));
        }
        let width = set.len().saturating_sub(1).to_string().len().max(4);
        let images: Vec<PathBuf> = (0..set.len())
            .map(|i| {
                Path::new(&set.class_label)
                    .join(&set.condition_label)
                    .join(format!("{i:0width$}.{}", format.extension()))
            })
            .collect();
        for (i, rel) in images.iter().enumerate() {
            write_image(&dir.join(rel), geometry, &set.sample(i))?;
        }
        entries.push(ManifestEntry {
            class: set.class_label.clone(),
            condition: set.condition_label.clone(),
            images,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        geometry,
        entries,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

// ----------------------------------------------------------------- models

/// Where a model came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the source manifest, if any.
    pub manifest_sha256: Option<String>,
    /// Kernel used to downsample the training images, if any.
    pub kernel: Option<String>,
    /// Resolved creation parameters.
    pub parameters: serde_json::Value,
}

/// A persisted subspace model with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: LabeledModel,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    geometry: ImageGeometry,
    dim: usize,
    class_label: String,
    condition_label: String,
    payload_sha256: String,
    provenance: Provenance,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes the numeric payload of a model in the documented layout.
pub fn encode_model(model: &SubspaceModel) -> Vec<u8> {
    let d = model.geometry.pixels();
    let dim = model.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * d * (dim + 1) + CHECKSUM_LEN);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in [model.geometry.height, model.geometry.width, d, dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&model.energy_captured.to_le_bytes());
    for v in &model.mean {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.basis.columns().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses a model payload produced by [`encode_model`].
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<SubspaceModel> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("bad magic bytes; not a model file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header".into()));
    }
    let version = le_u32(bytes, 8);
    if version != MODEL_FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let height = le_u64(bytes, 16) as usize;
    let width = le_u64(bytes, 24) as usize;
    let d = le_u64(bytes, 32) as usize;
    let dim = le_u64(bytes, 40) as usize;
    let energy = le_f64(bytes, 48);
    let geometry = ImageGeometry::new(height, width).map_err(|e| bad(e.to_string()))?;
    if geometry.pixels() != d {
        return Err(bad(format!(
            "header d = {d} disagrees with geometry {geometry}"
        )));
    }
    let floats = d
        .checked_mul(dim + 1)
        .ok_or_else(|| bad("header sizes overflow".into()))?;
    let expected = HEADER_LEN + 8 * floats + CHECKSUM_LEN;
    if bytes.len() != expected {
        return Err(bad(format!(
            "truncated or oversized file: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - CHECKSUM_LEN];
    if Sha256::digest(body).as_slice() != &bytes[expected - CHECKSUM_LEN..] {
        return Err(bad("checksum mismatch; file is corrupted".into()));
    }
    let mean: Vec<f64> = (0..d).map(|i| le_f64(bytes, HEADER_LEN + 8 * i)).collect();
    let base = HEADER_LEN + 8 * d;
    let basis = DMatrix::from_fn(d, dim, |r, c| le_f64(bytes, base + 8 * (c * d + r)));
    let basis = OrthonormalBasis::from_orthonormal(basis, LOAD_ORTHONORMALITY_TOL)?;
    SubspaceModel::new(geometry, mean, basis, energy)
}

/// Writes the binary model and its JSON sidecar.
pub fn save_model(file: &ModelFile, path: &Path) -> Result<()> {
    let bytes = encode_model(&file.model.model);
    let sidecar = Sidecar {
        format_version: MODEL_FORMAT_VERSION,
        geometry: file.model.model.geometry,
        dim: file.model.model.dim(),
        class_label: file.model.class_label.clone(),
        condition_label: file.model.condition_label.clone(),
        payload_sha256: sha256_hex(&bytes),
        provenance: file.provenance.clone(),
    };
    write_bytes(path, &bytes)?;
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    write_bytes(&sidecar_path(path), text.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = read_bytes(path)?;
    let model = decode_model(&bytes, path)?;
    let side_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&read_bytes(&side_path)?)
        .map_err(|e| Error::format(&side_path, e.to_string()))?;
    if sidecar.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            &side_path,
            format!("unsupported sidecar version {}", sidecar.format_version),
        ));
    }
    if sidecar.payload_sha256 != sha256_hex(&bytes) {
        return Err(Error::format(
            &side_path,
            "sidecar does not describe this model file",
        ));
    }
    Ok(ModelFile {
        model: LabeledModel {
            class_label: sidecar.class_label,
            condition_label: sidecar.condition_label,
            model,
        },
        provenance: sidecar.provenance,
    })
}

/// Loads every `*.model` file in `dir`, sorted by file name.
pub fn load_model_dir(dir: &Path) -> Result<Vec<ModelFile>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == MODEL_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no .{MODEL_EXTENSION} files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_model(p)).collect()
}

pub const MODEL_EXTENSION: &str = "model";

// ------------------------------------------------------------------ modes

/// How mode vectors become images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportOptions {
    /// Add the model mean before rescaling. The mode is first scaled to the
    /// mean's contrast so it stays visible.
    pub add_mean: bool,
    pub format: ImageFormat,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            add_mean: false,
            format: ImageFormat::Pgm,
        }
    }
}

/// Affine map of `values` onto `[0, 255]`; a constant input becomes
/// mid-grey.
pub fn rescale_to_grey(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        return vec![127.5; values.len()];
    }
    values.iter().map(|v| (v - lo) * 255.0 / range).collect()
}

fn with_mean(mode: &[f64], mean: &[f64]) -> Vec<f64> {
    let avg = mean.iter().sum::<f64>() / mean.len() as f64;
    let contrast = mean.iter().map(|v| (v - avg).powi(2)).sum::<f64>().sqrt();
    let norm = mode.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k = if norm > 0.0 { contrast / norm } else { 0.0 };
    mean.iter().zip(mode).map(|(m, v)| m + k * v).collect()
}

/// Writes every mode pair of `result` as `<prefix>_mode<i>_reference` and
/// `<prefix>_mode<i>_reconstructed` images. `mean_hi` is the reference
/// model mean; `mean_lo_reconstructed` is the low-resolution mean mapped to
/// the high-resolution space. Both are used only with `add_mean`.
pub fn export_modes(
    result: &MatchResult,
    mean_hi: Option<&[f64]>,
    mean_lo_reconstructed: Option<&[f64]>,
    geometry: ImageGeometry,
    prefix: &Path,
    opts: ExportOptions,
) -> Result<Vec<PathBuf>> {
    let d = geometry.pixels();
    let check = |v: &[f64], context| {
        if v.len() == d {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: d,
                actual: v.len(),
                context,
            })
        }
    };
    if let Some(m) = mean_hi {
        check(m, "reference mean")?;
    }
    if let Some(m) = mean_lo_reconstructed {
        check(m, "reconstructed mean")?;
    }
    let stem = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "modes".into());
    let dir = prefix.parent().unwrap_or(Path::new(""));
    let width = result.mode_pairs.len().saturating_sub(1).to_string().len();
    let mut written = Vec::with_capacity(2 * result.mode_pairs.len());
    for (i, pair) in result.mode_pairs.iter().enumerate() {
        for (name, mode, mean) in [
            ("reference", &pair.reference, mean_hi),
            ("reconstructed", &pair.reconstructed, mean_lo_reconstructed),
        ] {
            check(mode, "mode vector")?;
            let values = match (opts.add_mean, mean) {
                (true, Some(m)) => with_mean(mode, m),
                _ => mode.clone(),
            };
            let path = dir.join(format!(
                "{stem}_mode{i:0width$}_{name}.{}",
                opts.format.extension()
            ));
            write_image(&path, geometry, &rescale_to_grey(&values))?;
            written.push(path);
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------- reports

/// Formats `x` with `digits` significant digits in the style of C's `%g`:
/// fixed notation for moderate exponents, scientific otherwise, trailing
/// zeros removed. Infinities print as `inf` / `-inf`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const SIG: usize = 12;

fn sig(x: f64) -> String {
    format_sig(x, SIG)
}

/// `x` rounded to the report precision, as JSON; non-finite becomes null.
fn json_num(x: f64) -> serde_json::Value {
    if x.is_finite() {
        let rounded: f64 = sig(x).parse().expect("formatted float parses");
        serde_json::json!(rounded)
    } else {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidParameter(format!(
                "unknown report format {s:?} (expected csv or json)"
            ))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "method",
    "kernel",
    "low_geometry",
    "high_geometry",
    "noise_sigma",
    "e_w",
    "e_b",
    "mu",
    "seed",
];

fn csv_bytes<I>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidParameter(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidParameter(format!("csv encoding failed: {e}")))
}

/// Renders separation reports as CSV.
pub fn reports_to_csv(reports: &[SeparationReport]) -> Result<Vec<u8>> {
    csv_bytes(
        &REPORT_COLUMNS,
        reports.iter().map(|r| {
            vec![
                r.method.to_string(),
                r.kernel.to_string(),
                r.low_geometry.to_string(),
                r.high_geometry.to_string(),
                sig(r.noise_sigma),
                sig(r.separation.within),
                sig(r.separation.between),
                sig(r.separation.mu),
                r.seed.to_string(),
            ]
        }),
    )
}

/// Renders separation reports as JSON. An infinite `mu` is written as
/// `null` with `mu_infinite: true`.
pub fn reports_to_json(
    reports: &[SeparationReport],
    provenance: Option<&serde_json::Value>,
) -> Result<Vec<u8>> {
    let rows: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "method": r.method.as_str(),
                "kernel": r.kernel.as_str(),
                "low_geometry": r.low_geometry.to_string(),
                "high_geometry": r.high_geometry.to_string(),
                "noise_sigma": json_num(r.noise_sigma),
                "e_w": json_num(r.separation.within),
                "e_b": json_num(r.separation.between),
                "mu": json_num(r.separation.mu),
                "mu_infinite": r.separation.is_infinite(),
                "seed": r.seed,
            })
        })
        .collect();
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), REPORT_SCHEMA_VERSION.into());
    if let Some(p) = provenance {
        doc.insert("provenance".into(), p.clone());
    }
    doc.insert("reports".into(), rows.into());
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn write_report(
    reports: &[SeparationReport],
    format: ReportFormat,
    path: &Path,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidParameter("no reports to write".into()));
    }
    let bytes = match format {
        ReportFormat::Csv => reports_to_csv(reports)?,
        ReportFormat::Json => reports_to_json(reports, provenance)?,
    };
    write_bytes(path, &bytes)
}

/// Gallery rows by probe columns, labelled.
pub fn write_similarity_matrix(sm: &SimilarityMatrix, path: &Path) -> Result<()> {
    let mut header = vec!["gallery"];
    header.extend(sm.probe_labels.iter().map(String::as_str));
    let rows = (0..sm.values.nrows()).map(|i| {
        let mut row = vec![sm.gallery_labels[i].clone()];
        row.extend((0..sm.values.ncols()).map(|j| sig(sm.values[(i, j)])));
        row
    });
    write_bytes(path, &csv_bytes(&header, rows)?)
}

pub fn write_improvements(rows: &[ImprovementRow], path: &Path) -> Result<()> {
    let header = [
        "kernel",
        "low_geometry",
        "high_geometry",
        "noise_sigma",
        "seed",
        "mu_naive",
        "mu_constrained",
        "ratio",
    ];
    let rows = rows.iter().map(|r| {
        vec![
            r.kernel.to_string(),
            r.low_geometry.to_string(),
            r.high_geometry.to_string(),
            sig(r.noise_sigma),
            r.seed.to_string(),
            sig(r.mu_naive),
            sig(r.mu_constrained),
            sig(r.ratio),
        ]
    });
    write_bytes(path, &csv_bytes(&header, rows)?)
}

pub fn write_noise_rows(rows: &[NoiseRow], path: &Path) -> Result<()> {
    let header = [
        "method",
        "kernel",
        "low_geometry",
        "high_geometry",
        "noise_sigma",
        "seed",
        "mu",
        "mu_baseline",
        "ratio_to_baseline",
    ];
    let rows = rows.iter().map(|r| {
        vec![
            r.method.to_string(),
            r.kernel.to_string(),
            r.low_geometry.to_string(),
            r.high_geometry.to_string(),
            sig(r.noise_sigma),
            r.seed.to_string(),
            sig(r.mu),
            sig(r.mu_baseline),
            sig(r.ratio_to_baseline),
        ]
    });
    write_bytes(path, &csv_bytes(&header, rows)?)
}

/// Mean and standard deviation of improvement ratios per
/// `(kernel, low geometry, noise)`, in order of first appearance.
pub fn summarize_improvements(rows: &[ImprovementRow]) -> Vec<(ImprovementRow, f64)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String, u64), (ImprovementRow, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let key = (
            r.kernel.to_string(),
            r.low_geometry.to_string(),
            r.noise_sigma.to_bits(),
        );
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                (r.clone(), Vec::new())
            })
            .1
            .push(r.ratio);
    }
    order
        .into_iter()
        .map(|k| {
            let (mut first, ratios) = groups.remove(&k).expect("key recorded");
            let (mean, std) = crate::evaluation::mean_std(&ratios);
            first.ratio = mean;
            (first, std)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.15, 12), "0.15");
        assert_eq!(format_sig(17.0 / 3.0, 12), "5.66666666667");
        assert_eq!(format_sig(1.0, 12), "1");
        assert_eq!(format_sig(0.0, 12), "0");
        assert_eq!(format_sig(1e-7, 12), "1e-07");
        assert_eq!(format_sig(123456789012345.0, 12), "1.23456789012e+14");
        assert_eq!(format_sig(-2.5e-3, 12), "-0.0025");
        assert_eq!(format_sig(f64::INFINITY, 12), "inf");
        assert_eq!(format_sig(30.0, 12), "30");
    }

    #[test]
    fn pnm_variants() {
        let p = Path::new("x.pgm");
        let ascii = b"P2\n# comment\n2 1\n255\n0 255\n";
        assert_eq!(decode_pnm(ascii, p).unwrap().pixels, vec![0.0, 255.0]);
        let mut binary = b"P5 2 1 15\n".to_vec();
        binary.extend([0u8, 15]);
        assert_eq!(decode_pnm(&binary, p).unwrap().pixels, vec![0.0, 255.0]);
        let mut color = b"P6\n1 1\n255\n".to_vec();
        color.extend([100u8, 50, 200]);
        let v = decode_pnm(&color, p).unwrap().pixels[0];
        assert!((v - (0.299 * 100.0 + 0.587 * 50.0 + 0.114 * 200.0)).abs() < 1e-12);
        assert!(matches!(
            decode_pnm(b"P5 2 2 255\n\x00", p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_pnm(b"BM....", p),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn pgm_round_trip_is_idempotent() {
        let geo = ImageGeometry::new(3, 4).unwrap();
        let px: Vec<f64> = (0..12).map(|i| (i * 21) as f64).collect();
        let bytes = encode_pgm(geo, &px);
        let img = decode_pnm(&bytes, Path::new("a.pgm")).unwrap();
        assert_eq!(img.geometry, geo);
        assert_eq!(img.pixels, px);
        assert_eq!(encode_pgm(geo, &img.pixels), bytes);
    }

    #[test]
    fn rescale_guards() {
        assert_eq!(rescale_to_grey(&[3.0; 4]), vec![127.5; 4]);
        assert_eq!(rescale_to_grey(&[-1.0, 0.0, 1.0]), vec![0.0, 127.5, 255.0]);
    }
}

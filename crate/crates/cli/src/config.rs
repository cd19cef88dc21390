//! Resolved per-command configuration. Values come from, in increasing
//! precedence: built-in defaults, the `--config` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use xscale::io::ImageFormat;
use xscale::matching::MatchMethod;
use xscale::projection::{ImageGeometry, KernelKind};

use crate::CliError;

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "XSCALE_OUT_DIR";

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Reads a TOML or JSON config file, chosen by extension (TOML otherwise).
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    } else {
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Overwrites config fields with every flag that was given.
macro_rules! apply_flags {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}
pub(crate) use apply_flags;

/// Like [`apply_flags`] for fields that stay optional after resolution.
macro_rules! apply_optional_flags {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if $args.$field.is_some() { $cfg.$field = $args.$field.clone(); } )*
    };
}
pub(crate) use apply_optional_flags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Pgm,
    Png,
}

impl From<ImageKind> for ImageFormat {
    fn from(k: ImageKind) -> Self {
        match k {
            ImageKind::Pgm => ImageFormat::Pgm,
            ImageKind::Png => ImageFormat::Png,
        }
    }
}

impl std::str::FromStr for ImageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(ImageKind::Pgm),
            "png" => Ok(ImageKind::Png),
            _ => Err(format!("unknown image format {s:?} (expected pgm or png)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub samples: usize,
    pub size: ImageGeometry,
    pub dim: usize,
    pub conditions: usize,
    pub max_frequency: usize,
    pub condition_strength: f64,
    pub texture_strength: f64,
    pub seed: u64,
    pub format: ImageKind,
    pub out: Option<PathBuf>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let size = ImageGeometry::square(50).expect("nonzero");
        let base = xscale::evaluation::SyntheticSpec::new(5, 20, size, 4, 0);
        Self {
            classes: base.classes,
            samples: base.samples,
            size,
            dim: base.intrinsic_dim,
            conditions: base.conditions,
            max_frequency: base.max_frequency,
            condition_strength: base.condition_strength,
            texture_strength: base.texture_strength,
            seed: base.seed,
            format: ImageKind::Pgm,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub manifest: Option<PathBuf>,
    pub scale: Option<ImageGeometry>,
    pub kernel: KernelKind,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub dim: Option<usize>,
    pub energy: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            scale: None,
            kernel: KernelKind::Bicubic,
            noise_sigma: 0.0,
            noise_seed: 0,
            dim: None,
            energy: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub low: Option<PathBuf>,
    pub high: Option<PathBuf>,
    pub method: Option<MatchMethod>,
    pub kernel: Option<KernelKind>,
    pub export_modes: Option<PathBuf>,
    pub add_mean: bool,
    pub allow_degenerate: bool,
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub gallery: Option<PathBuf>,
    pub probes: Option<PathBuf>,
    pub gallery_condition: Option<String>,
    pub probe_condition: Option<String>,
    pub kernel: KernelKind,
    pub methods: Vec<MatchMethod>,
    pub allow_degenerate: bool,
    pub out: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            gallery: None,
            probes: None,
            gallery_condition: None,
            probe_condition: None,
            kernel: KernelKind::Bicubic,
            methods: MatchMethod::ALL.to_vec(),
            allow_degenerate: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFileConfig {
    /// High-resolution dataset; synthetic data is generated per seed when
    /// absent.
    pub manifest: Option<PathBuf>,
    pub synthetic: GenConfig,
    pub scales: Vec<ImageGeometry>,
    pub kernels: Vec<KernelKind>,
    pub methods: Vec<MatchMethod>,
    pub noise_sigmas: Vec<f64>,
    pub dim: usize,
    pub seeds: Vec<u64>,
    pub gallery_condition: Option<String>,
    pub probe_condition: Option<String>,
    pub allow_degenerate: bool,
    pub out: Option<PathBuf>,
}

impl Default for SweepFileConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: GenConfig::default(),
            scales: [5, 10, 15, 20, 25]
                .iter()
                .map(|&s| ImageGeometry::square(s).expect("nonzero"))
                .collect(),
            kernels: KernelKind::ALL.to_vec(),
            methods: MatchMethod::ALL.to_vec(),
            noise_sigmas: vec![0.0],
            dim: 3,
            seeds: vec![0],
            gallery_condition: None,
            probe_condition: None,
            allow_degenerate: false,
            out: None,
        }
    }
}

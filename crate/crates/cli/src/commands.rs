use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Serialize;
use xscale::evaluation::{
    add_gaussian_noise, class_separation, generate_synthetic, improvement_ratios, mix_seed,
    noise_relative, run_noise_sweep, similarity_matrix, LabeledModel, SeparationReport,
    SweepConfig, SyntheticSpec,
};
use xscale::io::{
    self, export_modes, file_sha256, load_image_sets, load_model, load_model_dir, save_model,
    summarize_improvements, write_dataset, write_improvements, write_noise_rows, write_report,
    write_similarity_matrix, ExportOptions, ModelFile, Provenance, ReportFormat,
};
use xscale::learning::{choose_dimension, estimate_subspace, ImageSet};
use xscale::matching::{match_models as run_match, CorrectionCache, MatchMethod, MatchOptions};
use xscale::projection::ProjectionMatrix;

use crate::config::{
    self, apply_flags, apply_optional_flags, EvaluateConfig, GenConfig, LearnConfig, MatchConfig,
    SweepFileConfig,
};
use crate::{CliError, EvaluateArgs, GenArgs, Globals, LearnArgs, MatchArgs, SweepArgs};

type CliResult = Result<(), CliError>;

/// Prints the resolved config when requested. Returns true if the command
/// should stop there.
fn echo_config<T: Serialize>(g: &Globals, cfg: &T) -> Result<bool, CliError> {
    if g.print_config {
        println!("{}", to_json(cfg)?);
    }
    Ok(g.print_config)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(config::default_out_dir)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn synthetic_spec(c: &GenConfig, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: c.classes,
        samples: c.samples,
        geometry: c.size,
        intrinsic_dim: c.dim,
        conditions: c.conditions,
        max_frequency: c.max_frequency,
        condition_strength: c.condition_strength,
        texture_strength: c.texture_strength,
        seed,
    }
}

pub fn gen_synthetic(g: &Globals, args: GenArgs) -> CliResult {
    let mut cfg: GenConfig = config::load(g.config.as_deref())?;
    apply_flags!(cfg, args; classes, samples, size, dim, conditions, max_frequency,
        condition_strength, texture_strength, seed, format);
    apply_optional_flags!(cfg, args; out);
    if echo_config(g, &cfg)? {
        return Ok(());
    }
    let sets = generate_synthetic(&synthetic_spec(&cfg, cfg.seed))?;
    let dir = out_dir(&cfg.out);
    let manifest = write_dataset(&sets, &dir, cfg.format.into())?;
    let images: usize = sets.iter().map(ImageSet::len).sum();
    println!(
        "wrote {images} images in {} sets; manifest {}",
        sets.len(),
        manifest.display()
    );
    Ok(())
}

pub fn learn(g: &Globals, args: LearnArgs) -> CliResult {
    let mut cfg: LearnConfig = config::load(g.config.as_deref())?;
    apply_flags!(cfg, args; kernel, noise_sigma, noise_seed);
    apply_optional_flags!(cfg, args; manifest, scale, out);
    if args.dim.is_some() {
        cfg.dim = args.dim;
        cfg.energy = None;
    }
    if args.energy.is_some() {
        cfg.energy = args.energy;
        cfg.dim = None;
    }
    if echo_config(g, &cfg)? {
        return Ok(());
    }
    let manifest = require(&cfg.manifest, "manifest")?;
    if cfg.dim.is_some() == cfg.energy.is_some() {
        return Err(CliError::Usage(
            "give exactly one of --dim or --energy".into(),
        ));
    }
    let sets = load_image_sets(&manifest)?;
    let manifest_sha = file_sha256(&manifest)?;
    let projection = match cfg.scale {
        Some(scale) => Some(ProjectionMatrix::build(
            sets[0].geometry,
            scale,
            cfg.kernel,
        )?),
        None => None,
    };
    let dir = out_dir(&cfg.out);
    let mut params = cfg.clone();
    params.out = None;
    let provenance = Provenance {
        manifest_sha256: Some(manifest_sha),
        kernel: projection.as_ref().map(|p| p.kernel().to_string()),
        parameters: to_value(&params)?,
    };
    for (i, set) in sets.iter().enumerate() {
        let set = match &projection {
            Some(p) => set.downsample(p)?,
            None => set.clone(),
        };
        let set = add_gaussian_noise(&set, cfg.noise_sigma, mix_seed(cfg.noise_seed, i as u64))?;
        let dim = match (cfg.dim, cfg.energy) {
            (Some(d), _) => d,
            (None, Some(f)) => choose_dimension(&set, f)?,
            (None, None) => unreachable!("checked above"),
        };
        let model = estimate_subspace(&set, dim)?;
        let path = dir.join(format!(
            "{}__{}.{}",
            file_label(&set.class_label),
            file_label(&set.condition_label),
            io::MODEL_EXTENSION
        ));
        println!(
            "{}/{}: {} d={} D={} energy={:.6} -> {}",
            set.class_label,
            set.condition_label,
            model.geometry,
            model.geometry.pixels(),
            model.dim(),
            model.energy_captured,
            path.display()
        );
        let file = ModelFile {
            model: LabeledModel {
                class_label: set.class_label.clone(),
                condition_label: set.condition_label.clone(),
                model,
            },
            provenance: provenance.clone(),
        };
        save_model(&file, &path)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MatchOutput {
    method: MatchMethod,
    kernel: String,
    low_geometry: String,
    high_geometry: String,
    similarity: f64,
    spectrum: Vec<f64>,
    exported: Vec<PathBuf>,
}

pub fn match_models(g: &Globals, args: MatchArgs) -> CliResult {
    let mut cfg: MatchConfig = config::load(g.config.as_deref())?;
    apply_optional_flags!(cfg, args; low, high, method, kernel, export_modes);
    cfg.add_mean |= args.add_mean;
    cfg.allow_degenerate |= args.allow_degenerate;
    cfg.json |= args.json;
    if echo_config(g, &cfg)? {
        return Ok(());
    }
    let low = load_model(&require(&cfg.low, "low")?)?;
    let high = load_model(&require(&cfg.high, "high")?)?;
    let method = cfg.method.unwrap_or(MatchMethod::Constrained);
    let kernel = match cfg.kernel {
        Some(k) => k,
        None => match low.provenance.kernel.as_deref() {
            Some(k) => k.parse()?,
            None => xscale::projection::KernelKind::Bicubic,
        },
    };
    let cache = CorrectionCache::new();
    let opts = MatchOptions {
        allow_degenerate: cfg.allow_degenerate,
    };
    let (lo, hi) = (&low.model.model, &high.model.model);
    let result = run_match(lo, hi, kernel, method, &cache, opts)?;

    let mut exported = Vec::new();
    if let Some(prefix) = &cfg.export_modes {
        let cm = cache.get(hi.geometry, lo.geometry, kernel)?;
        let mean_lo = cm.lift(&lo.mean)?;
        exported = export_modes(
            &result,
            Some(&hi.mean),
            Some(&mean_lo),
            hi.geometry,
            prefix,
            ExportOptions {
                add_mean: cfg.add_mean,
                ..ExportOptions::default()
            },
        )?;
    }
    let out = MatchOutput {
        method,
        kernel: kernel.to_string(),
        low_geometry: lo.geometry.to_string(),
        high_geometry: hi.geometry.to_string(),
        similarity: result.similarity,
        spectrum: result.spectrum.clone(),
        exported,
    };
    if cfg.json {
        println!("{}", to_json(&out)?);
    } else {
        println!("method: {}", out.method);
        println!("kernel: {}", out.kernel);
        println!("geometry: {} -> {}", out.low_geometry, out.high_geometry);
        println!("similarity: {}", io::format_sig(out.similarity, 12));
        let spectrum: Vec<String> = out
            .spectrum
            .iter()
            .map(|v| io::format_sig(*v, 12))
            .collect();
        println!("spectrum: {}", spectrum.join(" "));
        for p in &out.exported {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn select(
    models: Vec<ModelFile>,
    condition: &Option<String>,
    side: &str,
) -> Result<Vec<ModelFile>, CliError> {
    let chosen: Vec<ModelFile> = match condition {
        Some(c) => models
            .into_iter()
            .filter(|m| &m.model.condition_label == c)
            .collect(),
        None => models,
    };
    if chosen.is_empty() {
        return Err(CliError::Usage(format!("no {side} models selected")));
    }
    let geometries: BTreeSet<_> = chosen.iter().map(|m| m.model.model.geometry).collect();
    if geometries.len() > 1 {
        return Err(CliError::Core(xscale::Error::InvalidGeometry(format!(
            "{side} models mix geometries {geometries:?}"
        ))));
    }
    Ok(chosen)
}

fn conditions(models: &[ModelFile]) -> Vec<String> {
    let set: BTreeSet<&str> = models
        .iter()
        .map(|m| m.model.condition_label.as_str())
        .collect();
    set.into_iter().map(str::to_string).collect()
}

fn provenance_number(p: &Provenance, key: &str) -> Option<serde_json::Value> {
    p.parameters.get(key).cloned()
}

pub fn evaluate(g: &Globals, args: EvaluateArgs) -> CliResult {
    let mut cfg: EvaluateConfig = config::load(g.config.as_deref())?;
    apply_flags!(cfg, args; kernel, methods);
    apply_optional_flags!(cfg, args; gallery, probes, gallery_condition, probe_condition, out);
    cfg.allow_degenerate |= args.allow_degenerate;
    if echo_config(g, &cfg)? {
        return Ok(());
    }
    let gallery = load_model_dir(&require(&cfg.gallery, "gallery")?)?;
    let probes = load_model_dir(&require(&cfg.probes, "probes")?)?;
    // Same defaults as sweeps: the first sorted condition for the gallery,
    // the second (or the only one) for the probes.
    let gallery_condition = cfg
        .gallery_condition
        .clone()
        .or_else(|| conditions(&gallery).into_iter().next());
    let probe_condition = cfg.probe_condition.clone().or_else(|| {
        let conds = conditions(&probes);
        conds.get(1).or(conds.first()).cloned()
    });
    let gallery = select(gallery, &gallery_condition, "gallery")?;
    let probes = select(probes, &probe_condition, "probe")?;
    let noise_sigma = provenance_number(&probes[0].provenance, "noise_sigma")
        .and_then(|v| v.as_f64())
        .unwrap_or(0.0);
    let seed = provenance_number(&probes[0].provenance, "noise_seed")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let gallery: Vec<LabeledModel> = gallery.into_iter().map(|m| m.model).collect();
    let probes: Vec<LabeledModel> = probes.into_iter().map(|m| m.model).collect();
    let dir = out_dir(&cfg.out);
    let cache = CorrectionCache::new();
    let opts = MatchOptions {
        allow_degenerate: cfg.allow_degenerate,
    };
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let pool = thread_pool(args.jobs)?;
    let mut reports = Vec::new();
    for method in methods {
        let sm = pool
            .install(|| similarity_matrix(&gallery, &probes, cfg.kernel, method, &cache, opts))?;
        let path = dir.join(format!("similarity_{method}.csv"));
        write_similarity_matrix(&sm, &path)?;
        let separation = class_separation(&sm)?;
        println!(
            "{method:<12} e_w={} e_b={} mu={}",
            io::format_sig(separation.within, 6),
            io::format_sig(separation.between, 6),
            io::format_sig(separation.mu, 6)
        );
        reports.push(SeparationReport {
            method,
            kernel: cfg.kernel,
            low_geometry: probes[0].model.geometry,
            high_geometry: gallery[0].model.geometry,
            noise_sigma,
            seed,
            separation,
        });
    }
    for row in improvement_ratios(&reports) {
        println!(
            "mu_constrained / mu_naive = {}",
            io::format_sig(row.ratio, 6)
        );
    }
    let mut provenance = cfg.clone();
    provenance.out = None;
    let provenance = to_value(&provenance)?;
    write_report(
        &reports,
        ReportFormat::Csv,
        &dir.join("separation.csv"),
        None,
    )?;
    write_report(
        &reports,
        ReportFormat::Json,
        &dir.join("separation.json"),
        Some(&provenance),
    )?;
    println!("reports written to {}", dir.display());
    Ok(())
}

pub fn sweep(g: &Globals, args: SweepArgs) -> CliResult {
    let mut cfg: SweepFileConfig = config::load(g.config.as_deref())?;
    apply_flags!(cfg, args; scales, kernels, methods, noise_sigmas, dim, seeds);
    apply_optional_flags!(cfg, args; manifest, gallery_condition, probe_condition, out);
    cfg.allow_degenerate |= args.allow_degenerate;
    if let Some(v) = args.classes {
        cfg.synthetic.classes = v;
    }
    if let Some(v) = args.samples {
        cfg.synthetic.samples = v;
    }
    if let Some(v) = args.size {
        cfg.synthetic.size = v;
    }
    if let Some(v) = args.intrinsic_dim {
        cfg.synthetic.dim = v;
    }
    if echo_config(g, &cfg)? {
        return Ok(());
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must not be empty".into()));
    }
    let loaded = match &cfg.manifest {
        Some(m) => Some(load_image_sets(m)?),
        None => None,
    };
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let generated;
        let data: &[ImageSet] = match &loaded {
            Some(sets) => sets,
            None => {
                generated = generate_synthetic(&synthetic_spec(&cfg.synthetic, seed))?;
                &generated
            }
        };
        let sweep_cfg = SweepConfig {
            scales: cfg.scales.clone(),
            kernels: cfg.kernels.clone(),
            methods: cfg.methods.clone(),
            noise_sigmas: cfg.noise_sigmas.clone(),
            subspace_dim: cfg.dim,
            seed,
            gallery_condition: cfg.gallery_condition.clone(),
            probe_condition: cfg.probe_condition.clone(),
            allow_degenerate: cfg.allow_degenerate,
        };
        log::info!("sweep seed {seed}");
        reports.extend(run_noise_sweep(&sweep_cfg, data, args.jobs)?);
    }

    let dir = out_dir(&cfg.out);
    let mut resolved = cfg.clone();
    resolved.out = None;
    resolved.manifest = None;
    let mut provenance = serde_json::Map::new();
    provenance.insert("config".into(), to_value(&resolved)?);
    if let Some(m) = &cfg.manifest {
        provenance.insert("manifest_sha256".into(), file_sha256(m)?.into());
    }
    let provenance = serde_json::Value::Object(provenance);
    write_report(&reports, ReportFormat::Csv, &dir.join("reports.csv"), None)?;
    write_report(
        &reports,
        ReportFormat::Json,
        &dir.join("reports.json"),
        Some(&provenance),
    )?;
    let improvements = improvement_ratios(&reports);
    if !improvements.is_empty() {
        write_improvements(&improvements, &dir.join("improvement.csv"))?;
        println!(
            "{:<9} {:>7} {:>8} {:>14} {:>10}",
            "kernel", "scale", "sigma", "mu_c/mu_n", "std"
        );
        for (row, std) in summarize_improvements(&improvements) {
            println!(
                "{:<9} {:>7} {:>8} {:>14} {:>10}",
                row.kernel.as_str(),
                row.low_geometry.to_string(),
                io::format_sig(row.noise_sigma, 6),
                io::format_sig(row.ratio, 6),
                io::format_sig(std, 3)
            );
        }
    }
    if cfg.noise_sigmas.iter().any(|&s| s != 0.0) {
        write_noise_rows(&noise_relative(&reports), &dir.join("noise.csv"))?;
    }
    println!("{} reports written to {}", reports.len(), dir.display());
    Ok(())
}

use xscale::evaluation::{
    add_gaussian_noise, class_separation, classify, generate_synthetic_classes, improvement_ratios,
    noise_relative, run_noise_sweep, run_scale_sweep, similarity_matrix, LabeledModel, SweepConfig,
};
use xscale::learning::ImageSet;
use xscale::matching::{CorrectionCache, MatchMethod, MatchOptions};
use xscale::projection::{ImageGeometry, KernelKind, ProjectionMatrix};
use xscale::ErrorKind;

fn sq(side: usize) -> ImageGeometry {
    ImageGeometry::square(side).unwrap()
}

fn split(sets: &[ImageSet]) -> (Vec<&ImageSet>, Vec<&ImageSet>) {
    let gallery = sets
        .iter()
        .filter(|s| s.condition_label == "cond0")
        .collect();
    let probes = sets
        .iter()
        .filter(|s| s.condition_label == "cond1")
        .collect();
    (gallery, probes)
}

fn learn(sets: &[&ImageSet], dim: usize) -> Vec<LabeledModel> {
    sets.iter()
        .map(|s| LabeledModel::learn(s, dim).unwrap())
        .collect()
}

#[test]
fn equal_geometry_classification_is_perfect() {
    let sets = generate_synthetic_classes(5, 20, sq(16), 4, 11).unwrap();
    let (g, p) = split(&sets);
    let gallery = learn(&g, 4);
    let probes = learn(&p, 4);
    let cache = CorrectionCache::new();
    for method in MatchMethod::ALL {
        for probe in &probes {
            let c = classify(
                &probe.model,
                &gallery,
                KernelKind::Bicubic,
                method,
                &cache,
                MatchOptions::default(),
            )
            .unwrap();
            assert_eq!(c.class_label, probe.class_label, "{method}");
        }
    }
}

#[test]
fn cross_scale_matrix_is_diagonally_dominant() {
    let sets = generate_synthetic_classes(4, 20, sq(20), 4, 3).unwrap();
    let p = ProjectionMatrix::build(sq(20), sq(5), KernelKind::Bicubic).unwrap();
    let (g, probes_hi) = split(&sets);
    let low: Vec<ImageSet> = probes_hi
        .iter()
        .map(|s| s.downsample(&p).unwrap())
        .collect();
    let gallery = learn(&g, 3);
    let probes = learn(&low.iter().collect::<Vec<_>>(), 3);
    let cache = CorrectionCache::new();
    let opts = MatchOptions::default();
    let naive = similarity_matrix(
        &gallery,
        &probes,
        KernelKind::Bicubic,
        MatchMethod::Naive,
        &cache,
        opts,
    )
    .unwrap();
    let constrained = similarity_matrix(
        &gallery,
        &probes,
        KernelKind::Bicubic,
        MatchMethod::Constrained,
        &cache,
        opts,
    )
    .unwrap();
    assert!(constrained.diagonal_dominance() > 0.0);
    // the constrained score is never below the naive one, cell by cell
    let gap = (&constrained.values - &naive.values).min();
    assert!(gap >= -1e-10, "gap {gap}");
    let mu_n = class_separation(&naive).unwrap().mu;
    let mu_c = class_separation(&constrained).unwrap().mu;
    assert!(mu_c > mu_n, "{mu_c} vs {mu_n}");
}

#[test]
fn probe_order_follows_gallery_labels() {
    let sets = generate_synthetic_classes(3, 8, sq(8), 2, 5).unwrap();
    let (g, p) = split(&sets);
    let gallery = learn(&g, 2);
    let mut probes = learn(&p, 2);
    probes.reverse();
    let sm = similarity_matrix(
        &gallery,
        &probes,
        KernelKind::Bilinear,
        MatchMethod::Naive,
        &CorrectionCache::new(),
        MatchOptions::default(),
    )
    .unwrap();
    assert_eq!(sm.gallery_labels, sm.probe_labels);
}

#[test]
fn mismatched_labels_are_rejected() {
    let sets = generate_synthetic_classes(3, 8, sq(8), 2, 5).unwrap();
    let (g, p) = split(&sets);
    let gallery = learn(&g, 2);
    let probes = learn(&p[..2], 2);
    let e = similarity_matrix(
        &gallery,
        &probes,
        KernelKind::Bilinear,
        MatchMethod::Naive,
        &CorrectionCache::new(),
        MatchOptions::default(),
    )
    .unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Data);
}

fn small_sweep(scales: Vec<ImageGeometry>, sigmas: Vec<f64>) -> SweepConfig {
    SweepConfig {
        scales,
        kernels: KernelKind::ALL.to_vec(),
        methods: MatchMethod::ALL.to_vec(),
        noise_sigmas: sigmas,
        subspace_dim: 2,
        seed: 1,
        gallery_condition: None,
        probe_condition: None,
        allow_degenerate: false,
    }
}

#[test]
fn native_scale_improvement_is_one() {
    let data = generate_synthetic_classes(3, 10, sq(12), 3, 2).unwrap();
    let reports = run_scale_sweep(&small_sweep(vec![sq(12), sq(6)], vec![0.0]), &data, 1).unwrap();
    let rows = improvement_ratios(&reports);
    assert_eq!(rows.len(), 4);
    for row in rows.iter().filter(|r| r.low_geometry == sq(12)) {
        assert_eq!(row.ratio, 1.0);
    }
}

#[test]
fn noise_rows_are_relative_to_clean_baseline() {
    let data = generate_synthetic_classes(3, 10, sq(12), 3, 2).unwrap();
    let cfg = small_sweep(vec![sq(6)], vec![5.0, 0.0, 5.0]);
    let reports = run_noise_sweep(&cfg, &data, 2).unwrap();
    // duplicate sigmas collapse: 2 kernels x 2 methods x 2 sigmas
    assert_eq!(reports.len(), 8);
    let rows = noise_relative(&reports);
    assert_eq!(rows.len(), 8);
    for row in rows.iter().filter(|r| r.noise_sigma == 0.0) {
        assert_eq!(row.ratio_to_baseline, 1.0);
    }
}

#[test]
fn sweep_rejects_bad_config() {
    let data = generate_synthetic_classes(3, 10, sq(12), 3, 2).unwrap();
    let mut cfg = small_sweep(vec![sq(6)], vec![-1.0]);
    assert_eq!(
        run_noise_sweep(&cfg, &data, 1).unwrap_err().kind(),
        ErrorKind::Usage
    );
    cfg.noise_sigmas = vec![0.0];
    cfg.scales = vec![sq(24)];
    assert!(run_scale_sweep(&cfg, &data, 1).is_err());
}

#[test]
fn noise_is_seeded() {
    let data = generate_synthetic_classes(2, 5, sq(10), 2, 0).unwrap();
    let a = add_gaussian_noise(&data[0], 10.0, 3).unwrap();
    let b = add_gaussian_noise(&data[0], 10.0, 3).unwrap();
    let c = add_gaussian_noise(&data[0], 10.0, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(add_gaussian_noise(&data[0], f64::NAN, 0).is_err());
}

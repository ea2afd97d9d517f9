mod common;

use common::*;
use daxs_core::fit::{
    build_error_budget, compare_sign_classes, estimate_scan_variability, fit_hamiltonian,
    FitConfig, FitResult, ParamName, Weighting,
};
use daxs_core::model::LevelOffsets;
use daxs_core::tracks::PeakTracks;
use daxs_core::{CouplingName, Execution, ModelParams, TunnelCouplings};

fn tracks_for(truth: &ModelParams, noise: f64, seed: u64) -> PeakTracks {
    simulate_and_extract(truth, &sim_config(noise, seed))
}

#[test]
fn both_sign_classes_fit_noise_dominated_data_equally_well() {
    let truth = device(6.0);
    let tracks = tracks_for(&truth, 0.2, 21);
    let mut cfg = FitConfig::new(perturbed(&truth, 0.3, 4));
    cfg.weighting = Weighting::Uniform;
    let cmp = compare_sign_classes(&tracks, &cfg).unwrap();
    let (a, b) = (cmp.fit_a.residual_rms, cmp.fit_b.residual_rms);
    assert!(
        (a - b).abs() / a.min(b) < 0.10,
        "class a rms {a}, class b rms {b}"
    );
    assert!(cmp.fit_a.converged && cmp.fit_b.converged);
}

#[test]
fn small_couplings_leave_the_sign_class_unresolved() {
    let truth = ModelParams {
        couplings: TunnelCouplings::from_magnitudes([6.0, 8.0, 4.0, 7.0, 5.0, 9.0, 3.0, 9.0]),
        ..device(0.0)
    };
    let tracks = tracks_for(&truth, 0.05, 22);
    let cmp = compare_sign_classes(&tracks, &FitConfig::new(perturbed(&truth, 0.2, 5))).unwrap();
    let (a, b) = (cmp.fit_a.residual_rms, cmp.fit_b.residual_rms);
    assert!(
        (a - b).abs() / a.min(b) < 0.10,
        "class a rms {a}, class b rms {b}"
    );
}

#[test]
fn scale_and_offset_are_recovered() {
    let truth = device(6.0);
    let mut cfg = sim_config(0.05, 23);
    cfg.scale = 0.97;
    cfg.delta_offset = 3.0;
    let tracks = simulate_and_extract(&truth, &cfg);
    let fit = fit_hamiltonian(&tracks, &FitConfig::new(perturbed(&truth, 0.2, 6))).unwrap();
    assert!((fit.s - 0.97).abs() < 2e-3, "s = {}", fit.s);
    assert!(
        (fit.delta_offset - 3.0).abs() < 0.1,
        "offset = {}",
        fit.delta_offset
    );
    for p in [ParamName::Scale, ParamName::DeltaOffset] {
        let se = fit.stderr[&p];
        assert!(se.is_finite() && se > 0.0, "{p:?} stderr {se}");
    }
    for c in [CouplingName::T12, CouplingName::T22, CouplingName::T32] {
        let want = truth.couplings.get(c).magnitude;
        assert!(
            (fit.magnitude(c) - want).abs() / want < 0.02,
            "{c}: {}",
            fit.magnitude(c)
        );
    }
}

#[test]
fn fit_never_ends_above_its_start() {
    let truth = device(6.0);
    let tracks = tracks_for(&truth, 0.1, 24);
    for seed in 0..3 {
        let fit =
            fit_hamiltonian(&tracks, &FitConfig::new(perturbed(&truth, 0.3, 30 + seed))).unwrap();
        assert!(fit.weighted_rms <= fit.initial_weighted_rms);
        assert!(fit.iterations > 0);
    }
}

#[test]
fn fixed_parameters_keep_their_initial_values() {
    let truth = device(6.0);
    let tracks = tracks_for(&truth, 0.05, 25);
    let mut initial = perturbed(&truth, 0.1, 7);
    initial.offsets = LevelOffsets {
        l21: 121.0,
        ..initial.offsets
    };
    let mut cfg = FitConfig::new(initial);
    cfg.fixed = vec![ParamName::L21, ParamName::T41];
    let fit = fit_hamiltonian(&tracks, &cfg).unwrap();
    assert_eq!(fit.params.offsets.l21, 121.0);
    assert_eq!(
        fit.magnitude(CouplingName::T41),
        initial.couplings.t41.magnitude
    );
    assert!(!fit.free_parameters.contains(&ParamName::L21));
    assert!(!fit.stderr.contains_key(&ParamName::L21));
}

#[test]
fn restarts_are_reproducible_in_every_execution_mode() {
    let truth = device(6.0);
    let tracks = tracks_for(&truth, 0.05, 26);
    let mut cfg = FitConfig::new(perturbed(&truth, 0.3, 8));
    cfg.restarts = 3;
    cfg.seed = 99;
    cfg.execution = Execution::Sequential;
    let a = fit_hamiltonian(&tracks, &cfg).unwrap();
    cfg.execution = Execution::Parallel;
    let b = fit_hamiltonian(&tracks, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn budget_from_repeated_scans_round_trips_through_files() {
    let truth = device(6.0);
    let initial = perturbed(&truth, 0.2, 10);
    let mut fits = Vec::new();
    for scan in 0..3 {
        fits.push(
            fit_hamiltonian(
                &tracks_for(&truth, 0.05, 40 + scan),
                &FitConfig::new(initial),
            )
            .unwrap(),
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.json");
    std::fs::write(&path, fits[0].to_json().unwrap()).unwrap();
    let back = FitResult::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, fits[0]);

    let stats = estimate_scan_variability(&fits).unwrap();
    for s in &stats {
        let v: Vec<f64> = fits.iter().map(|f| f.magnitude(s.coupling)).collect();
        let mean = v.iter().sum::<f64>() / 3.0;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 2.0).sqrt();
        assert!((s.mean - mean).abs() < 1e-12 && (s.std - std).abs() < 1e-12);
    }
    let budget = build_error_budget(&stats, &[0.1; 8], &[true; 8]).unwrap();
    let csv = budget.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("coupling,mean,random_sigma,systematic_sigma,total_sigma,reliable")
    );
    assert_eq!(lines.count(), 8);
    assert!(budget.reliable().count() == 8, "{csv}");
}

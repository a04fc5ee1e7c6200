mod common;

use common::{rmse, simulate, small_adaptive_cfg, small_cfg, small_data};
use rfsmooth::rfdata::{export_fit, read_dataset, read_fitted, read_summary, write_dataset, FitSummary};
use rfsmooth::{fit, fit_batch, Execution, FitResult, SmootherConfig, TruthSpec};

fn same_numbers(a: &FitResult, b: &FitResult) {
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.phi, b.phi);
    assert_eq!(a.blocks, b.blocks);
    assert_eq!(a.fitted_rate, b.fitted_rate);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.total_ed, b.total_ed);
    assert_eq!(a.reml, b.reml);
}

#[test]
fn fits_are_bit_identical_across_runs_and_execution_policies() {
    let data = small_data(8);
    for cfg in [small_cfg(), small_adaptive_cfg()] {
        let first = fit(&data, &cfg).unwrap();
        let again = fit(&data, &cfg).unwrap();
        same_numbers(&first, &again);
        let parallel = fit(
            &data,
            &SmootherConfig {
                execution: Execution::Parallel,
                ..cfg.clone()
            },
        )
        .unwrap();
        same_numbers(&first, &parallel);
    }
}

#[test]
fn batch_fits_match_single_fits_in_order() {
    let datasets: Vec<_> = (1..=3).map(small_data).collect();
    let cfg = small_cfg();
    let singles: Vec<FitResult> = datasets.iter().map(|d| fit(d, &cfg).unwrap()).collect();
    for exec in [Execution::Sequential, Execution::Parallel] {
        let batch = fit_batch(&datasets, &cfg, exec);
        assert_eq!(batch.len(), 3);
        for (single, b) in singles.iter().zip(batch) {
            same_numbers(single, &b.unwrap());
        }
    }
}

#[test]
fn export_bundle_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate([16, 16, 16], 100, &TruthSpec::default(), 2);
    let path = dir.path().join("data.csv");
    write_dataset(&data, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);

    let result = fit(&data, &SmootherConfig::nonadaptive()).unwrap();
    let bundle = dir.path().join("bundle");
    export_fit(&result, data.grid(), &bundle).unwrap();

    let summary = read_summary(bundle.join("summary.json")).unwrap();
    assert_eq!(summary, FitSummary::from_result(&result, data.grid()));
    assert_eq!(summary.phi, result.phi);
    assert_eq!(summary.parameters, 3);
    assert_eq!(summary.coefficients, 343);

    let (rate, linpred) = read_fitted(bundle.join("fitted.csv"), data.grid()).unwrap();
    assert_eq!(rate.len(), 4096);
    assert_eq!(rate, result.fitted_rate.as_slice());
    assert_eq!(linpred, result.linear_predictor.as_slice());

    let ed = std::fs::read_to_string(bundle.join("ed_blocks.csv")).unwrap();
    assert_eq!(ed.lines().next(), Some("direction,block,phi,ed"));
    assert_eq!(ed.lines().count(), 1 + 3);
    let trace = std::fs::read_to_string(bundle.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("outer_iter,reml,max_dlogphi,inner_iters"));
    assert_eq!(trace.lines().count(), 1 + result.trace.len());
}

#[test]
fn adaptive_export_lists_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate([16, 16, 16], 100, &TruthSpec::default(), 3);
    let cfg = SmootherConfig {
        max_outer: 3,
        ..SmootherConfig::adaptive()
    };
    let result = fit(&data, &cfg).unwrap();
    export_fit(&result, data.grid(), dir.path()).unwrap();
    let ed = std::fs::read_to_string(dir.path().join("ed_blocks.csv")).unwrap();
    assert_eq!(ed.lines().count(), 1 + 192);
    let summary = read_summary(dir.path().join("summary.json")).unwrap();
    assert_eq!(summary.phi.len(), 192);
    assert_eq!(summary.converged, result.converged);
}

#[test]
fn flat_truth_gives_matching_adaptive_and_nonadaptive_errors() {
    let truth = TruthSpec {
        sharpness: 0.0,
        onset_ms: 0.0,
        peak_ms: 160.0,
        offset_ms: 400.0,
        ..TruthSpec::default()
    };
    let grid = rfsmooth::GridSpec::regular(16, 16, 16, -20, -20).unwrap();
    let rates = truth.rate_cube(&grid);
    let datasets: Vec<_> = (1..=3).map(|seed| simulate([16, 16, 16], 100, &truth, seed)).collect();
    let plain = fit_batch(&datasets, &SmootherConfig::nonadaptive(), Execution::Parallel);
    let adaptive = fit_batch(&datasets, &SmootherConfig::adaptive(), Execution::Parallel);
    for (seed, (a, b)) in plain.into_iter().zip(adaptive).enumerate() {
        let (a, b) = (a.unwrap(), b.unwrap());
        assert!(a.converged && b.converged);
        let ra = rmse(a.fitted_rate.as_slice(), &rates);
        let rb = rmse(b.fitted_rate.as_slice(), &rates);
        assert!((ra - rb).abs() < 0.1 * ra, "seed {}: {ra} vs {rb}", seed + 1);
    }
}

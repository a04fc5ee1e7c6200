#![allow(dead_code)]

use rfsmooth::rfdata::simulate_rfmap;
use rfsmooth::{GridSpec, OffsetGrid, RfDataset, SmootherConfig, TruthSpec};

pub fn simulate(extents: [usize; 3], presentations: u64, truth: &TruthSpec, seed: u64) -> RfDataset {
    let [r, c, t] = extents;
    let grid = GridSpec::regular(r, c, t, -20, -20).unwrap();
    let offsets = OffsetGrid::constant(r, c, presentations);
    let counts = simulate_rfmap(truth, &grid, &offsets, seed).unwrap();
    RfDataset::new(counts, offsets).unwrap()
}

/// Receptive field inside a 5×5 grid with a response window over five lags.
pub fn small_truth() -> TruthSpec {
    TruthSpec {
        center_r: 2.6,
        center_c: 3.4,
        width_r: 1.3,
        width_c: 1.6,
        onset_ms: 30.0,
        peak_ms: 60.0,
        offset_ms: 90.0,
        sharpness: 0.08,
        ..TruthSpec::default()
    }
}

pub fn small_data(seed: u64) -> RfDataset {
    simulate([5, 5, 5], 80, &small_truth(), seed)
}

pub fn small_cfg() -> SmootherConfig {
    SmootherConfig {
        basis_dim: [5, 5, 5],
        outer_tol: 1e-8,
        inner_tol: 1e-12,
        ..SmootherConfig::default()
    }
}

pub fn small_adaptive_cfg() -> SmootherConfig {
    SmootherConfig {
        adaptive: true,
        adaptive_dim: [[2; 3]; 3],
        ..small_cfg()
    }
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sse / a.len() as f64).sqrt()
}

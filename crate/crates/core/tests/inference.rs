//! Invariants of the MAP cost fit on moderately sized synthetic data.

use nalgebra::DMatrix;
use rdsig_core::cost::off_diagonal_mean;
use rdsig_core::inference::{
    encode, fit_cost_matrix, initializations, neg_log_posterior, OptimizerSettings, PriorConfig,
};
use rdsig_core::ingest::{BlockRef, ConfusionCounts, LabelSet};
use rdsig_core::synth::{make_observer, random_cost_matrix, sample_counts};

fn key() -> BlockRef {
    BlockRef {
        system: "s".into(),
        family: "f".into(),
        experiment: "e".into(),
        condition: "c".into(),
    }
}

fn synthetic(seed: u64, lambda: f64, trials: u64) -> ConfusionCounts {
    let truth = random_cost_matrix(4, 0.5, 1.5, seed).unwrap();
    let obs = make_observer(truth, lambda, &[0.25; 4], 100 + seed).unwrap();
    sample_counts(&obs, trials, key(), LabelSet::numbered(4).unwrap()).unwrap()
}

#[test]
fn fits_are_normalized_and_beat_every_start() {
    let prior = PriorConfig::default();
    let opt = OptimizerSettings::default();
    for seed in 0..4 {
        let counts = synthetic(seed, 2.0, 20_000);
        let fit = fit_cost_matrix(&counts, &prior, &opt).unwrap();
        let rho = fit.rho_map.matrix();
        assert!((0..4).all(|i| rho[(i, i)] == 0.0));
        assert!((off_diagonal_mean(rho) - 1.0).abs() < 1e-12);
        let at_map = -fit.log_posterior;
        for (kind, start) in initializations(&counts).unwrap() {
            let at_start = neg_log_posterior(&encode(&start), &counts, &prior, &opt).unwrap();
            assert!(at_map <= at_start, "seed {seed}: {kind:?} start {at_start} < MAP {at_map}");
        }
    }
}

#[test]
fn transposed_counts_give_transposed_costs() {
    // Circulant counts: every class is shown equally often and the transpose
    // is again circulant, so the fit must commute with transposition.
    let f = [900u64, 40, 10, 50];
    let k = f.len();
    let n = DMatrix::from_fn(k, k, |i, j| f[(j + k - i) % k]);
    let l = LabelSet::numbered(k).unwrap();
    let counts = ConfusionCounts::new(key(), n.clone(), l.clone()).unwrap();
    let transposed = ConfusionCounts::new(key(), n.transpose(), l).unwrap();
    let prior = PriorConfig::default();
    let opt = OptimizerSettings::default();
    let a = fit_cost_matrix(&counts, &prior, &opt).unwrap();
    let b = fit_cost_matrix(&transposed, &prior, &opt).unwrap();
    let diff = (a.rho_map.matrix().transpose() - b.rho_map.matrix()).amax();
    assert!(diff < 1e-4, "max deviation {diff}");
    assert!((a.scale - b.scale).abs() < 1e-4 * a.scale);
}

#[test]
fn scale_scan_has_an_interior_minimum() {
    let counts = synthetic(7, 3.0, 20_000);
    let prior = PriorConfig::default();
    let opt = OptimizerSettings::default();
    let fit = fit_cost_matrix(&counts, &prior, &opt).unwrap();
    let raw = fit.raw_costs();
    let values: Vec<f64> = (0..=24)
        .map(|i| {
            let c = 2f64.powf(-2.0 + i as f64 / 6.0);
            neg_log_posterior(&encode(&(&raw * c)), &counts, &prior, &opt).unwrap()
        })
        .collect();
    let best = (0..values.len())
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    assert_eq!(best, 12, "minimum at c = 2^{}", -2.0 + best as f64 / 6.0);
    // Small scales can make an observed response letter extinct; those
    // points are infeasible and sit at the penalty value.
    let first = values.iter().position(|v| *v < 1e29).unwrap();
    assert!(values[first..=best].windows(2).all(|w| w[1] < w[0]));
    assert!(values[..first].iter().all(|v| *v >= 1e29));
    assert!(values[best..].windows(2).all(|w| w[1] > w[0]));
}

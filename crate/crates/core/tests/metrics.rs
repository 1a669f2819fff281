use proptest::prelude::*;
use ttg_core::eval::{compare, evaluate_pairs, generate_k, mae, mean_grid, rmse, run_ablation, sample_seeds};
use ttg_core::road::TrafficSnapshot;
use ttg_core::scenario::{PairRecord, ProbeSet};
use ttg_core::train::{TrainConfig, Trainer};

fn naive(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] - truth[i];
        abs += d.abs();
        sq += d * d;
    }
    (abs / pred.len() as f64, (sq / pred.len() as f64).sqrt())
}

fn pairs_of(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-500.0f64..500.0, n), prop::collection::vec(-500.0f64..500.0, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_match_naive_reference((p, t) in (1usize..200).prop_flat_map(pairs_of)) {
        let (m, r) = naive(&p, &t);
        prop_assert!((mae(&p, &t).unwrap() - m).abs() <= 1e-12 * m.max(1.0));
        prop_assert!((rmse(&p, &t).unwrap() - r).abs() <= 1e-12 * r.max(1.0));
        prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-12);
    }

    #[test]
    fn metrics_scale_with_errors((p, t) in (1usize..50).prop_flat_map(pairs_of), c in 0.0f64..10.0) {
        let zeros = vec![0.0; p.len()];
        let err: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a - b).collect();
        let scaled: Vec<f64> = err.iter().map(|e| c * e).collect();
        let (m1, r1) = (mae(&err, &zeros).unwrap(), rmse(&err, &zeros).unwrap());
        prop_assert!((mae(&scaled, &zeros).unwrap() - c * m1).abs() <= 1e-9 * (1.0 + c * m1));
        prop_assert!((rmse(&scaled, &zeros).unwrap() - c * r1).abs() <= 1e-9 * (1.0 + c * r1));
    }
}

#[test]
fn worked_example() {
    assert_eq!(mae(&[1.0, -3.0], &[0.0, 0.0]).unwrap(), 2.0);
    assert!((rmse(&[1.0, -3.0], &[0.0, 0.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn ground_truth_oracle_scores_zero() {
    let probe = ProbeSet::build(0).unwrap();
    let truth: Vec<TrafficSnapshot> = probe.dataset.pairs.iter().map(|p| p.snapshot()).collect();
    let r = compare(&truth, &truth, &probe.dataset.scaler).unwrap();
    for c in [r.congestion, r.speed, r.travel_time] {
        assert_eq!((c.mae, c.rmse), (0.0, 0.0));
    }
}

fn untrained() -> (ProbeSet, ttg_core::denoiser::Model) {
    let probe = ProbeSet::build(0).unwrap();
    let cfg = TrainConfig {
        timesteps: 20,
        widths: [8, 16],
        groups: 4,
        ..TrainConfig::default()
    };
    let t = Trainer::new(cfg, &probe.dataset).unwrap();
    let m = t.sampling_model();
    (probe, m)
}

#[test]
fn generate_k_semantics() {
    let (probe, m) = untrained();
    let text = &probe.dataset.pairs[3].text;
    let scaler = &probe.dataset.scaler;
    let one = generate_k(&m, scaler, 60, text, 1, 40).unwrap();
    let draws = sample_seeds(&m, text, 3, 40).unwrap();
    let same_on_roads = |got: &[f64], want: &[f64]| {
        for (cell, (g, w)) in got.iter().zip(want).enumerate() {
            if cell % 64 < 60 {
                assert_eq!(g, w);
            }
        }
    };
    same_on_roads(&one.grid.values, draws[0].as_ref().unwrap());
    let three = generate_k(&m, scaler, 60, text, 3, 40).unwrap();
    same_on_roads(&three.grid.values, &mean_grid(&draws.into_iter().flatten().collect::<Vec<_>>()).unwrap());
    assert_eq!(three, generate_k(&m, scaler, 60, text, 3, 40).unwrap());
    assert!(generate_k(&m, scaler, 60, text, 0, 40).is_err());
}

#[test]
fn untrained_model_has_positive_error() {
    let (probe, m) = untrained();
    let pairs: Vec<&PairRecord> = probe.dataset.pairs.iter().take(2).collect();
    let r = evaluate_pairs(&m, &probe.dataset.scaler, &pairs, &[1, 2], 5).unwrap();
    assert_eq!(r.len(), 2);
    for rep in &r {
        assert!(rep.speed.mae > 0.0);
        assert!(rep.speed.rmse >= rep.speed.mae);
    }
    assert_eq!(r, evaluate_pairs(&m, &probe.dataset.scaler, &pairs, &[1, 2], 5).unwrap());
}

#[test]
fn ablation_grid_is_complete() {
    let probe = ProbeSet::build(0).unwrap();
    let base = TrainConfig {
        timesteps: 10,
        widths: [4, 8],
        groups: 2,
        max_steps: Some(2),
        ..TrainConfig::default()
    };
    let pairs: Vec<&PairRecord> = probe.dataset.pairs.iter().take(2).collect();
    let grid = run_ablation(&probe.dataset, &base, &[0, 1, 2, 3], &[1, 5, 10], &pairs, 1, |_| {}).unwrap();
    assert_eq!(grid.cells.len(), 12);
    for c in &grid.cells {
        let r = c.report.as_ref().unwrap();
        for m in [r.congestion, r.speed, r.travel_time] {
            assert!(m.rmse >= m.mae);
        }
    }
    let table = grid.table();
    assert_eq!(table.lines().count(), 2 + 12 + 3);
    assert!(table.contains("Spd MAE"));
}

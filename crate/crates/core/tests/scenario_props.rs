use chrono::{NaiveDate, NaiveDateTime};
use proptest::prelude::*;
use ttg_core::scenario::{
    build_dataset, event_factors, simulate_interval, Dataset, EventKind, EventSpec, ScenarioConfig, Simulator,
};
use ttg_tensor::rng::stream;

fn at(h: u32, m: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2022, 1, 5).unwrap().and_hms_opt(h, m, 0).unwrap()
}

fn quiet_sim(seed: u64) -> Simulator {
    let mut cfg = ScenarioConfig::new(seed, 60, 1);
    cfg.noise_std = 0.0;
    Simulator::new(&cfg).unwrap()
}

fn accident(road: usize, severity: f64, radius: usize) -> EventSpec {
    EventSpec {
        kind: EventKind::Accident,
        epicenter: Some(road),
        severity,
        start: at(11, 0),
        duration_min: 120,
        hop_radius: radius,
    }
}

#[test]
fn datasets_are_reproducible_and_survive_disk() {
    let mut cfg = ScenarioConfig::new(21, 30, 3);
    cfg.sample_interval_min = 20;
    let a = build_dataset(&cfg).unwrap();
    let b = build_dataset(&cfg).unwrap();
    assert_eq!(a.pairs, b.pairs);
    assert_eq!(a.graph.to_json(), b.graph.to_json());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.pairs, a.pairs);
    assert_eq!(back.split, a.split);
    assert_eq!(back.manifest, a.manifest);
    assert_eq!(back.vocab, a.vocab);
    for f in ["graph.json", "scaler.json", "vocab.json", "adjacency.bin", "pairs.jsonl", "split.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn tampered_manifest_is_rejected() {
    let cfg = ScenarioConfig::new(22, 16, 1);
    let ds = build_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"seed\": 22", "\"seed\": 23");
    std::fs::write(&path, text).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn split_is_chronological() {
    let cfg = ScenarioConfig::new(23, 16, 5);
    let ds = build_dataset(&cfg).unwrap();
    let last_train = ds.train_pairs().map(|p| p.timestamp).max().unwrap();
    let first_test = ds.test_pairs().map(|p| p.timestamp).min().unwrap();
    assert!(last_train < first_test);
    assert_eq!(ds.split.train.len(), 4 * 360);
}

#[test]
fn weather_slows_every_road() {
    let sim = quiet_sim(24);
    let rain = EventSpec {
        kind: EventKind::Weather,
        epicenter: None,
        severity: 0.5,
        start: at(11, 0),
        duration_min: 120,
        hop_radius: 0,
    };
    let f = event_factors(&sim.graph, &[rain], at(12, 0), 0.5);
    assert!(f.iter().all(|v| (*v - 0.5).abs() < 1e-12));
}

#[test]
fn event_text_names_the_epicenter() {
    let sim = quiet_sim(25);
    let p = sim.pair(&[accident(9, 0.9, 1)], at(12, 0), &mut stream(0, 0));
    let name = &sim.graph.roads[9].name;
    assert!(p.text.ends_with(&format!("A serious traffic accident on {name}.")), "{}", p.text);
    let before = sim.pair(&[accident(9, 0.9, 1)], at(10, 40), &mut stream(0, 0));
    assert_eq!(before.text, "Wednesday, 10:40.");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn harsher_events_never_speed_traffic_up(
        road in 0usize..60,
        lo in 0.05f64..0.9,
        bump in 0.0f64..0.1,
        radius in 0usize..3,
        minute in 0u32..120,
    ) {
        let sim = quiet_sim(26);
        let t = at(11, 0) + chrono::Duration::minutes(i64::from(minute));
        let mild = simulate_interval(&sim.graph, &sim.profiles, &[accident(road, lo, radius)], t, &mut stream(0, 0), &sim.params);
        let hard = simulate_interval(&sim.graph, &sim.profiles, &[accident(road, lo + bump, radius)], t, &mut stream(0, 0), &sim.params);
        for i in 0..60 {
            prop_assert!(hard.speeds[i] <= mild.speeds[i]);
            prop_assert!(hard.congestion[i] >= mild.congestion[i]);
        }
    }

    #[test]
    fn events_stay_within_their_radius(road in 0usize..60, radius in 0usize..3, severity in 0.1f64..1.0) {
        let sim = quiet_sim(27);
        let t = at(12, 0);
        let base = simulate_interval(&sim.graph, &sim.profiles, &[], t, &mut stream(0, 0), &sim.params);
        let hit = simulate_interval(&sim.graph, &sim.profiles, &[accident(road, severity, radius)], t, &mut stream(0, 0), &sim.params);
        let hops = sim.graph.hop_distances(road);
        for i in 0..60 {
            match hops[i] {
                Some(h) if h <= radius => prop_assert!(hit.speeds[i] < base.speeds[i] || base.speeds[i] <= 2.0),
                _ => prop_assert_eq!(hit.speeds[i], base.speeds[i]),
            }
        }
    }

    #[test]
    fn snapshots_respect_physical_bounds(seed in 0u64..1000, hour in 0u32..24) {
        let mut cfg = ScenarioConfig::new(seed, 20, 1);
        cfg.noise_std = 0.2;
        let sim = Simulator::new(&cfg).unwrap();
        let s = simulate_interval(&sim.graph, &sim.profiles, &[], at(hour, 0), &mut stream(seed, 1), &sim.params);
        prop_assert!(s.validate(20, 120.0).is_ok());
        for i in 0..20 {
            let want = sim.graph.roads[i].length_m / (s.speeds[i] / 3.6);
            prop_assert!((s.travel_times[i] - want).abs() < 1e-9);
        }
    }
}

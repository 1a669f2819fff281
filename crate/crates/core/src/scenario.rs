//! Synthetic text-traffic pairs.
//!
//! A seeded generator builds a grid-like road network, per-road diurnal speed
//! profiles, and abnormal events. Each sampled interval yields a
//! [`TrafficSnapshot`] plus a templated prompt naming the time and the events
//! active at that moment.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttg_tensor::rng::{derive_seed, stream, StreamRng};

use crate::error::{invalid, io_err, json_err, Error, Result};
use crate::road::{
    build_normalized_adjacency, grid_side, pad_target, AdjacencyMatrix, FeatureScaler, Road, RoadGraph,
    TrafficSnapshot, CONGESTION_LEVELS,
};
use crate::text::{Vocabulary, WEEKDAYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Accident,
    Construction,
    Closure,
    Weather,
    Gathering,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::Accident,
        EventKind::Construction,
        EventKind::Closure,
        EventKind::Weather,
        EventKind::Gathering,
    ];

    /// Noun phrase used in prompts.
    pub fn phrase(self) -> &'static str {
        match self {
            EventKind::Accident => "traffic accident",
            EventKind::Construction => "road construction",
            EventKind::Closure => "road closure",
            EventKind::Weather => "heavy rain",
            EventKind::Gathering => "crowd gathering",
        }
    }

    pub fn from_phrase(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.phrase() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityClass {
    Minor,
    General,
    Serious,
}

impl SeverityClass {
    pub fn of(severity: f64) -> Self {
        if severity <= 1.0 / 3.0 {
            SeverityClass::Minor
        } else if severity <= 2.0 / 3.0 {
            SeverityClass::General
        } else {
            SeverityClass::Serious
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            SeverityClass::Minor => "minor",
            SeverityClass::General => "general",
            SeverityClass::Serious => "serious",
        }
    }

    pub fn from_word(s: &str) -> Option<Self> {
        [SeverityClass::Minor, SeverityClass::General, SeverityClass::Serious]
            .into_iter()
            .find(|c| c.word() == s)
    }

    /// Representative severity for a class, used when only the class is known.
    pub fn nominal(self) -> f64 {
        match self {
            SeverityClass::Minor => 0.25,
            SeverityClass::General => 0.5,
            SeverityClass::Serious => 0.85,
        }
    }
}

/// One abnormal event. Weather events have no epicenter and cover every road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub kind: EventKind,
    pub epicenter: Option<usize>,
    pub severity: f64,
    pub start: NaiveDateTime,
    pub duration_min: u32,
    pub hop_radius: usize,
}

impl EventSpec {
    pub fn validate(&self, n_roads: usize) -> Result<()> {
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(invalid(format!("severity {} outside (0, 1]", self.severity)));
        }
        if self.duration_min == 0 {
            return Err(invalid("event duration must be positive"));
        }
        match (self.kind, self.epicenter) {
            (EventKind::Weather, None) => Ok(()),
            (EventKind::Weather, Some(_)) => Err(invalid("weather events cover the whole network")),
            (_, None) => Err(invalid("localized event needs an epicenter")),
            (_, Some(r)) if r >= n_roads => Err(invalid(format!("epicenter {r} is not a road"))),
            _ => Ok(()),
        }
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start + Duration::minutes(i64::from(self.duration_min))
    }

    pub fn is_active(&self, t: NaiveDateTime) -> bool {
        t >= self.start && t < self.end()
    }

    /// Linear ramp over the first and last 20% of the window; 0 outside it.
    pub fn ramp(&self, t: NaiveDateTime) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        let total = f64::from(self.duration_min) * 60.0;
        let edge = 0.2 * total;
        let elapsed = (t - self.start).num_seconds() as f64;
        let remaining = (self.end() - t).num_seconds() as f64;
        (elapsed / edge).min(remaining / edge).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_roads: usize,
    pub n_days: usize,
    #[serde(default = "default_interval")]
    pub sample_interval_min: u32,
    #[serde(default = "default_events_per_day")]
    pub events_per_day: f64,
    /// standard deviation of multiplicative speed noise
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_hop_decay")]
    pub hop_decay: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
}

fn default_interval() -> u32 {
    4
}
fn default_events_per_day() -> f64 {
    6.0
}
fn default_noise() -> f64 {
    0.03
}
fn default_start_date() -> NaiveDate {
    // a Monday
    NaiveDate::from_ymd_opt(2022, 1, 3).unwrap()
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_hop_decay() -> f64 {
    0.5
}
fn default_max_speed() -> f64 {
    120.0
}

impl ScenarioConfig {
    pub fn new(seed: u64, n_roads: usize, n_days: usize) -> Self {
        Self {
            seed,
            n_roads,
            n_days,
            sample_interval_min: default_interval(),
            events_per_day: default_events_per_day(),
            noise_std: default_noise(),
            start_date: default_start_date(),
            train_fraction: default_train_fraction(),
            hop_decay: default_hop_decay(),
            max_speed: default_max_speed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_roads < 4 {
            return Err(invalid("n_roads must be at least 4"));
        }
        if self.n_days == 0 {
            return Err(invalid("n_days must be positive"));
        }
        if self.sample_interval_min == 0 || 1440 % self.sample_interval_min != 0 {
            return Err(invalid("sample interval must divide 1440 minutes"));
        }
        if !(self.events_per_day >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(invalid("event rate and noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(invalid("train_fraction must lie in [0, 1]"));
        }
        if !(self.hop_decay > 0.0 && self.hop_decay <= 1.0) {
            return Err(invalid("hop_decay must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn intervals_per_day(&self) -> usize {
        (1440 / self.sample_interval_min) as usize
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Smooth dip in speed around a rush hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RushDip {
    pub center_hour: f64,
    pub width_hours: f64,
    pub depth: f64,
}

impl RushDip {
    /// Raised cosine, exactly zero beyond `width_hours` from the center.
    fn bump(&self, hour: f64) -> f64 {
        let d = (hour - self.center_hour).abs();
        if d >= self.width_hours {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * d / self.width_hours).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiurnalProfile {
    pub free_flow: Vec<f64>,
    /// per-road multiplier on dip depth
    pub sensitivity: Vec<f64>,
    pub dips: Vec<RushDip>,
    /// dip depth multiplier on Saturday and Sunday
    pub weekend_scale: f64,
}

impl DiurnalProfile {
    pub fn factor(&self, road: usize, t: NaiveDateTime) -> f64 {
        let hour = f64::from(t.hour()) + f64::from(t.minute()) / 60.0 + f64::from(t.second()) / 3600.0;
        let weekend = t.weekday().num_days_from_monday() >= 5;
        let scale = self.sensitivity[road] * if weekend { self.weekend_scale } else { 1.0 };
        self.dips
            .iter()
            .map(|d| 1.0 - (d.depth * scale).min(0.95) * d.bump(hour))
            .product()
    }
}

/// Knobs of the ground-truth dynamics that are not part of the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub noise_std: f64,
    pub hop_decay: f64,
    pub max_speed: f64,
}

impl From<&ScenarioConfig> for SimParams {
    fn from(c: &ScenarioConfig) -> Self {
        Self {
            noise_std: c.noise_std,
            hop_decay: c.hop_decay,
            max_speed: c.max_speed,
        }
    }
}

pub const MIN_SPEED: f64 = 2.0;

const ROAD_TYPES: [&str; 4] = ["Ring", "Avenue", "Street", "Boulevard"];
const DIRECTIONS: [&str; 4] = ["East", "West", "North", "South"];

fn name_pool() -> Vec<String> {
    let mut pool = Vec::new();
    for ty in ROAD_TYPES {
        for k in 1..=9 {
            pool.push(format!("{ty} {k}"));
            for dir in DIRECTIONS {
                pool.push(format!("{ty} {k} {dir}"));
            }
        }
    }
    pool
}

/// Grid-with-diagonals road network, deterministic in `seed`.
pub fn generate_network(seed: u64, n_roads: usize) -> Result<RoadGraph> {
    if n_roads < 4 {
        return Err(invalid("n_roads must be at least 4"));
    }
    let mut rng = stream(seed, 0x6e6574);
    let side = grid_side(n_roads);
    let spacing = 1000.0;

    let mut pool = name_pool();
    pool.shuffle(&mut rng);
    let base = pool.len();
    let names: Vec<String> = (0..n_roads)
        .map(|i| {
            let name = &pool[i % base];
            match i / base {
                0 => name.clone(),
                s => format!("{name} Section {}", s.min(9)),
            }
        })
        .collect();

    let mut roads = Vec::with_capacity(n_roads);
    for (i, name) in names.into_iter().enumerate() {
        let (r, c) = ((i / side) as f64, (i % side) as f64);
        let horizontal = (i / side + i % side) % 2 == 0;
        let half = rng.gen_range(300.0..450.0);
        let bend = rng.gen_range(-60.0..60.0);
        let (cx, cy) = (c * spacing, r * spacing);
        let polyline = if horizontal {
            vec![[cx - half, cy], [cx, cy + bend], [cx + half, cy]]
        } else {
            vec![[cx, cy - half], [cx + bend, cy], [cx, cy + half]]
        };
        let length_m = polyline
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum();
        roads.push(Road {
            road_id: i,
            name,
            length_m,
            polyline,
        });
    }

    let mut edges = Vec::new();
    for i in 0..n_roads {
        let c = i % side;
        if c + 1 < side && i + 1 < n_roads {
            edges.push([i, i + 1]);
        }
        if i + side < n_roads {
            edges.push([i, i + side]);
        }
        if c + 1 < side && i + side + 1 < n_roads && rng.gen_bool(0.3) {
            edges.push([i, i + side + 1]);
        }
    }
    let graph = RoadGraph { roads, edges };
    graph.validate()?;
    Ok(graph)
}

/// Free-flow speeds and rush-hour dips for every road of `graph`.
pub fn generate_profiles(seed: u64, graph: &RoadGraph, max_speed: f64) -> DiurnalProfile {
    let mut rng = stream(seed, 0x70726f);
    let mut free_flow = Vec::with_capacity(graph.n_roads());
    let mut sensitivity = Vec::with_capacity(graph.n_roads());
    for road in &graph.roads {
        let (lo, hi) = match road.name.split(' ').next() {
            Some("Ring") => (80.0, 100.0),
            Some("Boulevard") => (60.0, 75.0),
            Some("Avenue") => (50.0, 65.0),
            _ => (35.0, 50.0),
        };
        free_flow.push(rng.gen_range::<f64, _>(lo..hi).min(max_speed));
        sensitivity.push(rng.gen_range(0.5..1.0));
    }
    DiurnalProfile {
        free_flow,
        sensitivity,
        dips: vec![
            RushDip {
                center_hour: 8.5,
                width_hours: 2.0,
                depth: 0.55,
            },
            RushDip {
                center_hour: 18.0,
                width_hours: 2.5,
                depth: 0.6,
            },
        ],
        weekend_scale: 0.4,
    }
}

/// Congestion level from the ratio of current to free-flow speed.
pub fn congestion_level(ratio: f64) -> u8 {
    if ratio >= 0.75 {
        1
    } else if ratio >= 0.5 {
        2
    } else if ratio >= 0.25 {
        3
    } else {
        CONGESTION_LEVELS
    }
}

/// Multiplicative slowdown on every road from the events active at `t`.
pub fn event_factors(graph: &RoadGraph, events: &[EventSpec], t: NaiveDateTime, hop_decay: f64) -> Vec<f64> {
    let mut factors = vec![1.0; graph.n_roads()];
    for ev in events {
        let ramp = ev.ramp(t);
        if ramp == 0.0 || ev.severity == 0.0 {
            continue;
        }
        match ev.epicenter {
            None => {
                for f in &mut factors {
                    *f *= 1.0 - ev.severity * ramp;
                }
            }
            Some(center) => {
                for (road, hops) in graph.hop_distances(center).into_iter().enumerate() {
                    if let Some(h) = hops.filter(|h| *h <= ev.hop_radius) {
                        factors[road] *= 1.0 - ev.severity * hop_decay.powi(h as i32) * ramp;
                    }
                }
            }
        }
    }
    factors
}

/// Ground-truth traffic state at `t`.
pub fn simulate_interval<R: Rng>(
    graph: &RoadGraph,
    profiles: &DiurnalProfile,
    events: &[EventSpec],
    t: NaiveDateTime,
    rng: &mut R,
    params: &SimParams,
) -> TrafficSnapshot {
    let n = graph.n_roads();
    let factors = event_factors(graph, events, t, params.hop_decay);
    let mut speeds = Vec::with_capacity(n);
    let mut congestion = Vec::with_capacity(n);
    let mut travel_times = Vec::with_capacity(n);
    for road in 0..n {
        let ff = profiles.free_flow[road];
        let noise = if params.noise_std > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            params.noise_std * z
        } else {
            0.0
        };
        let speed = (ff * profiles.factor(road, t) * factors[road] * (1.0 + noise))
            .max(MIN_SPEED)
            .min(params.max_speed);
        speeds.push(speed);
        congestion.push(congestion_level(speed / ff));
        travel_times.push(graph.roads[road].length_m / (speed / 3.6));
    }
    TrafficSnapshot {
        timestamp: Some(t),
        speeds,
        congestion,
        travel_times,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMention {
    pub kind: EventKind,
    /// road name; `None` for network-wide events
    pub road: Option<String>,
    pub severity_class: SeverityClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub timestamp: NaiveDateTime,
    pub events: Vec<EventMention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub text: String,
    pub structured: StructuredPrompt,
}

impl TextPrompt {
    pub fn from_structured(structured: StructuredPrompt) -> Self {
        Self {
            text: render_structured(&structured),
            structured,
        }
    }
}

pub fn render_structured(s: &StructuredPrompt) -> String {
    let day = WEEKDAYS[s.timestamp.weekday().num_days_from_monday() as usize];
    let mut text = format!(
        "{}{}, {:02}:{:02}.",
        day[..1].to_uppercase(),
        &day[1..],
        s.timestamp.hour(),
        s.timestamp.minute()
    );
    for ev in &s.events {
        let place = ev.road.as_deref().unwrap_or("the whole network");
        text.push_str(&format!(
            " A {} {} on {}.",
            ev.severity_class.word(),
            ev.kind.phrase(),
            place
        ));
    }
    text
}

/// Prompt for `t` mentioning every event in `events` (all assumed active),
/// one clause per event ordered by epicenter id, network-wide events last.
pub fn render_text(graph: &RoadGraph, t: NaiveDateTime, events: &[EventSpec]) -> TextPrompt {
    let mut ordered: Vec<&EventSpec> = events.iter().collect();
    ordered.sort_by_key(|e| (e.epicenter.unwrap_or(usize::MAX), e.kind));
    let mentions = ordered
        .into_iter()
        .map(|e| EventMention {
            kind: e.kind,
            road: e.epicenter.map(|r| graph.roads[r].name.clone()),
            severity_class: SeverityClass::of(e.severity),
        })
        .collect();
    TextPrompt::from_structured(StructuredPrompt {
        timestamp: t,
        events: mentions,
    })
}

/// Parse a prompt produced by [`render_structured`]. The date is anchored to
/// the week of `week_of` since prompts only carry the weekday.
pub fn parse_prompt(text: &str, week_of: NaiveDate) -> Option<StructuredPrompt> {
    let mut sentences = text.split(". ").map(|s| s.trim().trim_end_matches('.'));
    let head = sentences.next()?;
    let (day, clock) = head.split_once(", ")?;
    let weekday = WEEKDAYS.iter().position(|w| w.eq_ignore_ascii_case(day))?;
    let (h, m) = clock.split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    let monday = week_of - Duration::days(i64::from(week_of.weekday().num_days_from_monday()));
    let date = monday + Duration::days(weekday as i64);
    let timestamp = date.and_hms_opt(h, m, 0)?;
    let mut events = Vec::new();
    for clause in sentences {
        let rest = clause.strip_prefix("A ")?;
        let (class, rest) = rest.split_once(' ')?;
        let severity_class = SeverityClass::from_word(class)?;
        let (phrase, place) = rest.split_once(" on ")?;
        let kind = EventKind::from_phrase(phrase)?;
        let road = (place != "the whole network").then(|| place.to_string());
        events.push(EventMention {
            kind,
            road,
            severity_class,
        });
    }
    Some(StructuredPrompt { timestamp, events })
}

/// A generated network with its ground-truth dynamics.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub graph: RoadGraph,
    pub profiles: DiurnalProfile,
    pub params: SimParams,
}

impl Simulator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let graph = generate_network(config.seed, config.n_roads)?;
        let profiles = generate_profiles(config.seed, &graph, config.max_speed);
        Ok(Self {
            graph,
            profiles,
            params: SimParams::from(config),
        })
    }

    /// Simulate `t` and describe it, mentioning every event active at `t`.
    pub fn pair<R: Rng>(&self, events: &[EventSpec], t: NaiveDateTime, rng: &mut R) -> PairRecord {
        let snapshot = simulate_interval(&self.graph, &self.profiles, events, t, rng, &self.params);
        let active: Vec<EventSpec> = events.iter().filter(|e| e.is_active(t)).cloned().collect();
        let prompt = render_text(&self.graph, t, &active);
        PairRecord::new(prompt, snapshot)
    }

    /// Seeded Poisson draw of the events of one day, clipped to that day.
    pub fn draw_events(&self, config: &ScenarioConfig, day: NaiveDate, rng: &mut StreamRng) -> Vec<EventSpec> {
        let count = if config.events_per_day > 0.0 {
            Poisson::new(config.events_per_day)
                .map(|p| p.sample(rng) as usize)
                .unwrap_or(0)
        } else {
            0
        };
        let interval = config.sample_interval_min;
        let slots = 1440 / interval;
        let midnight = day.and_hms_opt(0, 0, 0).unwrap();
        let mut events = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = EventKind::ALL[rng.gen_range(0..EventKind::ALL.len())];
            let epicenter = (kind != EventKind::Weather).then(|| rng.gen_range(0..self.graph.n_roads()));
            let severity = rng.gen_range(0.3..=1.0);
            let start_slot = rng.gen_range(0..slots);
            let start = midnight + Duration::minutes(i64::from(start_slot * interval));
            let wanted = rng.gen_range(30..=180u32);
            let left = 1440 - start_slot * interval;
            let hop_radius = rng.gen_range(0..=2);
            events.push(EventSpec {
                kind,
                epicenter,
                severity,
                start,
                duration_min: wanted.min(left),
                hop_radius,
            });
        }
        events
    }
}

/// One line of `pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub timestamp: NaiveDateTime,
    pub text: String,
    pub structured: StructuredPrompt,
    pub speeds: Vec<f64>,
    pub congestion: Vec<u8>,
    pub travel_times: Vec<f64>,
}

impl PairRecord {
    pub fn new(prompt: TextPrompt, snapshot: TrafficSnapshot) -> Self {
        Self {
            timestamp: prompt.structured.timestamp,
            text: prompt.text,
            structured: prompt.structured,
            speeds: snapshot.speeds,
            congestion: snapshot.congestion,
            travel_times: snapshot.travel_times,
        }
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot {
            timestamp: Some(self.timestamp),
            speeds: self.speeds.clone(),
            congestion: self.congestion.clone(),
            travel_times: self.travel_times.clone(),
        }
    }

    pub fn prompt(&self) -> TextPrompt {
        TextPrompt {
            text: self.text.clone(),
            structured: self.structured.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub n_roads: usize,
    pub n_pairs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub grid_side: usize,
}

/// Everything a training run needs, as stored in a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: RoadGraph,
    pub scaler: FeatureScaler,
    pub vocab: Vocabulary,
    pub pairs: Vec<PairRecord>,
    pub split: Split,
    pub manifest: Manifest,
}

pub const GRAPH_FILE: &str = "graph.json";
pub const SCALER_FILE: &str = "scaler.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ADJACENCY_FILE: &str = "adjacency.bin";

/// Generate the full dataset for `config`. Days are simulated independently
/// from per-day streams, so the result does not depend on thread count.
pub fn build_dataset(config: &ScenarioConfig) -> Result<Dataset> {
    let sim = Simulator::new(config)?;
    let per_day = config.intervals_per_day();
    let days: Vec<Vec<PairRecord>> = (0..config.n_days)
        .into_par_iter()
        .map(|d| {
            let day = config.start_date + Duration::days(d as i64);
            let mut event_rng = stream(derive_seed(config.seed, 1), d as u64);
            let mut noise_rng = stream(derive_seed(config.seed, 2), d as u64);
            let events = sim.draw_events(config, day, &mut event_rng);
            let midnight = day.and_hms_opt(0, 0, 0).unwrap();
            (0..per_day)
                .map(|k| {
                    let t = midnight + Duration::minutes((k as u32 * config.sample_interval_min) as i64);
                    sim.pair(&events, t, &mut noise_rng)
                })
                .collect()
        })
        .collect();
    let n_train_days = ((config.n_days as f64) * config.train_fraction).floor() as usize;
    let n_train_days = if config.n_days > 1 {
        n_train_days.clamp(1, config.n_days - 1)
    } else {
        config.n_days
    };
    let pairs: Vec<PairRecord> = days.into_iter().flatten().collect();
    let boundary = n_train_days * per_day;
    let split = Split {
        train: (0..boundary).collect(),
        test: (boundary..pairs.len()).collect(),
    };
    Dataset::assemble(config.clone(), sim.graph, pairs, split)
}

impl Dataset {
    /// Bundle pairs with the default scaler and closed vocabulary.
    pub fn assemble(config: ScenarioConfig, graph: RoadGraph, pairs: Vec<PairRecord>, split: Split) -> Result<Self> {
        let n = graph.n_roads();
        if let Some(bad) = split.train.iter().chain(&split.test).find(|i| **i >= pairs.len()) {
            return Err(invalid(format!("split index {bad} out of range")));
        }
        let manifest = Manifest {
            format_version: 1,
            config_hash: config.hash(),
            config,
            n_roads: n,
            n_pairs: pairs.len(),
            n_train: split.train.len(),
            n_test: split.test.len(),
            grid_side: grid_side(n),
        };
        Ok(Self {
            graph,
            scaler: FeatureScaler {
                speed: crate::road::ChannelScale {
                    max: manifest.config.max_speed,
                    ..FeatureScaler::default().speed
                },
                ..FeatureScaler::default()
            },
            vocab: Vocabulary::closed(),
            pairs,
            split,
            manifest,
        })
    }

    pub fn hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn train_pairs(&self) -> impl Iterator<Item = &PairRecord> {
        self.split.train.iter().map(|i| &self.pairs[*i])
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = &PairRecord> {
        self.split.test.iter().map(|i| &self.pairs[*i])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join(GRAPH_FILE), &self.graph)?;
        write_json(&dir.join(SCALER_FILE), &self.scaler)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        let mut lines = String::new();
        for p in &self.pairs {
            lines.push_str(&serde_json::to_string(p).map_err(json_err(dir.join(PAIRS_FILE)))?);
            lines.push('\n');
        }
        let pairs_path = dir.join(PAIRS_FILE);
        fs::write(&pairs_path, lines).map_err(io_err(&pairs_path))?;
        let adj = AdjacencyMatrix::from_graph(&self.graph)?;
        build_normalized_adjacency(&adj, pad_target(self.graph.n_roads()))?.save(&dir.join(ADJACENCY_FILE))?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let graph: RoadGraph = read_json(&dir.join(GRAPH_FILE))?;
        graph.validate()?;
        let scaler: FeatureScaler = read_json(&dir.join(SCALER_FILE))?;
        scaler.validate()?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let split: Split = read_json(&dir.join(SPLIT_FILE))?;
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let pairs_path = dir.join(PAIRS_FILE);
        let text = fs::read_to_string(&pairs_path).map_err(io_err(&pairs_path))?;
        let pairs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(json_err(&pairs_path)))
            .collect::<Result<Vec<PairRecord>>>()?;
        if pairs.len() != manifest.n_pairs || graph.n_roads() != manifest.n_roads {
            return Err(Error::Structure(format!(
                "{}: manifest disagrees with pairs or graph",
                dir.display()
            )));
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Structure("manifest config hash is stale".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            p.snapshot()
                .validate(graph.n_roads(), scaler.max_speed())
                .map_err(|e| Error::Structure(format!("pair {i}: {e}")))?;
        }
        Ok(Self {
            graph,
            scaler,
            vocab,
            pairs,
            split,
            manifest,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    fs::write(path, s).map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(json_err(path))
}

/// Where a dataset directory keeps a given file.
pub fn dataset_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Sixteen-prompt probe set on a 60-road network: eight time-only prompts
/// and one serious accident at each of the same eight times, alternating
/// between two roads far apart. Used to check that training can memorize
/// prompts and that an event clause moves speed at the named road.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub dataset: Dataset,
    pub simulator: Simulator,
    pub roads: [usize; 2],
    pub times: Vec<NaiveDateTime>,
}

/// One held-out prompt: the event of `road` at a time it was never paired with.
#[derive(Debug, Clone)]
pub struct ProbeTrial {
    pub road: usize,
    pub time: NaiveDateTime,
    pub event_text: String,
    pub time_only_text: String,
}

impl ProbeSet {
    pub const N_ROADS: usize = 60;

    pub fn build(seed: u64) -> Result<Self> {
        let mut config = ScenarioConfig::new(seed, Self::N_ROADS, 1);
        config.events_per_day = 0.0;
        config.train_fraction = 1.0;
        let simulator = Simulator::new(&config)?;
        let side = grid_side(Self::N_ROADS);
        let roads = [2 * side + 2, 5 * side + 5];
        let hours = [(0, 1, 0), (1, 5, 0), (2, 8, 0), (3, 10, 0), (4, 13, 0), (5, 16, 0), (0, 18, 0), (2, 21, 0)];
        let times: Vec<NaiveDateTime> = hours
            .iter()
            .map(|(d, h, m)| {
                (config.start_date + Duration::days(*d))
                    .and_hms_opt(*h, *m, 0)
                    .expect("valid clock time")
            })
            .collect();
        let mut pairs = Vec::with_capacity(16);
        for (i, t) in times.iter().enumerate() {
            let mut rng = stream(derive_seed(seed, 3), i as u64);
            pairs.push(simulator.pair(&[], *t, &mut rng));
            let ev = Self::event(roads[i % 2], *t);
            pairs.push(simulator.pair(&[ev], *t, &mut rng));
        }
        let split = Split {
            train: (0..pairs.len()).collect(),
            test: (0..pairs.len()).collect(),
        };
        let dataset = Dataset::assemble(config, simulator.graph.clone(), pairs, split)?;
        Ok(Self {
            dataset,
            simulator,
            roads,
            times,
        })
    }

    fn event(road: usize, t: NaiveDateTime) -> EventSpec {
        EventSpec {
            kind: EventKind::Accident,
            epicenter: Some(road),
            severity: 0.9,
            start: t - Duration::minutes(30),
            duration_min: 60,
            hop_radius: 1,
        }
    }

    /// Each road's event at the other road's times.
    pub fn trials(&self) -> Vec<ProbeTrial> {
        let mut out = Vec::new();
        for (i, t) in self.times.iter().enumerate() {
            let road = self.roads[(i + 1) % 2];
            let graph = &self.simulator.graph;
            out.push(ProbeTrial {
                road,
                time: *t,
                event_text: render_text(graph, *t, &[Self::event(road, *t)]).text,
                time_only_text: render_text(graph, *t, &[]).text,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, UNK};

    fn at(date: (i32, u32, u32), h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(date.0, date.1, date.2)
            .unwrap()
            .and_hms_opt(h, m, 0)
            .unwrap()
    }

    fn quiet(seed: u64, n: usize) -> Simulator {
        let mut cfg = ScenarioConfig::new(seed, n, 1);
        cfg.noise_std = 0.0;
        Simulator::new(&cfg).unwrap()
    }

    #[test]
    fn small_network_is_connected() {
        let g = generate_network(1, 4).unwrap();
        assert_eq!(g.n_roads(), 4);
        assert!(g.edges.len() >= 3);
        g.validate().unwrap();
    }

    #[test]
    fn network_is_deterministic() {
        assert_eq!(
            generate_network(9, 60).unwrap().to_json(),
            generate_network(9, 60).unwrap().to_json()
        );
        assert_ne!(
            generate_network(9, 60).unwrap().to_json(),
            generate_network(10, 60).unwrap().to_json()
        );
    }

    #[test]
    fn sixty_roads_make_an_eight_by_eight_grid() {
        let g = generate_network(1, 60).unwrap();
        assert_eq!(pad_target(g.n_roads()), 64);
        assert_eq!(grid_side(g.n_roads()), 8);
    }

    #[test]
    fn large_network_names_are_unique() {
        let g = generate_network(3, 1260).unwrap();
        let mut names: Vec<_> = g.roads.iter().map(|r| r.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 1260);
    }

    #[test]
    fn three_am_is_free_flow() {
        let sim = quiet(1, 60);
        let t = at((2022, 1, 4), 3, 0);
        let s = simulate_interval(&sim.graph, &sim.profiles, &[], t, &mut stream(0, 0), &sim.params);
        for i in 0..60 {
            assert_eq!(s.speeds[i], sim.profiles.free_flow[i]);
            assert_eq!(s.congestion[i], 1);
        }
    }

    #[test]
    fn zero_severity_matches_baseline() {
        let sim = quiet(2, 30);
        let t = at((2022, 1, 4), 17, 40);
        let ev = EventSpec {
            kind: EventKind::Accident,
            epicenter: Some(5),
            severity: 0.0,
            start: at((2022, 1, 4), 17, 0),
            duration_min: 120,
            hop_radius: 2,
        };
        let base = simulate_interval(&sim.graph, &sim.profiles, &[], t, &mut stream(0, 0), &sim.params);
        let with = simulate_interval(&sim.graph, &sim.profiles, &[ev], t, &mut stream(0, 0), &sim.params);
        assert_eq!(base, with);
    }

    #[test]
    fn mid_window_accident_factor() {
        let sim = quiet(3, 30);
        let t = at((2022, 1, 4), 13, 0);
        let ev = EventSpec {
            kind: EventKind::Accident,
            epicenter: Some(7),
            severity: 0.8,
            start: at((2022, 1, 4), 12, 0),
            duration_min: 120,
            hop_radius: 1,
        };
        let base = simulate_interval(&sim.graph, &sim.profiles, &[], t, &mut stream(0, 0), &sim.params);
        let with = simulate_interval(&sim.graph, &sim.profiles, &[ev], t, &mut stream(0, 0), &sim.params);
        assert!((with.speeds[7] - 0.2 * base.speeds[7]).abs() < 1e-12);
        let hops = sim.graph.hop_distances(7);
        for r in 0..30 {
            match hops[r] {
                Some(1) => assert!((with.speeds[r] - 0.6 * base.speeds[r]).abs() < 1e-12),
                Some(h) if h > 1 => assert_eq!(with.speeds[r], base.speeds[r]),
                _ => {}
            }
        }
    }

    #[test]
    fn ramp_edges() {
        let ev = EventSpec {
            kind: EventKind::Closure,
            epicenter: Some(0),
            severity: 1.0,
            start: at((2022, 1, 4), 10, 0),
            duration_min: 100,
            hop_radius: 0,
        };
        assert_eq!(ev.ramp(at((2022, 1, 4), 10, 0)), 0.0);
        assert!((ev.ramp(at((2022, 1, 4), 10, 10)) - 0.5).abs() < 1e-12);
        assert_eq!(ev.ramp(at((2022, 1, 4), 10, 50)), 1.0);
        assert!((ev.ramp(at((2022, 1, 4), 11, 30)) - 0.5).abs() < 1e-12);
        assert_eq!(ev.ramp(at((2022, 1, 4), 11, 40)), 0.0);
    }

    #[test]
    fn render_examples() {
        let g = generate_network(1, 60).unwrap();
        let p = render_text(&g, at((2022, 1, 4), 1, 0), &[]);
        assert_eq!(p.text, "Tuesday, 01:00.");
        assert!(p.structured.events.is_empty());

        let mut g2 = g.clone();
        g2.roads[3].name = "Ring 2 East".into();
        let ev = EventSpec {
            kind: EventKind::Accident,
            epicenter: Some(3),
            severity: 0.5,
            start: at((2022, 1, 7), 18, 0),
            duration_min: 60,
            hop_radius: 1,
        };
        let p = render_text(&g2, at((2022, 1, 7), 18, 20), &[ev.clone()]);
        assert_eq!(p.text, "Friday, 18:20. A general traffic accident on Ring 2 East.");

        let second = EventSpec {
            kind: EventKind::Closure,
            epicenter: Some(1),
            severity: 0.9,
            ..ev
        };
        let p = render_text(&g2, at((2022, 1, 7), 18, 20), &[ev.clone(), second]);
        let name1 = &g2.roads[1].name;
        assert_eq!(
            p.text,
            format!("Friday, 18:20. A serious road closure on {name1}. A general traffic accident on Ring 2 East.")
        );
    }

    #[test]
    fn parse_inverts_render() {
        let g = generate_network(4, 60).unwrap();
        let t = at((2022, 1, 8), 9, 36);
        let events = vec![
            EventSpec {
                kind: EventKind::Gathering,
                epicenter: Some(10),
                severity: 0.2,
                start: t,
                duration_min: 30,
                hop_radius: 0,
            },
            EventSpec {
                kind: EventKind::Weather,
                epicenter: None,
                severity: 0.7,
                start: t,
                duration_min: 30,
                hop_radius: 0,
            },
        ];
        let p = render_text(&g, t, &events);
        assert_eq!(parse_prompt(&p.text, t.date()).unwrap(), p.structured);
    }

    #[test]
    fn template_prompts_have_no_unknown_tokens() {
        let vocab = Vocabulary::closed();
        let mut cfg = ScenarioConfig::new(11, 60, 2);
        cfg.events_per_day = 20.0;
        let ds = build_dataset(&cfg).unwrap();
        for p in &ds.pairs {
            let t = tokenize(&p.text, &vocab, 64).unwrap();
            assert!(!t.ids.contains(&UNK), "{}", p.text);
        }
    }

    #[test]
    fn dataset_counts_and_split() {
        let cfg = ScenarioConfig::new(5, 20, 2);
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.pairs.len(), 720);
        assert_eq!(ds.split.train, (0..360).collect::<Vec<_>>());
        assert_eq!(ds.split.test, (360..720).collect::<Vec<_>>());
        assert_eq!(build_dataset(&cfg).unwrap().manifest, ds.manifest);
    }

    #[test]
    fn no_events_means_time_only_prompts() {
        let mut cfg = ScenarioConfig::new(6, 16, 1);
        cfg.events_per_day = 0.0;
        let ds = build_dataset(&cfg).unwrap();
        assert!(ds.pairs.iter().all(|p| p.structured.events.is_empty()));
    }

    #[test]
    fn probe_set_layout() {
        let p = ProbeSet::build(0).unwrap();
        assert_eq!(p.dataset.pairs.len(), 16);
        let mut texts: Vec<_> = p.dataset.pairs.iter().map(|x| x.text.clone()).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 16);
        let hops = p.simulator.graph.hop_distances(p.roads[0]);
        assert!(hops[p.roads[1]].unwrap() >= 3);
        let trials = p.trials();
        assert_eq!(trials.len(), 8);
        for tr in &trials {
            assert!(!texts.contains(&tr.event_text));
            assert!(texts.contains(&tr.time_only_text));
        }
        let ev = &p.dataset.pairs[1];
        assert!(ev.speeds[p.roads[0]] < 0.3 * p.dataset.pairs[0].speeds[p.roads[0]]);
    }

    #[test]
    fn congestion_thresholds() {
        assert_eq!(congestion_level(1.2), 1);
        assert_eq!(congestion_level(0.75), 1);
        assert_eq!(congestion_level(0.7499), 2);
        assert_eq!(congestion_level(0.5), 2);
        assert_eq!(congestion_level(0.25), 3);
        assert_eq!(congestion_level(0.1), 4);
    }

    #[test]
    fn config_validation() {
        let mut c = ScenarioConfig::new(1, 3, 1);
        assert!(c.validate().is_err());
        c.n_roads = 4;
        c.sample_interval_min = 7;
        assert!(c.validate().is_err());
        c.sample_interval_min = 4;
        assert!(c.validate().is_ok());
    }
}

//! Road graphs, normalized adjacency, and the traffic-image layout.
//!
//! A network of `N` roads is padded with isolated "empty roads" up to the
//! next perfect square `N' = S*S`, so per-road features can be viewed as an
//! `S x S` image with one pixel per road (row-major by road id). The three
//! feature channels are speed, congestion level and travel time, each mapped
//! to `[-1, 1]` by a [`FeatureScaler`].

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};

pub const CHANNELS: usize = 3;
pub const SPEED: usize = 0;
pub const CONGESTION: usize = 1;
pub const TRAVEL_TIME: usize = 2;
pub const CONGESTION_LEVELS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub road_id: usize,
    pub name: String,
    pub length_m: f64,
    pub polyline: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub roads: Vec<Road>,
    pub edges: Vec<[usize; 2]>,
}

impl RoadGraph {
    pub fn n_roads(&self) -> usize {
        self.roads.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.roads.len();
        if n == 0 {
            return Err(invalid("graph has no roads"));
        }
        for (i, r) in self.roads.iter().enumerate() {
            if r.road_id != i {
                return Err(invalid(format!("road ids not contiguous at index {i}")));
            }
            if r.name.trim().is_empty() {
                return Err(invalid(format!("road {i} has an empty name")));
            }
            if !(r.length_m > 0.0) {
                return Err(invalid(format!("road {i} has non-positive length")));
            }
        }
        for &[a, b] in &self.edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) references a missing road")));
            }
            if a == b {
                return Err(invalid(format!("self-loop on road {a}")));
            }
        }
        if self.hop_distances(0).iter().any(Option::is_none) {
            return Err(invalid("graph is not connected"));
        }
        Ok(())
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.roads.len()];
        for &[a, b] in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Breadth-first hop counts from `source`; `None` for unreachable roads.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut dist = vec![None; self.roads.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn road_by_name(&self, name: &str) -> Option<&Road> {
        self.roads.iter().find(|r| r.name.eq_ignore_ascii_case(name))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

/// Dense 0/1 adjacency of the unpadded graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn from_graph(graph: &RoadGraph) -> Result<Self> {
        let n = graph.n_roads();
        let mut entries = vec![0.0; n * n];
        for &[a, b] in &graph.edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(invalid(format!("self-loop on road {a}")));
            }
            entries[a * n + b] = 1.0;
            entries[b * n + a] = 1.0;
        }
        Ok(Self { n, entries })
    }

    /// Build from a dense row-major matrix, checking it describes a simple
    /// undirected graph.
    pub fn from_dense(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(invalid(format!("{} entries for {n}x{n}", entries.len())));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(invalid(format!("self-loop at {i}")));
            }
            for j in 0..n {
                let v = entries[i * n + j];
                if v != 0.0 && v != 1.0 {
                    return Err(invalid(format!("entry ({i}, {j}) = {v} is not 0/1")));
                }
                if v != entries[j * n + i] {
                    return Err(invalid(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.entries[i * self.n..(i + 1) * self.n].iter().sum()
    }
}

/// `D^-1/2 (A + I) D^-1/2` over the padded node set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n_padded: usize,
    entries: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n_padded(&self) -> usize {
        self.n_padded
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n_padded + j]
    }

    /// 8-byte little-endian `n_padded` header followed by row-major `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.entries.len());
        out.extend_from_slice(&(self.n_padded as u64).to_le_bytes());
        for v in &self.entries {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Structure("adjacency file shorter than header".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != n * n * 8 {
            return Err(Error::Structure(format!(
                "adjacency body has {} bytes, expected {}",
                body.len(),
                n * n * 8
            )));
        }
        let entries = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n_padded: n,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Normalize `adj` after padding it with isolated nodes up to `n_padded`.
pub fn build_normalized_adjacency(adj: &AdjacencyMatrix, n_padded: usize) -> Result<NormalizedAdjacency> {
    let n = adj.n();
    if n_padded < n {
        return Err(invalid(format!("n_padded {n_padded} < {n} roads")));
    }
    // degree of A + I; padded nodes only have their self-loop
    let inv_sqrt: Vec<f64> = (0..n_padded)
        .map(|i| {
            let d = if i < n { adj.degree(i) } else { 0.0 } + 1.0;
            1.0 / d.sqrt()
        })
        .collect();
    let mut entries = vec![0.0; n_padded * n_padded];
    for i in 0..n_padded {
        entries[i * n_padded + i] = inv_sqrt[i] * inv_sqrt[i];
        if i < n {
            for j in 0..n {
                if adj.get(i, j) != 0.0 {
                    entries[i * n_padded + j] = inv_sqrt[i] * inv_sqrt[j];
                }
            }
        }
    }
    Ok(NormalizedAdjacency { n_padded, entries })
}

/// Smallest perfect square `>= n`.
pub fn pad_target(n: usize) -> usize {
    let s = grid_side(n);
    s * s
}

/// Side length of the square traffic image for `n` roads.
pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 1 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s.max(1)
}

/// Per-road traffic state at one instant, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSnapshot {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<NaiveDateTime>,
    pub speeds: Vec<f64>,
    pub congestion: Vec<u8>,
    pub travel_times: Vec<f64>,
}

impl TrafficSnapshot {
    pub fn n_roads(&self) -> usize {
        self.speeds.len()
    }

    pub fn validate(&self, n_roads: usize, max_speed: f64) -> Result<()> {
        if self.speeds.len() != n_roads
            || self.congestion.len() != n_roads
            || self.travel_times.len() != n_roads
        {
            return Err(invalid(format!(
                "snapshot has {}/{}/{} records, expected {n_roads}",
                self.speeds.len(),
                self.congestion.len(),
                self.travel_times.len()
            )));
        }
        for i in 0..n_roads {
            let s = self.speeds[i];
            if !(0.0..=max_speed).contains(&s) {
                return Err(invalid(format!("road {i}: speed {s} outside [0, {max_speed}]")));
            }
            if !(1..=CONGESTION_LEVELS).contains(&self.congestion[i]) {
                return Err(invalid(format!(
                    "road {i}: congestion level {}",
                    self.congestion[i]
                )));
            }
            if !(self.travel_times[i] > 0.0) {
                return Err(invalid(format!("road {i}: travel time must be positive")));
            }
        }
        Ok(())
    }

    /// Value of `channel` for road `i` in physical units.
    pub fn channel_value(&self, channel: usize, i: usize) -> f64 {
        match channel {
            SPEED => self.speeds[i],
            CONGESTION => f64::from(self.congestion[i]),
            _ => self.travel_times[i],
        }
    }
}

/// Padded `3 x H x W` traffic image, channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficGrid {
    pub height: usize,
    pub width: usize,
    /// `values[(c * height + row) * width + col]`
    pub values: Vec<f64>,
    /// true where the pixel is a real road
    pub mask: Vec<bool>,
}

impl TrafficGrid {
    /// Wrap raw channel-first values for a network of `n_roads`, zeroing the
    /// padded cells.
    pub fn from_values(side: usize, n_roads: usize, mut values: Vec<f64>) -> Result<Self> {
        let cells = side * side;
        if values.len() != CHANNELS * cells {
            return Err(Error::Structure(format!(
                "{} values for a {side}x{side}x{CHANNELS} grid",
                values.len()
            )));
        }
        if n_roads > cells {
            return Err(Error::Structure(format!("{n_roads} roads exceed {cells} cells")));
        }
        let mask: Vec<bool> = (0..cells).map(|i| i < n_roads).collect();
        for c in 0..CHANNELS {
            for i in n_roads..cells {
                values[c * cells + i] = 0.0;
            }
        }
        Ok(Self {
            height: side,
            width: side,
            values,
            mask,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn n_roads(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn get(&self, channel: usize, cell: usize) -> f64 {
        self.values[channel * self.cells() + cell]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Linear,
    LogLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub min: f64,
    pub max: f64,
    pub transform: Transform,
}

impl ChannelScale {
    fn bounds(&self) -> (f64, f64) {
        match self.transform {
            Transform::Linear => (self.min, self.max),
            Transform::LogLinear => (self.min.ln(), self.max.ln()),
        }
    }

    /// Map a physical value into `[-1, 1]`; the flag reports clamping.
    pub fn normalize(&self, v: f64) -> (f64, bool) {
        let clamped = v.clamp(self.min, self.max);
        let (lo, hi) = self.bounds();
        let x = match self.transform {
            Transform::Linear => clamped,
            Transform::LogLinear => clamped.ln(),
        };
        (2.0 * (x - lo) / (hi - lo) - 1.0, clamped != v)
    }

    /// Inverse of [`ChannelScale::normalize`], clamping the input to `[-1, 1]`.
    pub fn denormalize(&self, z: f64) -> f64 {
        let z = z.clamp(-1.0, 1.0);
        let (lo, hi) = self.bounds();
        let x = lo + (z + 1.0) * 0.5 * (hi - lo);
        let v = match self.transform {
            Transform::Linear => x,
            Transform::LogLinear => x.exp(),
        };
        v.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub speed: ChannelScale,
    pub congestion: ChannelScale,
    pub travel_time: ChannelScale,
}

impl Default for FeatureScaler {
    fn default() -> Self {
        Self {
            speed: ChannelScale {
                min: 0.0,
                max: 120.0,
                transform: Transform::Linear,
            },
            congestion: ChannelScale {
                min: 1.0,
                max: f64::from(CONGESTION_LEVELS),
                transform: Transform::Linear,
            },
            travel_time: ChannelScale {
                min: 1.0,
                max: 1800.0,
                transform: Transform::LogLinear,
            },
        }
    }
}

impl FeatureScaler {
    pub fn channel(&self, c: usize) -> &ChannelScale {
        match c {
            SPEED => &self.speed,
            CONGESTION => &self.congestion,
            _ => &self.travel_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..CHANNELS {
            let s = self.channel(c);
            if !(s.max > s.min) {
                return Err(invalid(format!("channel {c}: max must exceed min")));
            }
            if s.transform == Transform::LogLinear && !(s.min > 0.0) {
                return Err(invalid(format!("channel {c}: log scale needs min > 0")));
            }
        }
        Ok(())
    }

    pub fn max_speed(&self) -> f64 {
        self.speed.max
    }

    pub fn decode_congestion(&self, z: f64) -> u8 {
        let level = self.congestion.denormalize(z).round();
        level.clamp(1.0, f64::from(CONGESTION_LEVELS)) as u8
    }
}

/// Lay a snapshot out as a padded traffic image. Returns the grid and the
/// number of values that had to be clamped into the scaler range.
pub fn pack_grid(snapshot: &TrafficSnapshot, scaler: &FeatureScaler) -> Result<(TrafficGrid, usize)> {
    let n = snapshot.n_roads();
    if n == 0 || snapshot.congestion.len() != n || snapshot.travel_times.len() != n {
        return Err(invalid("snapshot channels have inconsistent lengths"));
    }
    let side = grid_side(n);
    let cells = side * side;
    let mut values = vec![0.0; CHANNELS * cells];
    let mut clamped = 0;
    for c in 0..CHANNELS {
        let scale = scaler.channel(c);
        for i in 0..n {
            let (z, hit) = scale.normalize(snapshot.channel_value(c, i));
            clamped += usize::from(hit);
            values[c * cells + i] = z;
        }
    }
    Ok((TrafficGrid::from_values(side, n, values)?, clamped))
}

/// Decode the real-road pixels of `grid` back into physical units.
pub fn unpack_grid(grid: &TrafficGrid, scaler: &FeatureScaler, n_roads: usize) -> Result<TrafficSnapshot> {
    let cells = grid.cells();
    if grid.values.len() != CHANNELS * cells || grid.mask.len() != cells {
        return Err(Error::Structure("grid buffers do not match its dimensions".into()));
    }
    let real = grid.n_roads();
    if real != n_roads || grid.mask.iter().take(n_roads).any(|m| !m) {
        return Err(Error::Structure(format!(
            "grid mask marks {real} roads, expected the first {n_roads}"
        )));
    }
    let speeds = (0..n_roads)
        .map(|i| scaler.speed.denormalize(grid.get(SPEED, i)))
        .collect();
    let congestion = (0..n_roads)
        .map(|i| scaler.decode_congestion(grid.get(CONGESTION, i)))
        .collect();
    let travel_times = (0..n_roads)
        .map(|i| scaler.travel_time.denormalize(grid.get(TRAVEL_TIME, i)))
        .collect();
    Ok(TrafficSnapshot {
        timestamp: None,
        speeds,
        congestion,
        travel_times,
    })
}

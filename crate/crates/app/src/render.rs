//! SVG traffic maps: one polyline per road coloured by a single channel.

use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use ttg_core::road::{RoadGraph, TrafficSnapshot, CONGESTION_LEVELS};

use crate::error::{invalid, AppError, AppResult};

pub const SPEED_RANGE: (f64, f64) = (0.0, 120.0);
pub const TRAVEL_TIME_RANGE: (f64, f64) = (1.0, 1800.0);

const WIDTH: f64 = 760.0;
const MAP_SIDE: f64 = 680.0;
const MARGIN: f64 = 40.0;
const LEGEND_HEIGHT: f64 = 170.0;

/// Fast to slow: green, yellow, red.
const SPEED_STOPS: [(f64, [u8; 3]); 3] = [(0.0, [215, 25, 28]), (0.5, [253, 174, 97]), (1.0, [26, 150, 65])];
/// Short to long: green, yellow, red.
const TIME_STOPS: [(f64, [u8; 3]); 3] = [(0.0, [26, 150, 65]), (0.5, [253, 174, 97]), (1.0, [215, 25, 28])];
const CONGESTION_SWATCHES: [[u8; 3]; 4] = [[26, 150, 65], [166, 217, 106], [253, 174, 97], [215, 25, 28]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Speed,
    Congestion,
    TravelTime,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Speed, Channel::Congestion, Channel::TravelTime];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Speed => "speed",
            Channel::Congestion => "congestion",
            Channel::TravelTime => "travel_time",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Channel::Speed => "km/h",
            Channel::Congestion => "level",
            Channel::TravelTime => "s",
        }
    }

    /// Colour for a raw channel value on the fixed scale.
    pub fn colour(self, v: f64) -> [u8; 3] {
        match self {
            Channel::Speed => ramp(&SPEED_STOPS, speed_position(v)),
            Channel::TravelTime => ramp(&TIME_STOPS, travel_time_position(v)),
            Channel::Congestion => {
                let level = (v.round() as i64).clamp(1, i64::from(CONGESTION_LEVELS));
                CONGESTION_SWATCHES[level as usize - 1]
            }
        }
    }

    fn value(self, s: &TrafficSnapshot, road: usize) -> f64 {
        match self {
            Channel::Speed => s.speeds[road],
            Channel::Congestion => f64::from(s.congestion[road]),
            Channel::TravelTime => s.travel_times[road],
        }
    }

    fn label(self, v: f64) -> String {
        match self {
            Channel::Congestion => format!("{v:.0} {}", self.unit()),
            _ => format!("{v:.1} {}", self.unit()),
        }
    }
}

impl FromStr for Channel {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown channel {s:?}; expected speed, congestion or travel_time")))
    }
}

fn speed_position(v: f64) -> f64 {
    ((v - SPEED_RANGE.0) / (SPEED_RANGE.1 - SPEED_RANGE.0)).clamp(0.0, 1.0)
}

fn travel_time_position(v: f64) -> f64 {
    let (lo, hi) = (TRAVEL_TIME_RANGE.0.ln(), TRAVEL_TIME_RANGE.1.ln());
    ((v.max(TRAVEL_TIME_RANGE.0).ln() - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn ramp(stops: &[(f64, [u8; 3])], x: f64) -> [u8; 3] {
    for w in stops.windows(2) {
        let ((x0, c0), (x1, c1)) = (w[0], w[1]);
        if x <= x1 {
            let f = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
            let mix = |a: u8, b: u8| (f64::from(a) + f * (f64::from(b) - f64::from(a))).round() as u8;
            return [mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2])];
        }
    }
    stops[stops.len() - 1].1
}

fn hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Map from world coordinates into the square map panel, y pointing up.
struct Frame {
    min: [f64; 2],
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit(graph: &RoadGraph) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in graph.roads.iter().flat_map(|r| &r.polyline) {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        if !min[0].is_finite() {
            min = [0.0; 2];
            max = [1.0; 2];
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
        let scale = MAP_SIDE / span;
        Self {
            min,
            scale,
            height: (max[1] - min[1]) * scale,
        }
    }

    fn point(&self, p: [f64; 2]) -> (f64, f64) {
        let x = MARGIN + (p[0] - self.min[0]) * self.scale;
        let y = MARGIN + self.height - (p[1] - self.min[1]) * self.scale;
        (x, y)
    }
}

fn gradient(out: &mut String, id: &str, stops: &[(f64, [u8; 3])]) {
    let _ = writeln!(out, r#"<linearGradient id="{id}" x1="0" x2="1" y1="0" y2="0">"#);
    for (x, c) in stops {
        let _ = writeln!(out, r#"<stop offset="{:.0}%" stop-color="{}"/>"#, x * 100.0, hex(*c));
    }
    let _ = writeln!(out, "</linearGradient>");
}

fn legend(out: &mut String, top: f64, selected: Channel) {
    let bar_w = WIDTH - 2.0 * MARGIN;
    let rows = [
        (Channel::Speed, "Speed (km/h)", "0", "120"),
        (Channel::Congestion, "Congestion level", "1", "4"),
        (Channel::TravelTime, "Travel time (s, log)", "1", "1800"),
    ];
    let _ = writeln!(out, r#"<g class="legend" font-family="sans-serif" font-size="12">"#);
    for (i, (ch, title, lo, hi)) in rows.iter().enumerate() {
        let y = top + i as f64 * 52.0;
        let weight = if *ch == selected { "bold" } else { "normal" };
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN}" y="{:.1}" font-weight="{weight}">{title}</text>"#,
            y + 12.0
        );
        match ch {
            Channel::Congestion => {
                let w = bar_w / 4.0;
                for (k, c) in CONGESTION_SWATCHES.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="14" fill="{}"/>"#,
                        MARGIN + k as f64 * w,
                        y + 18.0,
                        w,
                        hex(*c)
                    );
                    let _ = writeln!(
                        out,
                        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                        MARGIN + (k as f64 + 0.5) * w,
                        y + 46.0,
                        k + 1
                    );
                }
            }
            _ => {
                let id = if *ch == Channel::Speed { "speed-scale" } else { "time-scale" };
                let _ = writeln!(
                    out,
                    r#"<rect x="{MARGIN}" y="{:.1}" width="{bar_w:.1}" height="14" fill="url(#{id})"/>"#,
                    y + 18.0
                );
                let _ = writeln!(out, r#"<text x="{MARGIN}" y="{:.1}">{lo}</text>"#, y + 46.0);
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi}</text>"#,
                    MARGIN + bar_w,
                    y + 46.0
                );
            }
        }
    }
    let _ = writeln!(out, "</g>");
}

/// Render `snapshot` over `graph`, coloured by `channel`. Output depends only
/// on the inputs.
pub fn render_map(snapshot: &TrafficSnapshot, graph: &RoadGraph, channel: Channel) -> AppResult<String> {
    let n = graph.n_roads();
    if snapshot.n_roads() != n || snapshot.congestion.len() != n || snapshot.travel_times.len() != n {
        return Err(invalid(format!(
            "snapshot covers {} roads but the graph has {n}",
            snapshot.n_roads()
        )));
    }
    let frame = Frame::fit(graph);
    let map_h = frame.height + 2.0 * MARGIN;
    let height = map_h + LEGEND_HEIGHT;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" data-channel="{}">"#,
        channel.name()
    );
    out.push_str("<defs>\n");
    gradient(&mut out, "speed-scale", &SPEED_STOPS);
    gradient(&mut out, "time-scale", &TIME_STOPS);
    out.push_str("</defs>\n");
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"<g class="roads" fill="none" stroke-width="4" stroke-linecap="round" stroke-linejoin="round">"#
    );
    for (i, road) in graph.roads.iter().enumerate() {
        let v = channel.value(snapshot, i);
        if !v.is_finite() {
            return Err(invalid(format!("road {i} has a non-finite {}", channel.name())));
        }
        let points: Vec<String> = road
            .polyline
            .iter()
            .map(|p| {
                let (x, y) = frame.point(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-road="{i}" points="{}" stroke="{}"><title>{}: {}</title></polyline>"#,
            points.join(" "),
            hex(channel.colour(v)),
            escape(&road.name),
            channel.label(v)
        );
    }
    out.push_str("</g>\n");
    legend(&mut out, map_h, channel);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_hit_their_endpoints() {
        assert_eq!(Channel::Speed.colour(0.0), SPEED_STOPS[0].1);
        assert_eq!(Channel::Speed.colour(120.0), SPEED_STOPS[2].1);
        assert_eq!(Channel::Speed.colour(500.0), SPEED_STOPS[2].1);
        assert_eq!(Channel::TravelTime.colour(1.0), TIME_STOPS[0].1);
        assert_eq!(Channel::TravelTime.colour(1800.0), TIME_STOPS[2].1);
        for level in 1..=4 {
            assert_eq!(Channel::Congestion.colour(f64::from(level)), CONGESTION_SWATCHES[level as usize - 1]);
        }
    }

    #[test]
    fn travel_time_scale_is_logarithmic() {
        let mid = (1800f64).sqrt();
        assert!((travel_time_position(mid) - 0.5).abs() < 1e-12);
        assert_eq!(Channel::TravelTime.colour(mid), TIME_STOPS[1].1);
    }

    #[test]
    fn channel_names_round_trip() {
        for c in Channel::ALL {
            assert_eq!(c.name().parse::<Channel>().unwrap(), c);
        }
        assert!("volume".parse::<Channel>().is_err());
    }

    #[test]
    fn names_are_escaped() {
        assert_eq!(escape(r#"A & B <"x">"#), "A &amp; B &lt;&quot;x&quot;&gt;");
    }
}

//! Request and response types shared by the CLI and the HTTP service.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttg_core::denoiser::Model;
use ttg_core::eval::generate_k;
use ttg_core::road::{RoadGraph, TrafficSnapshot};
use ttg_core::scenario::{parse_prompt, render_structured, render_text, Dataset, EventKind, EventSpec, StructuredPrompt};
use ttg_core::train::{load_model, sidecar_path, CheckpointMeta};

use crate::error::{invalid, runtime, AppResult};

pub const DEFAULT_SAMPLES: usize = 10;
pub const MAX_SAMPLES: usize = 50;
/// Derived seeds stay exact in JavaScript numbers.
const SEED_MASK: u64 = (1 << 53) - 1;

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<StructuredPrompt>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerateRequest {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            structured: None,
            samples: DEFAULT_SAMPLES,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEcho {
    pub text: String,
    /// `None` when the text does not follow the prompt grammar
    pub structured: Option<StructuredPrompt>,
    pub unknown_tokens: usize,
    pub truncated_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub snapshot: TrafficSnapshot,
    pub prompt: PromptEcho,
    pub seed: u64,
    pub samples: usize,
    pub used_samples: usize,
    pub diverged_samples: usize,
    pub n_roads: usize,
    pub model_hash: String,
    pub data_hash: String,
}

/// A loaded checkpoint together with everything needed to serve it.
pub struct Loaded {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub model_hash: String,
}

impl Loaded {
    pub fn open(ckpt: &Path) -> AppResult<Self> {
        let (model, meta) = load_model(ckpt)?;
        Ok(Self {
            model_hash: model_hash(ckpt)?,
            model,
            meta,
        })
    }

    pub fn graph(&self) -> &RoadGraph {
        &self.meta.context.graph
    }

    pub fn n_roads(&self) -> usize {
        self.graph().n_roads()
    }

    pub fn data_hash(&self) -> &str {
        &self.meta.context.data_hash
    }

    /// Refuse to pair this checkpoint with a dataset it was not trained on.
    pub fn check_dataset(&self, ds: &Dataset) -> AppResult<()> {
        if self.data_hash() != ds.hash() {
            return Err(invalid(format!(
                "checkpoint was trained on dataset {} but the data directory holds {}",
                self.data_hash(),
                ds.hash()
            )));
        }
        Ok(())
    }

    pub fn generate(&self, req: &GenerateRequest) -> AppResult<GenerateResponse> {
        generate(self, req)
    }
}

/// sha256 over the checkpoint file and its sidecar.
pub fn model_hash(ckpt: &Path) -> AppResult<String> {
    let mut h = Sha256::new();
    for p in [ckpt.to_path_buf(), sidecar_path(ckpt)] {
        h.update(fs::read(&p).map_err(|e| runtime(format!("{}: {e}", p.display())))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Week that weekday-only prompts are anchored to.
pub fn anchor_week() -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date")
}

/// Validate a request and resolve it to prompt text.
pub fn resolve_prompt(req: &GenerateRequest, graph: &RoadGraph) -> AppResult<(String, Option<StructuredPrompt>)> {
    if !(1..=MAX_SAMPLES).contains(&req.samples) {
        return Err(invalid(format!("samples must lie in 1..={MAX_SAMPLES}, got {}", req.samples)));
    }
    match (&req.text, &req.structured) {
        (Some(text), None) => {
            if text.trim().is_empty() {
                return Err(invalid("text is empty"));
            }
            Ok((text.clone(), parse_prompt(text, anchor_week())))
        }
        (None, Some(s)) => {
            for ev in &s.events {
                match (&ev.road, ev.kind) {
                    (Some(name), _) if graph.road_by_name(name).is_none() => {
                        return Err(invalid(format!("unknown road {name:?}")));
                    }
                    (None, kind) if kind != EventKind::Weather => {
                        return Err(invalid(format!("{} needs a road", kind.phrase())));
                    }
                    _ => {}
                }
            }
            Ok((render_structured(s), Some(s.clone())))
        }
        _ => Err(invalid("give exactly one of text or structured")),
    }
}

/// Seed for requests that do not carry one: a hash of what is being asked.
pub fn derived_seed(text: &str, samples: usize) -> u64 {
    let digest = Sha256::new()
        .chain_update(text.as_bytes())
        .chain_update([0u8])
        .chain_update((samples as u64).to_le_bytes())
        .finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) & SEED_MASK
}

pub fn generate(loaded: &Loaded, req: &GenerateRequest) -> AppResult<GenerateResponse> {
    let (text, structured) = resolve_prompt(req, loaded.graph())?;
    let seed = req.seed.unwrap_or_else(|| derived_seed(&text, req.samples));
    let tokens = loaded.model.tokenize(&text)?;
    let n = loaded.n_roads();
    let g = generate_k(&loaded.model, &loaded.meta.context.scaler, n, &text, req.samples, seed)?;
    let mut snapshot = g.snapshot;
    snapshot.timestamp = structured.as_ref().map(|s| s.timestamp);
    Ok(GenerateResponse {
        snapshot,
        prompt: PromptEcho {
            text,
            structured,
            unknown_tokens: tokens.unknown,
            truncated_tokens: tokens.truncated,
        },
        seed,
        samples: req.samples,
        used_samples: g.used,
        diverged_samples: g.diverged,
        n_roads: n,
        model_hash: loaded.model_hash.clone(),
        data_hash: loaded.data_hash().to_string(),
    })
}

/// Generation plus its wall time in milliseconds.
pub fn timed_generate(loaded: &Loaded, req: &GenerateRequest) -> AppResult<(GenerateResponse, f64)> {
    let start = Instant::now();
    let r = generate(loaded, req)?;
    Ok((r, start.elapsed().as_secs_f64() * 1e3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub id: String,
    pub label: String,
    pub text: String,
    pub structured: StructuredPrompt,
}

/// Canned prompts: a time-only trio across the day plus event scenarios on
/// named roads of `graph`.
pub fn presets(graph: &RoadGraph) -> Vec<Preset> {
    let day = anchor_week();
    let at = |d: i64, h: u32, m: u32| {
        (day + chrono::Duration::days(d))
            .and_hms_opt(h, m, 0)
            .expect("valid clock time")
    };
    let mut out = Vec::new();
    for (id, h) in [("night", 1), ("morning", 9), ("evening", 18)] {
        let p = render_text(graph, at(0, h, 0), &[]);
        out.push(Preset {
            id: format!("time-only-{id}"),
            label: format!("{h:02}:00, no events"),
            text: p.text,
            structured: p.structured,
        });
    }
    let n = graph.n_roads();
    let mut events = vec![
        ("accident", "Evening accident", at(4, 18, 20), EventKind::Accident, Some(0), 0.5),
        ("rain", "Morning rain", at(2, 8, 0), EventKind::Weather, None, 0.5),
    ];
    if n > 1 {
        events.push(("closure", "Midday closure", at(1, 12, 0), EventKind::Closure, Some(n / 2), 0.9));
    }
    for (id, label, t, kind, epicenter, severity) in events {
        let ev = EventSpec {
            kind,
            epicenter,
            severity,
            start: t,
            duration_min: 60,
            hop_radius: 1,
        };
        let p = render_text(graph, t, &[ev]);
        out.push(Preset {
            id: id.to_string(),
            label: label.to_string(),
            text: p.text,
            structured: p.structured,
        });
    }
    out
}

/// Read a snapshot from either a bare snapshot file or a generation response.
pub fn read_snapshot(path: &Path) -> AppResult<TrafficSnapshot> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let inner = v.get("snapshot").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| invalid(format!("{}: not a snapshot: {e}", path.display())))
}

pub fn read_graph(path: &Path) -> AppResult<RoadGraph> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let g: RoadGraph = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    g.validate()?;
    Ok(g)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(e.to_string()))?;
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn report_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".report.jsonl");
    PathBuf::from(s)
}

//! The `ttg` command line.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ttg_core::denoiser::GcnMode;
use ttg_core::eval::{evaluate_pairs, run_ablation};
use ttg_core::scenario::{build_dataset, Dataset, PairRecord, ProbeSet, ScenarioConfig, StructuredPrompt};
use ttg_core::train::{TrainConfig, Trainer};

use crate::api::{read_graph, read_snapshot, report_path, timed_generate, write_file, write_json_file, GenerateRequest, Loaded};
use crate::error::{invalid, runtime, AppResult};
use crate::render::{render_map, Channel};
use crate::server::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "ttg", version, about = "Text-conditioned traffic generation", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a road network and write text-traffic pairs
    MakeData(MakeDataArgs),
    /// Train the denoiser on a dataset
    Train(TrainArgs),
    /// Generate a traffic snapshot from a prompt
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Train one model per GCN depth and tabulate errors per sample count
    Ablate(AblateArgs),
    /// Draw a snapshot as an SVG map
    Render(RenderArgs),
    /// Serve the HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// JSON scenario config; flags below are used when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub roads: usize,
    #[arg(long, default_value_t = 14)]
    pub days: usize,
    /// write the 16-prompt probe set instead of a simulated history
    #[arg(long, conflicts_with_all = ["config", "roads", "days"])]
    pub probe: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; missing fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// checkpoint path; a `.json` sidecar is written next to it
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=3))]
    pub gcn_layers: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub gcn_mode: Option<GcnMode>,
    /// stop after this many optimizer steps
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// stop once the smoothed loss falls below this value
    #[arg(long)]
    pub target_loss: Option<f64>,
    /// JSON-lines step log; defaults to `<out>.report.jsonl`
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// continue from the checkpoint at `--out`
    #[arg(long)]
    pub resume: bool,
    /// print progress every this many steps (0 for silence)
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

fn parse_mode(s: &str) -> Result<GcnMode, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, required_unless_present = "structured", conflicts_with = "structured")]
    pub text: Option<String>,
    /// JSON file holding a structured prompt
    #[arg(long)]
    pub structured: Option<PathBuf>,
    /// defaults to a hash of the prompt
    #[arg(long)]
    pub seed: Option<u64>,
    /// number of samples averaged into the snapshot
    #[arg(long, default_value_t = crate::api::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// diffusion steps; must equal the checkpoint's schedule length
    #[arg(long)]
    pub steps: Option<usize>,
    /// output JSON; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// samples averaged per prompt
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = ["test", "train"], default_value = "test")]
    pub split: String,
    /// evaluate only the first this many prompts of the split
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub samples: Vec<usize>,
    /// JSON training config shared by every depth
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, value_parser = ["test", "train"], default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// directory for report.json and table.txt
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// snapshot JSON, or the output of `sample`
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "speed")]
    pub channel: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, env = "CT_BIND", default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// directory of built UI assets served under /
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// concurrent sampling loops; defaults to the CPU count
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parse `argv` and run; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Render(a) => render(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn make_data(a: MakeDataArgs) -> AppResult<()> {
    let ds = if a.probe {
        ProbeSet::build(a.seed)?.dataset
    } else {
        let cfg = match &a.config {
            Some(p) => read_config(p)?,
            None => ScenarioConfig::new(a.seed, a.roads, a.days),
        };
        build_dataset(&cfg)?
    };
    ds.save(&a.out)?;
    eprintln!(
        "wrote {} pairs over {} roads ({} train, {} test) to {}; hash {}",
        ds.pairs.len(),
        ds.graph.n_roads(),
        ds.split.train.len(),
        ds.split.test.len(),
        a.out.display(),
        ds.hash()
    );
    Ok(())
}

fn train(a: TrainArgs) -> AppResult<()> {
    let ds = Dataset::load(&a.data)?;
    let mut trainer = if a.resume {
        if a.config.is_some() || a.gcn_layers.is_some() || a.gcn_mode.is_some() {
            return Err(invalid("--resume takes its configuration from the checkpoint"));
        }
        Trainer::resume(&a.out, &ds)?
    } else {
        let mut cfg: TrainConfig = match &a.config {
            Some(p) => read_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(l) = a.gcn_layers {
            cfg.gcn_layers = l as usize;
        }
        if let Some(m) = a.gcn_mode {
            cfg.gcn_mode = m;
        }
        Trainer::new(cfg, &ds)?
    };
    let total = a.max_steps.map_or(trainer.total_steps(), |m| m.min(trainer.total_steps()));
    let report = a.report.clone().unwrap_or_else(|| report_path(&a.out));
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&report)
        .map_err(|e| runtime(format!("{}: {e}", report.display())))?;
    let mut log = BufWriter::new(file);
    eprintln!(
        "training from step {} to {total}, {} examples, {} per batch",
        trainer.step,
        ds.split.train.len(),
        trainer.config.batch_size
    );
    while trainer.step < total {
        let rec = trainer.train_step()?;
        let line = serde_json::to_string(&rec).map_err(|e| runtime(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| runtime(format!("{}: {e}", report.display())))?;
        if a.log_every > 0 && rec.step % a.log_every == 0 {
            eprintln!("step {:>6}  loss {:.4}  smoothed {:.4}", rec.step, rec.loss, rec.smoothed);
        }
        if let Some(every) = trainer.config.checkpoint_every {
            if rec.step % every == 0 {
                trainer.save(&a.out)?;
            }
        }
        if a.target_loss.is_some_and(|t| rec.step >= trainer.config.smoothing_window && rec.smoothed < t) {
            eprintln!("smoothed loss {:.4} reached the target at step {}", rec.smoothed, rec.step);
            break;
        }
    }
    log.flush().map_err(|e| runtime(e.to_string()))?;
    trainer.save(&a.out)?;
    eprintln!("saved {} at step {}", a.out.display(), trainer.step);
    Ok(())
}

fn sample(a: SampleArgs) -> AppResult<()> {
    let loaded = Loaded::open(&a.ckpt)?;
    if let Some(steps) = a.steps {
        let have = loaded.model.schedule.steps();
        if steps != have {
            return Err(invalid(format!("checkpoint was trained with {have} diffusion steps, not {steps}")));
        }
    }
    let structured: Option<StructuredPrompt> = a.structured.as_deref().map(read_config).transpose()?;
    let req = GenerateRequest {
        text: a.text,
        structured,
        samples: a.samples,
        seed: a.seed,
    };
    let (resp, ms) = timed_generate(&loaded, &req)?;
    let body = serde_json::to_string_pretty(&resp).map_err(|e| runtime(e.to_string()))?;
    match &a.out {
        Some(p) => write_file(p, body.as_bytes())?,
        None => println!("{body}"),
    }
    eprintln!(
        "{} sample(s), seed {}, {:.0} ms{}",
        resp.used_samples,
        resp.seed,
        ms,
        if resp.prompt.unknown_tokens > 0 {
            format!(", {} unknown word(s)", resp.prompt.unknown_tokens)
        } else {
            String::new()
        }
    );
    Ok(())
}

fn split_pairs<'a>(ds: &'a Dataset, split: &str, limit: Option<usize>) -> AppResult<Vec<&'a PairRecord>> {
    let pairs: Vec<&PairRecord> = match split {
        "train" => ds.train_pairs().collect(),
        _ => ds.test_pairs().collect(),
    };
    let pairs: Vec<&PairRecord> = pairs.into_iter().take(limit.unwrap_or(usize::MAX)).collect();
    if pairs.is_empty() {
        return Err(invalid(format!("the {split} split is empty")));
    }
    Ok(pairs)
}

fn eval(a: EvalArgs) -> AppResult<()> {
    let loaded = Loaded::open(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    loaded.check_dataset(&ds)?;
    let pairs = split_pairs(&ds, &a.split, a.limit)?;
    let mut r = evaluate_pairs(&loaded.model, &ds.scaler, &pairs, &[a.k], a.seed)?.remove(0);
    r.descriptor = format!("{} split, {} prompts, k = {}", a.split, pairs.len(), a.k);
    println!("{}", r.descriptor);
    for (name, m) in [("congestion", r.congestion), ("speed", r.speed), ("travel_time", r.travel_time)] {
        println!("{name:>12}  MAE {:>9.3}  RMSE {:>9.3}", m.mae, m.rmse);
    }
    if r.diverged > 0 {
        println!("{} sample(s) diverged and were dropped", r.diverged);
    }
    if let Some(p) = &a.out {
        write_json_file(p, &r)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> AppResult<()> {
    let ds = Dataset::load(&a.data)?;
    let mut base: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if a.max_steps.is_some() {
        base.max_steps = a.max_steps;
    }
    if let Some(l) = a.layers.iter().find(|l| **l > 3) {
        return Err(invalid(format!("gcn layers must lie in 0..=3, got {l}")));
    }
    let pairs = split_pairs(&ds, &a.split, a.limit)?;
    let grid = run_ablation(&ds, &base, &a.layers, &a.samples, &pairs, a.seed, |m| eprintln!("{m}"))?;
    let table = grid.table();
    write_json_file(&a.out.join("report.json"), &grid)?;
    write_file(&a.out.join("table.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn render(a: RenderArgs) -> AppResult<()> {
    let channel: Channel = a.channel.parse()?;
    let snapshot = read_snapshot(&a.input)?;
    let graph = read_graph(&a.graph)?;
    let svg = render_map(&snapshot, &graph, channel)?;
    write_file(&a.out, svg.as_bytes())
}

fn serve_cmd(a: ServeArgs) -> AppResult<()> {
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let state = AppState::open(&a.ckpt, &a.data, workers)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| runtime(e.to_string()))?;
    rt.block_on(serve(state, &a.bind, a.ui))
}

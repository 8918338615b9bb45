//! `rlad`: generate synthetic series, train, predict, evaluate and serve
//! the labeling API.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rlad_core::active::{QueryStrategy, ScriptedOracle};
use rlad_core::eval;
use rlad_core::neural::Checkpoint;
use rlad_core::orchestrator::{self, RladConfig, RladModel, RunPhase, TrainHistory, TrainObserver};
use rlad_core::timeseries::{self, AnomalyKind, CsvFormat, UNKNOWN};
use rlad_service::{HumanOracle, LabelingService, StatusObserver};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "rlad", version, about = "Semi-supervised time-series anomaly detection with a labeling loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic series with injected anomalies.
    Generate {
        #[arg(long, default_value = "spike")]
        kind: AnomalyKind,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0.003)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "yahoo")]
        format: CsvFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write the run directory.
    Train(TrainArgs),
    /// Write per-window predictions as `end_index,prediction`.
    Predict {
        /// Run directory (or a model.json file).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "yahoo")]
        format: CsvFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the labels of a series; prints metrics JSON.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "yahoo")]
        format: CsvFormat,
    },
    /// Run the labeling API without a training run.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Bind address; falls back to RLAD_ADDR, then 127.0.0.1:8723.
    #[arg(long)]
    addr: Option<String>,
    /// Directory of static UI assets served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum OracleChoice {
    Scripted,
    Human,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "yahoo")]
    format: CsvFormat,
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OracleChoice::Scripted)]
    oracle: OracleChoice,
    #[command(flatten)]
    serve: ServeArgs,
    /// Seconds to wait for each human-labeled batch (default: no limit).
    #[arg(long)]
    label_timeout: Option<u64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    queries_per_episode: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    budget_cap: Option<usize>,
    #[arg(long)]
    query_strategy: Option<QueryStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration field, e.g. `--set label_prop.sigma=0.1`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn resolve_config(&self) -> Result<RladConfig> {
        let base = match &self.config {
            Some(p) => RladConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RladConfig::default(),
        };
        let mut v = serde_json::to_value(base)?;
        let mut put = |key: &str, value: Value| -> Result<()> {
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .with_context(|| format!("unknown configuration key {key:?}"))?;
            }
            *slot = value;
            Ok(())
        };
        let overrides: [(&str, Option<Value>); 10] = [
            ("window", self.window.map(Into::into)),
            ("episodes", self.episodes.map(Into::into)),
            ("queries_per_episode", self.queries_per_episode.map(Into::into)),
            ("warmup", self.warmup.map(Into::into)),
            ("hidden_size", self.hidden_size.map(Into::into)),
            ("gamma", self.gamma.map(Into::into)),
            ("lr", self.lr.map(Into::into)),
            ("budget_cap", self.budget_cap.map(Into::into)),
            ("query_strategy", self.query_strategy.map(|s| s.to_string().into())),
            ("seed", self.seed.map(Into::into)),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                put(key, value)?;
            }
        }
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            put(key, value)?;
        }
        let config: RladConfig = serde_json::from_value(v).context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }
}

/// Persists partial results when a run aborts, and forwards progress to
/// the labeling service when one is attached.
struct CliObserver {
    out: PathBuf,
    status: Option<StatusObserver>,
}

impl TrainObserver for CliObserver {
    fn on_phase(&mut self, phase: RunPhase) {
        if let Some(s) = &mut self.status {
            s.on_phase(phase);
        }
    }

    fn on_episode(
        &mut self,
        record: &orchestrator::EpisodeRecord,
        store: &rlad_core::active::LabelStore,
        budget: &rlad_core::active::LabelBudget,
    ) {
        if let Some(s) = &mut self.status {
            s.on_episode(record, store, budget);
        }
    }

    fn on_abort(&mut self, checkpoint: &Checkpoint, history: &TrainHistory, err: &rlad_core::Error) {
        error!("run aborted: {err}; saving checkpoint to {}", self.out.display());
        let saved = std::fs::create_dir_all(&self.out)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(checkpoint.save(self.out.join(orchestrator::CHECKPOINT_FILE))?))
            .and_then(|_| Ok(std::fs::write(self.out.join(orchestrator::HISTORY_FILE), history.to_csv())?));
        if let Err(e) = saved {
            error!("could not save checkpoint: {e:#}");
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.resolve_config()?;
    let series = timeseries::load_series(&args.data, args.format)?;
    info!("loaded {} points from {}", series.len(), args.data.display());

    let run = match args.oracle {
        OracleChoice::Scripted => {
            let mut observer = CliObserver {
                out: args.out.clone(),
                status: None,
            };
            let mut oracle = ScriptedOracle::from_series(&series);
            orchestrator::rlad_train_observed(&series, &config, &mut oracle, &mut observer)?
        }
        OracleChoice::Human => {
            let addr = rlad_service::resolve_addr(args.serve.addr.as_deref())?;
            let service = LabelingService::new();
            let app = match &args.serve.ui_dir {
                Some(dir) => rlad_service::router_with_ui(service.clone(), dir.clone()),
                None => rlad_service::router(service.clone()),
            };
            let rt = tokio::runtime::Runtime::new()?;
            let listener = rt.block_on(tokio::net::TcpListener::bind(addr)).with_context(|| format!("binding {addr}"))?;
            eprintln!("labeling service at http://{}", listener.local_addr()?);
            rt.spawn(async move {
                if let Err(e) = rlad_service::serve(listener, app).await {
                    error!("labeling service stopped: {e}");
                }
            });
            let mut oracle = HumanOracle::new(service.clone(), args.label_timeout.map(Duration::from_secs));
            let mut observer = CliObserver {
                out: args.out.clone(),
                status: Some(StatusObserver::new(service)),
            };
            orchestrator::rlad_train_observed(&series, &config, &mut oracle, &mut observer)?
        }
    };
    run.write_to(&args.out, &config)?;
    if let Some(m) = &run.metrics {
        eprintln!("held-out precision {:.3} recall {:.3} f1 {:.3}", m.precision, m.recall, m.f1);
    }
    eprintln!("run written to {}", args.out.display());
    Ok(())
}

fn model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(orchestrator::MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn predict(model: &Path, data: &Path, format: CsvFormat, out: &Path) -> Result<()> {
    let model = RladModel::load(model_path(model))?;
    let series = timeseries::load_series(data, format)?;
    let preds = orchestrator::rlad_predict(&model, &series)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["end_index", "prediction"])?;
    for p in &preds {
        w.write_record([p.end_index.to_string(), p.prediction.to_string()])?;
    }
    w.flush()?;
    eprintln!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

fn evaluate(preds: &Path, data: &Path, format: CsvFormat) -> Result<()> {
    let series = timeseries::load_series(data, format)?;
    let mut reader = csv::Reader::from_path(preds).with_context(|| format!("reading {}", preds.display()))?;
    let (mut p, mut y) = (Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let (Some(idx), Some(pred)) = (rec.get(0), rec.get(1)) else {
            bail!("{}:{line}: expected end_index,prediction", preds.display());
        };
        let idx: usize = idx.trim().parse().with_context(|| format!("{}:{line}: bad end_index", preds.display()))?;
        let pred: u8 = match pred.trim() {
            "0" => 0,
            "1" => 1,
            other => bail!("{}:{line}: prediction {other:?} is not 0 or 1", preds.display()),
        };
        let Some(&label) = series.labels().get(idx) else {
            bail!("{}:{line}: end_index {idx} beyond series of {} points", preds.display(), series.len());
        };
        if label != UNKNOWN {
            p.push(pred);
            y.push(label as u8);
        }
    }
    let metrics = eval::evaluate(&p, &y)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let addr = rlad_service::resolve_addr(args.addr.as_deref())?;
    let service = LabelingService::new();
    let app = match args.ui_dir {
        Some(dir) => rlad_service::router_with_ui(service, dir),
        None => rlad_service::router(service),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("labeling service at http://{}", listener.local_addr()?);
        rlad_service::serve(listener, app).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            kind,
            n,
            rate,
            seed,
            format,
            out,
        } => {
            let series = timeseries::gen_synthetic(n, rate, kind, seed)?;
            timeseries::save_series(&series, &out, format)?;
            eprintln!("wrote {n} points to {}", out.display());
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Predict {
            model,
            data,
            format,
            out,
        } => predict(&model, &data, format, &out),
        Command::Evaluate { preds, data, format } => evaluate(&preds, &data, format),
        Command::Serve(args) => serve(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

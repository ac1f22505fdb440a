//! Command-line driver: argument handling, stage orchestration and the run
//! summary. The binary is a thin wrapper around [`execute`].

pub mod args;
pub mod pipeline;
pub mod summary;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Parser;

use lata_core::config::{load_config, resolve_config_path, Config};
use lata_core::grade::{load_assignment, AssignmentPackage};
use lata_core::ingest::load_export;
use lata_core::ledger;
use lata_core::llm::http::HttpBackend;
use lata_core::llm::transcript::{RecordingBackend, ReplayBackend};
use lata_core::llm::{ChatBackend, Endpoint};

use args::{Cli, Command, StageArgs};
use pipeline::{Context, Failure, IngestStage, Layout, ReportMode};
use summary::{RunSummary, Timings};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_UNAVAILABLE: u8 = 2;

/// What a successful invocation produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub summary: Option<RunSummary>,
    /// Some model call found the endpoint unusable.
    pub unavailable: bool,
    pub message: String,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.unavailable {
            EXIT_UNAVAILABLE
        } else {
            EXIT_OK
        }
    }
}

pub fn run_from_env() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(main_with(&cli, None))
}

/// Runs `cli` and reports on stderr; returns the process exit code.
pub fn main_with(cli: &Cli, backend: Option<Arc<dyn ChatBackend>>) -> u8 {
    match execute(cli, backend) {
        Ok(outcome) => {
            if !outcome.message.is_empty() {
                eprint!("{}", outcome.message);
            }
            if outcome.unavailable {
                eprintln!("error: the model endpoint was unavailable; affected problems are flagged for human grading");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load_cfg(cli: &Cli) -> Result<Config, Failure> {
    match resolve_config_path(cli.config.as_deref()) {
        Some(path) => load_config(&path).map_err(|e| Failure::Input(format!("{}: {e}", path.display()))),
        None => Ok(Config::default()),
    }
}

fn required(flag: &Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.clone()
        .or_else(|| from_config.clone())
        .ok_or_else(|| Failure::Input(format!("--{name} is required (or set paths.{name}_dir in the config)")))
}

fn assignment(args: &StageArgs, cfg: &Config) -> Result<AssignmentPackage, Failure> {
    let dir = required(&args.assignment, &cfg.paths.assignment_dir, "assignment")?;
    load_assignment(&dir).map_err(|e| Failure::Input(e.to_string()))
}

fn export_dir(args: &StageArgs, cfg: &Config) -> Result<PathBuf, Failure> {
    required(&args.export, &cfg.paths.export_dir, "export")
}

fn out_dir(args: &StageArgs, cfg: &Config) -> Result<PathBuf, Failure> {
    required(&args.out, &cfg.paths.output_dir, "output")
}

fn build_endpoint(args: &StageArgs, cfg: &Config, injected: Option<Arc<dyn ChatBackend>>) -> Result<Endpoint, Failure> {
    let inner: Arc<dyn ChatBackend> = match (injected, &args.mock_transcript) {
        (Some(b), _) => b,
        (None, Some(path)) => Arc::new(ReplayBackend::load(path).map_err(|e| Failure::Input(e.to_string()))?),
        (None, None) => Arc::new(
            HttpBackend::new(&cfg.llm.endpoint_url, Duration::from_secs_f64(cfg.llm.timeout_secs))
                .map_err(|e| Failure::Input(e.to_string()))?,
        ),
    };
    let backend: Arc<dyn ChatBackend> = match &args.record_transcript {
        Some(path) => Arc::new(RecordingBackend::new(inner, path).map_err(|e| Failure::Io(e.to_string()))?),
        None => inner,
    };
    Ok(Endpoint::new(backend, cfg.llm.in_flight_limit, cfg.llm.max_retries))
}

fn context(
    args: &StageArgs,
    cfg: Config,
    layout: Layout,
    injected: Option<Arc<dyn ChatBackend>>,
) -> Result<Context, Failure> {
    let endpoint = build_endpoint(args, &cfg, injected)?;
    let workers = args.workers.unwrap_or(cfg.pipeline.worker_count);
    Ok(Context::new(cfg, layout, endpoint, workers, args.clock))
}

/// Fails before anything is written if the export cannot be read.
fn check_export(dir: &Path) -> Result<(), Failure> {
    load_export(dir).map(|_| ()).map_err(|e| Failure::Input(e.to_string()))
}

fn timed<T>(timings: &mut Timings, stage: &str, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
    let started = Instant::now();
    let out = f()?;
    timings.stage_seconds.insert(stage.to_string(), started.elapsed().as_secs_f64());
    Ok(out)
}

fn finish_run(layout: &Layout, summary: RunSummary, timings: &Timings) -> Result<Outcome, Failure> {
    pipeline::write_summary(layout, &summary)?;
    pipeline::write_json(&layout.timings(), timings)?;
    Ok(Outcome {
        unavailable: summary.endpoint_unavailable,
        message: summary.to_text(),
        summary: Some(summary),
    })
}

/// Runs one invocation. `backend`, when given, replaces the configured
/// model endpoint.
pub fn execute(cli: &Cli, backend: Option<Arc<dyn ChatBackend>>) -> Result<Outcome, Failure> {
    let cfg = load_cfg(cli)?;
    match &cli.command {
        Command::Validate(a) => {
            let mut msg = String::from("config ok\n");
            if a.assignment.is_some() || cfg.paths.assignment_dir.is_some() {
                let p = assignment(a, &cfg)?;
                msg.push_str(&format!(
                    "assignment {} ok: {} problems, {} points\n",
                    p.assignment_id,
                    p.problems.len(),
                    p.total_points
                ));
            }
            if a.export.is_some() || cfg.paths.export_dir.is_some() {
                let batch = load_export(&export_dir(a, &cfg)?).map_err(|e| Failure::Input(e.to_string()))?;
                msg.push_str(&format!(
                    "export ok: {} submissions, {} ungradeable, {} warnings\n",
                    batch.submissions.len(),
                    batch.report.ungradeable.len(),
                    batch.report.warnings.len()
                ));
            }
            Ok(Outcome {
                message: msg,
                ..Default::default()
            })
        }
        Command::Run(r) => {
            let a = &r.stage;
            let package = assignment(a, &cfg)?;
            let export = export_dir(a, &cfg)?;
            check_export(&export)?;
            let layout = Layout::new(out_dir(a, &cfg)?);
            let ctx = context(a, cfg, layout.clone(), backend)?;
            let mut timings = Timings::default();
            timed(&mut timings, "ingest", || pipeline::stage_ingest(&layout, &export))?;
            timed(&mut timings, "segment", || pipeline::stage_segment(&ctx, &package))?;
            timed(&mut timings, "grade", || pipeline::stage_grade(&ctx, &package))?;
            let summary = timed(&mut timings, "report", || pipeline::stage_report(&ctx, &package, &ReportMode::Original))?;
            finish_run(&layout, summary, &timings)
        }
        Command::Regrade(r) => {
            let a = &r.stage;
            let package = assignment(a, &cfg)?;
            let export = export_dir(a, &cfg)?;
            check_export(&export)?;
            if !r.original_ledger.is_file() {
                return Err(Failure::Input(format!("original ledger {} not found", r.original_ledger.display())));
            }
            let loaded = ledger::load(&r.original_ledger).map_err(|e| Failure::Input(e.to_string()))?;
            let originals = loaded.entries;
            let layout = Layout::new(out_dir(a, &cfg)?).corrections();
            let previous = if layout.identified_ledger().is_file() {
                ledger::load(&layout.identified_ledger())
                    .map_err(|e| Failure::Input(e.to_string()))?
                    .entries
            } else {
                Vec::new()
            };
            let ctx = context(a, cfg, layout.clone(), backend)?;
            let mut timings = Timings::default();
            let skipped = timed(&mut timings, "ingest", || {
                let batch = load_export(&export).map_err(|e| Failure::Input(e.to_string()))?;
                let mut stage = IngestStage {
                    submissions: batch.submissions,
                    report: batch.report,
                };
                let skipped = pipeline::filter_corrections(&mut stage, &originals, &previous, &package.assignment_id);
                pipeline::write_json(&layout.ingest_report(), &stage.report)?;
                pipeline::write_json(&layout.ingest_file(), &stage)?;
                Ok(skipped)
            })?;
            timed(&mut timings, "segment", || pipeline::stage_segment(&ctx, &package))?;
            timed(&mut timings, "grade", || pipeline::stage_grade(&ctx, &package))?;
            let mode = ReportMode::Correction { originals };
            let mut summary = timed(&mut timings, "report", || pipeline::stage_report(&ctx, &package, &mode))?;
            summary.skipped = skipped;
            finish_run(&layout, summary, &timings)
        }
        Command::Ingest(a) => {
            let export = export_dir(a, &cfg)?;
            let layout = Layout::new(out_dir(a, &cfg)?);
            let stage = pipeline::stage_ingest(&layout, &export)?;
            Ok(Outcome {
                message: format!("ingested {} submissions\n", stage.submissions.len()),
                ..Default::default()
            })
        }
        Command::Segment(a) => {
            let package = assignment(a, &cfg)?;
            let layout = Layout::new(out_dir(a, &cfg)?);
            let ctx = context(a, cfg, layout, backend)?;
            let records = pipeline::stage_segment(&ctx, &package)?;
            Ok(Outcome {
                unavailable: pipeline::endpoint_unavailable(&records, &[]),
                message: format!("segmented {} submissions\n", records.len()),
                summary: None,
            })
        }
        Command::Grade(a) => {
            let package = assignment(a, &cfg)?;
            let layout = Layout::new(out_dir(a, &cfg)?);
            let ctx = context(a, cfg, layout, backend)?;
            let records = pipeline::stage_grade(&ctx, &package)?;
            Ok(Outcome {
                unavailable: pipeline::endpoint_unavailable(&[], &records),
                message: format!("graded {} submissions\n", records.len()),
                summary: None,
            })
        }
        Command::Report(a) => {
            let package = assignment(a, &cfg)?;
            let layout = Layout::new(out_dir(a, &cfg)?);
            let ctx = context(a, cfg, layout.clone(), backend)?;
            let mut timings = Timings::default();
            let summary = timed(&mut timings, "report", || pipeline::stage_report(&ctx, &package, &ReportMode::Original))?;
            finish_run(&layout, summary, &timings)
        }
    }
}

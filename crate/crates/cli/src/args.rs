use std::path::PathBuf;

use chrono::{DateTime, FixedOffset};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lata", version, about = "Grade LaTeX homework against a rubric with a locally hosted model")]
pub struct Cli {
    /// Configuration file. Falls back to $LATA_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest, segment, grade and report in one go.
    Run(RunArgs),
    /// Read an export directory into the stage directory.
    Ingest(StageArgs),
    /// Split each ingested submission into problems.
    Segment(StageArgs),
    /// Grade each segmented problem against its rubric.
    Grade(StageArgs),
    /// Compute scores, append to the ledger and write student reports.
    Report(StageArgs),
    /// Grade a corrections export against an existing ledger.
    Regrade(RegradeArgs),
    /// Check configuration, assignment package and export without grading.
    Validate(StageArgs),
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    /// Export directory holding submission_metadata.yml and one directory per student.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Assignment package directory (assignment.yml plus solutions/).
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replay model replies from this transcript instead of calling the endpoint.
    #[arg(long)]
    pub mock_transcript: Option<PathBuf>,
    /// Append every model exchange to this transcript.
    #[arg(long)]
    pub record_transcript: Option<PathBuf>,
    /// Worker threads; overrides pipeline.worker_count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Timestamp recorded as graded_at, e.g. 2025-01-01T00:00:00Z.
    #[arg(long)]
    pub clock: Option<DateTime<FixedOffset>>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub stage: StageArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RegradeArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Identified ledger of the original pass.
    #[arg(long)]
    pub original_ledger: PathBuf,
}

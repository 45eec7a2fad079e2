//! `obs`: validate sheets, run pipelines, and read hypercubes.
//!
//! Exit codes: 0 success, 1 stage or validation failure, 2 usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use obs_core::corpus::{builtin_specs, load_registry};
use obs_core::cube::{to_frame, Hypercube, SliceFilter, StimulusResponseMatrix};
use obs_core::dataset::{export, ExportFormat, ExportOptions, Split, SplitRatios};
use obs_core::pipeline::{load_pipeline, render_analysis, run_pipeline, AnalysisKind, AnalyzeStage, OracleChoice, StageStatus};
use obs_core::sheet::{parse_sheet, validate_sheet};

#[derive(Parser)]
#[command(name = "obs", version, about = "Observe many implementations of one abstraction side by side")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a sheet and check it against an abstraction's operation signatures.
    ValidateSheet {
        file: PathBuf,
        /// Abstraction id to check against.
        #[arg(long)]
        spec: String,
        /// Registry or corpus manifest to take the spec from; built-in specs otherwise.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Run a pipeline file.
    Run { pipeline: PathBuf },
    /// Print the observation rows of a hypercube revision.
    Slice {
        srh: PathBuf,
        /// Revision; defaults to the head.
        #[arg(long)]
        rev: Option<u32>,
        #[arg(long)]
        abstraction: Vec<String>,
        #[arg(long)]
        implementation: Vec<String>,
        #[arg(long)]
        sheet: Vec<String>,
        #[arg(long)]
        repetition: Vec<u32>,
        #[arg(long)]
        environment: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Analyze a saved matrix (srm.json).
    Report {
        srm: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, value_enum, default_value_t = Oracle::Expected)]
        oracle: Oracle,
        /// k values for passk.
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        k: Vec<u64>,
        /// Print JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Write a dataset export of one revision.
    Export {
        srh: PathBuf,
        #[arg(long)]
        rev: Option<u32>,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
        /// Keep only abstractions assigned to this split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Train, validation and test shares.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        abstraction: Vec<String>,
        /// Output file; stdout otherwise.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cluster,
    Discrepancy,
    Scores,
    Oracle,
    Nondeterminism,
    Passk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Expected,
    Plurality,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

/// A failure the user should see as exit 1 rather than an internal error.
#[derive(Debug)]
struct Failed;

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("failed")
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if !err.is::<Failed>() {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::ValidateSheet { file, spec, registry } => validate(&file, &spec, registry.as_deref()),
        Command::Run { pipeline } => run(&pipeline),
        Command::Slice {
            srh,
            rev,
            abstraction,
            implementation,
            sheet,
            repetition,
            environment,
            format,
        } => {
            let cube = Hypercube::open(&srh).with_context(|| format!("opening {}", srh.display()))?;
            let mut filter = SliceFilter::all();
            if !abstraction.is_empty() {
                filter = filter.abstraction(abstraction);
            }
            if !implementation.is_empty() {
                filter = filter.implementation(implementation);
            }
            if !sheet.is_empty() {
                filter = filter.sheet(sheet);
            }
            if !repetition.is_empty() {
                filter = filter.repetition(repetition);
            }
            if !environment.is_empty() {
                filter = filter.environment(environment);
            }
            let cells = cube.slice(rev.unwrap_or(cube.head()), &filter)?;
            let frame = to_frame(&cells);
            let out = io::stdout().lock();
            match format {
                Format::Csv => frame.write_csv(out)?,
                Format::Jsonl => frame.write_jsonl(out)?,
            }
            Ok(())
        }
        Command::Report {
            srm,
            kind,
            oracle,
            k,
            json,
        } => {
            let matrix = StimulusResponseMatrix::load(&srm).with_context(|| format!("reading {}", srm.display()))?;
            let params = AnalyzeStage {
                oracle: match oracle {
                    Oracle::Expected => OracleChoice::Expected,
                    Oracle::Plurality => OracleChoice::Plurality,
                },
                k,
                ..AnalyzeStage::default()
            };
            let kind = match kind {
                Kind::Cluster => AnalysisKind::Cluster,
                Kind::Discrepancy => AnalysisKind::Discrepancy,
                Kind::Scores => AnalysisKind::Scores,
                Kind::Oracle => AnalysisKind::Oracle,
                Kind::Nondeterminism => AnalysisKind::Nondeterminism,
                Kind::Passk => AnalysisKind::Passk,
            };
            let report = render_analysis(&matrix, kind, &params)?;
            io::stdout().write_all(if json { report.json } else { report.csv }.as_bytes())?;
            Ok(())
        }
        Command::Export {
            srh,
            rev,
            format,
            split,
            ratios,
            seed,
            abstraction,
            output,
        } => {
            let cube = Hypercube::open(&srh).with_context(|| format!("opening {}", srh.display()))?;
            let mut options = ExportOptions::new(match format {
                Format::Jsonl => ExportFormat::Jsonl,
                Format::Csv => ExportFormat::Csv,
            });
            options.split = split.map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            });
            options.ratios = SplitRatios::new(ratios[0], ratios[1], ratios[2])?;
            options.seed = seed;
            if !abstraction.is_empty() {
                options.filter = SliceFilter::all().abstraction(abstraction);
            }
            let revision = rev.unwrap_or(cube.head());
            let summary = match &output {
                Some(path) => export(&cube, revision, &options, io::BufWriter::new(fs::File::create(path)?))?,
                None => export(&cube, revision, &options, io::stdout().lock())?,
            };
            if output.is_some() {
                eprintln!("exported {} rows from revision {}", summary.rows, summary.revision);
            }
            Ok(())
        }
    }
}

fn validate(file: &Path, spec_id: &str, registry: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let spec = match registry {
        Some(path) => load_registry(path)?.abstraction(spec_id).cloned(),
        None => builtin_specs().into_iter().find(|s| s.id == spec_id),
    };
    let Some(spec) = spec else {
        bail!("unknown abstraction `{spec_id}`");
    };
    let sheet = match parse_sheet(&text) {
        Ok(sheet) => sheet,
        Err(err) => {
            println!("{}: {err}", file.display());
            return Err(Failed.into());
        }
    };
    let report = validate_sheet(&sheet, &spec);
    for finding in &report.findings {
        match finding.row {
            Some(row) => println!("{}: A{row}: {}", file.display(), finding.message),
            None => println!("{}: {}", file.display(), finding.message),
        }
    }
    if report.is_clean() {
        println!("{}: ok ({} rows)", file.display(), sheet.rows.len());
        Ok(())
    } else {
        Err(Failed.into())
    }
}

fn run(path: &Path) -> Result<()> {
    let config = load_pipeline(path)?;
    let report = run_pipeline(&config).context("creating the run directory")?;
    for stage in &report.stages {
        let status = match stage.status {
            StageStatus::Ok => "ok",
            StageStatus::Failed => "FAILED",
            StageStatus::Skipped => "skipped",
        };
        match &stage.message {
            Some(message) => println!("{:<8} {status}: {message}", stage.stage),
            None => println!("{:<8} {status}", stage.stage),
        }
    }
    println!("run directory: {}", report.run_dir.display());
    if report.succeeded() {
        Ok(())
    } else {
        Err(Failed.into())
    }
}

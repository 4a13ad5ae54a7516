use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mrinv::backend::{self, BackendSpec, Invocation};
use mrinv::evaluation::dice_all;
use mrinv::phantom::{self, PhantomSpec};
use mrinv::pipeline::{self, CaseManifest, DiceRow, RunConfig, RunOptions, RunReport};
use mrinv::preprocess::{preprocess_case, PreprocessSpec};
use mrinv::report::{render_report, ReportFormat};
use mrinv::volume::{read_labels, read_volume, write_labels, write_volume, ClassMap, LabelReadOptions};
use mrinv::Mode;

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "mrinv", version, about = "MRI inversion preprocessing and segmentation evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Invert,
    InvertBg,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => Mode::None,
            ModeArg::Invert => Mode::Invert,
            ModeArg::InvertBg => Mode::InvertBg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RowFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormatArg {
    Markdown,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Clip and optionally invert one volume.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "invert-bg")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        clip_min: f64,
        #[arg(long, default_value_t = 3000.0, allow_negative_numbers = true)]
        clip_max: f64,
        #[arg(long, default_value_t = 1.0)]
        bg_percentile: f64,
    },
    /// Run a segmentation backend on one volume.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        backend_config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Base name of the backend log file.
        #[arg(long, default_value = "case")]
        case_id: String,
    },
    /// Dry-run checks on a backend config.
    CheckBackend {
        #[arg(long)]
        backend_config: PathBuf,
    },
    /// Per-class Dice of a prediction against ground truth.
    Evaluate {
        /// Multilabel NIfTI, or a directory of per-class masks.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class map JSON (`{"1": "liver", ...}` or a list of names).
        #[arg(long)]
        classes: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: RowFormat,
        #[arg(long, default_value = "case")]
        case_id: String,
        #[arg(long, default_value = "none")]
        variant: String,
        #[arg(long)]
        allow_unknown_labels: bool,
    },
    /// Run the full experiment over a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        no_keep_intermediates: bool,
    },
    /// Write a synthetic phantom bundle.
    Phantom {
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = phantom::DEFAULT_SIZE)]
        size: usize,
    },
    /// Render the report of a finished run.
    Report {
        #[arg(long = "run")]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormatArg,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

/// Joins the cause chain, skipping causes the previous message already
/// spells out.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Preprocess {
            input,
            output,
            mode,
            clip_min,
            clip_max,
            bg_percentile,
        } => {
            let spec = PreprocessSpec {
                clip_lo: clip_min,
                clip_hi: clip_max,
                mode: mode.into(),
                bg_percentile,
            };
            spec.validate()?;
            let v = read_volume(&input)?;
            let out = preprocess_case(&v, &spec)?;
            write_volume(&out, &output)?;
        }
        Command::Segment {
            input,
            backend_config,
            out_dir,
            case_id,
        } => {
            let spec = BackendSpec::from_json_file(&backend_config)?;
            spec.validate()?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let inv = Invocation {
                output_dir: out_dir.join(pipeline::BACKEND_OUT_DIR),
                log_path: out_dir.join(format!("{case_id}.backend.log")),
            };
            let labels = backend::run_backend(&spec, &input, &inv)?;
            write_labels(&labels, &out_dir.join(pipeline::SEGMENTATION_FILE))?;
            labels.class_map().write_json(&out_dir.join("classes.json"))?;
        }
        Command::CheckBackend { backend_config } => {
            let spec = BackendSpec::from_json_file(&backend_config)?;
            let diags = backend::validate_backend(&spec);
            if !diags.is_empty() {
                for d in &diags {
                    eprintln!("{d}");
                }
                return Ok(ExitCode::from(EXIT_CONFIG));
            }
            println!("ok");
        }
        Command::Evaluate {
            pred,
            gt,
            classes,
            format,
            case_id,
            variant,
            allow_unknown_labels,
        } => evaluate(&pred, &gt, &classes, format, &case_id, &variant, allow_unknown_labels)?,
        Command::Run {
            config,
            manifest,
            output,
            jobs,
            resume,
            no_keep_intermediates,
        } => {
            let cfg = RunConfig::from_json_file(&config)?;
            let manifest = CaseManifest::from_path(&manifest)?;
            let opts = RunOptions {
                output_dir: output.clone(),
                jobs,
                resume,
                keep_intermediates: no_keep_intermediates.then_some(false),
            };
            let outcome = pipeline::run(&cfg, &manifest, &opts)?;
            if outcome.report.cells.iter().any(|c| c.summary.is_some()) {
                print!("{}", render_report(&outcome.report, ReportFormat::Markdown)?);
            }
            if outcome.has_failures() {
                eprintln!(
                    "{} unit(s) failed; see {}",
                    outcome.report.failures.len(),
                    output.join(pipeline::REPORT_JSON).display()
                );
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
        }
        Command::Phantom { output, seed, size } => {
            if size < 16 {
                bail!("phantom size must be at least 16");
            }
            let spec = PhantomSpec::default_with_size(size, seed);
            phantom::write_bundle(&output, &spec)?;
            println!("phantom written to {}", output.display());
        }
        Command::Report { run_dir, format } => {
            let report = RunReport::from_json_file(&run_dir.join(pipeline::REPORT_JSON))?;
            let format = match format {
                ReportFormatArg::Markdown => ReportFormat::Markdown,
                ReportFormatArg::Csv => ReportFormat::Csv,
                ReportFormatArg::Json => ReportFormat::Json,
            };
            print!("{}", render_report(&report, format)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(
    pred: &Path,
    gt: &Path,
    classes: &Path,
    format: RowFormat,
    case_id: &str,
    variant: &str,
    allow_unknown_labels: bool,
) -> Result<()> {
    let class_map = ClassMap::from_json_file(classes)?;
    let opts = LabelReadOptions { allow_unknown_labels };
    let gt = read_labels(gt, &class_map, opts)?;
    let pred = if pred.is_dir() {
        backend::merge_per_class(pred, &class_map, gt.grid())?
    } else {
        read_labels(pred, &class_map, opts)?
    };
    let names = class_map.names();
    let rows: Vec<DiceRow> = dice_all(&pred, &gt, case_id, &names)?
        .into_iter()
        .map(|r| DiceRow::new(r, variant))
        .collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match format {
        RowFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &rows)?;
            writeln!(out)?;
        }
        RowFormat::Csv => {
            out.write_all(&pipeline::rows_to_csv(&rows)?)?;
        }
    }
    Ok(())
}

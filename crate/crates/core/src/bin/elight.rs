use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use elight_core::pipeline::{quantize_model, run_pipeline, AgingSource};
use elight_core::report::{render_json, Phases, Report};
use elight_core::{load_model, save_model, train_toy, AgedProfile, Error, RunConfig};

/// PCM photonic tensor core write simulator.
///
/// Config files are JSON. Defaults: bit_width 5, ptc_size 16, lambda 10,
/// seed 0, reorder on, remap off, row_per_ptc assignment, least-worn wire
/// selection, default pulse profiles (500 and 112.5 V^2 us per toggle). The
/// cell base must be given as base_c (or delta_e_db), in the config or with
/// --base-c.
///
/// ELIGHT_THREADS caps the worker threads (default: all cores).
#[derive(Parser, Debug)]
#[command(name = "elight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint manifest (JSON with f32le blobs).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output file (directory for `quantize`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the toy trainer and its data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bits per cell.
    #[arg(long, global = true)]
    bits: Option<u32>,
    /// Per-wire transmission factor c in (0, 1).
    #[arg(long, global = true)]
    base_c: Option<f64>,
    /// PTC size k.
    #[arg(long, global = true)]
    ptc_size: Option<usize>,
    /// Wire endurance in toggles.
    #[arg(long, global = true)]
    endurance: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Snap weights onto the codebook; writes a checkpoint and codebook.json.
    Quantize,
    /// Write and energy report; phases as in the config.
    Simulate,
    /// Report with column-based reordering.
    Reorder,
    /// Report with reordering and row remapping onto aged PTCs.
    Remap {
        /// Aging profile: {"k", "f_pos", "f_neg"}. Without it, wires worn to
        /// --endurance by a first deployment are treated as stuck.
        #[arg(long)]
        aging: Option<PathBuf>,
    },
    /// Train the toy MLP for each lambda and report accuracy and writes.
    TrainToy {
        /// Comma-separated lambdas; defaults to 0 and the config lambda.
        #[arg(long, value_delimiter = ',')]
        lambda_sweep: Option<Vec<f64>>,
    },
    /// Re-render a JSON report.
    Report {
        /// Report produced by simulate, reorder or remap.
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(b) = c.bits {
        cfg.bit_width = b;
    }
    if let Some(base) = c.base_c {
        cfg.base_c = Some(base);
        cfg.delta_e_db = None;
    }
    if let Some(k) = c.ptc_size {
        cfg.ptc_size = k;
    }
    if let Some(e) = c.endurance {
        cfg.endurance = Some(e);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_path(c: &Common) -> Result<&Path, Error> {
    c.model
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--model is required".into()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            let mut stdout = io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let c = &cli.common;
    let out = c.out.as_deref();
    match &cli.command {
        Command::Report { input, format } => {
            let text = fs::read_to_string(input).map_err(|source| Error::Io {
                path: input.clone(),
                source,
            })?;
            let report: Report = serde_json::from_str(&text).map_err(|source| Error::Json {
                path: input.clone(),
                source,
            })?;
            let rendered = match format {
                Format::Json => report.to_json(),
                Format::Csv => report.to_csv(),
            };
            emit(out, &rendered)
        }
        Command::Quantize => {
            let cfg = load_config(c)?;
            let dir = out.ok_or_else(|| Error::InvalidConfig("quantize needs --out <dir>".into()))?;
            let model = load_model(model_path(c)?)?;
            let (q, book) = quantize_model(&model, &cfg.cell()?)?;
            save_model(&q, dir)?;
            let path = dir.join("codebook.json");
            fs::write(&path, render_json(&book)).map_err(|source| Error::Io { path, source })
        }
        Command::Simulate | Command::Reorder | Command::Remap { .. } => {
            let cfg = load_config(c)?;
            let model = load_model(model_path(c)?)?;
            let (phases, aging) = match &cli.command {
                Command::Simulate => (None, AgingSource::FromConfig),
                Command::Reorder => (
                    Some(Phases {
                        reorder: true,
                        remap: false,
                    }),
                    AgingSource::FromConfig,
                ),
                Command::Remap { aging } => {
                    let source = match aging {
                        Some(p) => {
                            let text = fs::read_to_string(p).map_err(|source| Error::Io {
                                path: p.clone(),
                                source,
                            })?;
                            let profile: AgedProfile =
                                serde_json::from_str(&text).map_err(|source| Error::Json {
                                    path: p.clone(),
                                    source,
                                })?;
                            AgingSource::Profile(profile)
                        }
                        None => AgingSource::FromConfig,
                    };
                    (
                        Some(Phases {
                            reorder: true,
                            remap: true,
                        }),
                        source,
                    )
                }
                _ => unreachable!(),
            };
            let report = run_pipeline(&cfg, &model, phases, &aging)?;
            emit(out, &report.to_json())
        }
        Command::TrainToy { lambda_sweep } => {
            let cfg = load_config(c)?;
            let lambdas = lambda_sweep.clone().unwrap_or_else(|| vec![0.0, cfg.lambda]);
            let report = train_toy(&cfg.train_config()?, &lambdas)?;
            emit(out, &render_json(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("ELIGHT_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("thread pool is configured once");
            }
            _ => {
                eprintln!("error: ELIGHT_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

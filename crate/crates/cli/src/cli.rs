//! Argument parsing and command dispatch. Exit codes: 0 success, 1 runtime
//! failure, 2 invalid configuration.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use textalign::dataset::{load_dataset, validate_record, TabularSchema};

use crate::config::{Code, Diagnostic, HarnessConfig};
use crate::report::{self, Format};
use crate::run::{self, ProviderFactory, RunError, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "textalign", version, about = "Text-centric multimodal alignment robustness harness")]
pub struct Cli {
    /// Harness config (or a run manifest).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use the mock provider for every stage; never touches the network.
    #[arg(long, global = true)]
    pub offline: bool,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a config without running anything.
    Validate,
    /// Train and run sweeps; resumes an interrupted run with the same config.
    Run {
        /// Only this sweep (repeatable).
        #[arg(long = "sweep")]
        sweeps: Vec<String>,
        /// Only this pipeline (repeatable).
        #[arg(long = "pipeline")]
        pipelines: Vec<String>,
        /// Parent directory for run directories.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print comparison tables of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
    /// Dump every stage one record went through.
    Inspect {
        run_dir: PathBuf,
        record_id: String,
        #[arg(long)]
        sweep: Option<String>,
    },
}

impl Cli {
    fn load_config(&self) -> Result<HarnessConfig, String> {
        let path = self.config.as_ref().ok_or("--config is required")?;
        let mut config = HarnessConfig::load(path).map_err(|e| e.to_string())?;
        if let Some(dir) = &self.cache_dir {
            config.cache_dir = std::path::absolute(dir).unwrap_or_else(|_| dir.clone());
        }
        if let Some(seed) = self.seed {
            config.base_seed = seed;
        }
        if let Some(jobs) = self.jobs {
            config.jobs = jobs;
        }
        config.offline |= self.offline;
        Ok(config)
    }
}

/// Static checks plus a full dataset load when the files are in place.
pub fn validate(config: &HarnessConfig) -> Vec<Diagnostic> {
    let mut out = config.validate();
    if !out.is_empty() {
        return out;
    }
    let invalid = |message: String| Diagnostic { code: Code::DatasetInvalid, path: "dataset".into(), message };
    let loaded = TabularSchema::from_json_file(&config.dataset.schema).and_then(|schema| {
        load_dataset(
            &config.dataset.csv,
            &schema,
            config.dataset.captions.as_deref(),
            config.dataset.images_dir.as_deref(),
        )
        .map(|records| (schema, records))
    });
    match loaded {
        Err(e) => out.push(invalid(e.to_string())),
        Ok((schema, records)) => {
            let needs_caption =
                config.dataset.image_modality && config.captioner == crate::config::CaptionerConfig::Precomputed;
            for r in &records {
                for v in validate_record(r, &schema, config.dataset.image_modality) {
                    out.push(invalid(format!("record `{}`: {v}", r.id)));
                }
                if needs_caption && r.caption.is_none() {
                    out.push(invalid(format!("record `{}` has no caption", r.id)));
                }
            }
        }
    }
    out
}

pub fn execute(cli: &Cli, factory: &dyn ProviderFactory, out: &mut dyn Write) -> i32 {
    match dispatch(cli, factory, out) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

fn dispatch(cli: &Cli, factory: &dyn ProviderFactory, out: &mut dyn Write) -> Result<(), i32> {
    let fail = |code: i32| {
        move |e: anyhow::Error| {
            eprintln!("error: {e:#}");
            code
        }
    };
    let config = || {
        cli.load_config().map_err(|e| {
            eprintln!("error: {e}");
            EXIT_INVALID
        })
    };
    match &cli.command {
        Command::Validate => {
            let diagnostics = validate(&config()?);
            for d in &diagnostics {
                let _ = writeln!(out, "{d}");
            }
            if diagnostics.is_empty() {
                let _ = writeln!(out, "config ok");
                Ok(())
            } else {
                Err(EXIT_INVALID)
            }
        }
        Command::Run { sweeps, pipelines, output_dir } => {
            let mut config = config()?;
            if let Some(dir) = output_dir {
                config.output_dir = std::path::absolute(dir).unwrap_or_else(|_| dir.clone());
            }
            let options = RunOptions {
                offline: cli.offline,
                sweeps: (!sweeps.is_empty()).then(|| sweeps.clone()),
                pipelines: (!pipelines.is_empty()).then(|| pipelines.clone()),
            };
            match run::run(&config, &options, factory) {
                Ok(summary) => {
                    let _ = writeln!(out, "run {} -> {}", summary.run_id, summary.run_dir.display());
                    for p in &summary.reports {
                        let _ = writeln!(out, "  {}", p.display());
                    }
                    Ok(())
                }
                Err(RunError::Invalid(diagnostics)) => {
                    for d in &diagnostics {
                        let _ = writeln!(out, "{d}");
                    }
                    Err(EXIT_INVALID)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Err(e.exit_code())
                }
            }
        }
        Command::Report { run_dir, format } => {
            let text = report::render(run_dir, *format).map_err(fail(EXIT_FAILURE))?;
            let _ = out.write_all(text.as_bytes());
            Ok(())
        }
        Command::Inspect { run_dir, record_id, sweep } => {
            let text = report::inspect(run_dir, record_id, sweep.as_deref()).map_err(fail(EXIT_FAILURE))?;
            let _ = out.write_all(text.as_bytes());
            Ok(())
        }
    }
}

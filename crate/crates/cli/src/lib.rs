//! Command-line driver. `run_from` parses arguments, merges flags over the
//! TOML config and dispatches to one subcommand.
//!
//! Exit codes: 0 success, 1 some items failed, 2 configuration or usage error.

pub mod config;
pub mod evaluate;
pub mod extract;
pub mod generate;
pub mod manifest;
pub mod survival;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use neurofind_core::reportgen::TemplateVariant;
use neurofind_review::ReviewConfig;
use thiserror::Error;

use config::{BackendKind, ConfigError, PipelineConfig};
use evaluate::EvaluateArgs;
use manifest::{now, ItemRecord, RunManifest};
use survival::SurvivalArgs;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_PARTIAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "neurofind", version, about = "Brain-tumor MRI features, findings generation and evaluation")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker count for per-case parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where to write the run manifest (default: <out>/run_manifest.json).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TemplateArg {
    Full,
    Short,
}

fn parse_candidate(s: &str) -> Result<(String, PathBuf), String> {
    let (name, dir) = s.split_once('=').ok_or_else(|| format!("expected NAME=DIR, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(dir)))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract a feature document per case directory.
    Extract {
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        atlas_midline: Option<PathBuf>,
        #[arg(long)]
        anatomy_scheme: Option<PathBuf>,
    },
    /// Generate findings text from feature documents.
    Generate {
        /// Directory of *.features.json files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long, value_enum)]
        template: Option<TemplateArg>,
        #[arg(long)]
        template_file: Option<PathBuf>,
        #[arg(long)]
        examples_dir: Option<PathBuf>,
        #[arg(long)]
        llm_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Score candidate findings against references.
    Evaluate {
        #[arg(long)]
        references: PathBuf,
        /// NAME=DIR; repeat for several frameworks. The first is the
        /// significance-test baseline.
        #[arg(long = "candidate", value_parser = parse_candidate, required = true)]
        candidates: Vec<(String, PathBuf)>,
        /// Feature documents for report-vs-feature agreement.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// LLM-judged factuality (needs the openai backend).
        #[arg(long)]
        tbfact: bool,
        #[arg(long, default_value_t = 10_000)]
        ar_iters: usize,
    },
    /// Kaplan-Meier, log-rank and Cox analysis of a survival table.
    Survival {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        multivariate: bool,
    },
    /// Run the review service.
    Serve {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::IpAddr>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, value_delimiter = ',')]
        frameworks: Vec<String>,
    },
}

/// Loads the config file (if any) and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Extract {
            cases,
            out,
            atlas_midline,
            anatomy_scheme,
        } => {
            set(&mut cfg.paths.cases_dir, cases);
            set(&mut cfg.paths.output_dir, out);
            set(&mut cfg.paths.atlas_midline, atlas_midline);
            set(&mut cfg.paths.anatomy_scheme, anatomy_scheme);
        }
        Command::Generate {
            out,
            backend,
            template,
            template_file,
            examples_dir,
            llm_url,
            model,
            ..
        } => {
            set(&mut cfg.paths.output_dir, out);
            if let Some(b) = backend {
                cfg.generation.backend = *b;
            }
            if let Some(t) = template {
                cfg.generation.template = match t {
                    TemplateArg::Full => TemplateVariant::Full,
                    TemplateArg::Short => TemplateVariant::Short,
                };
            }
            set(&mut cfg.generation.template_file, template_file);
            set(&mut cfg.generation.examples_dir, examples_dir);
            if let Some(u) = llm_url {
                cfg.llm.base_url = u.clone();
            }
            if let Some(m) = model {
                cfg.llm.model = m.clone();
            }
        }
        Command::Evaluate { out, .. } | Command::Survival { out, .. } => set(&mut cfg.paths.output_dir, out),
        Command::Serve {
            data_dir,
            bind,
            port,
            frameworks,
        } => {
            set(&mut cfg.review.data_dir, data_dir);
            if let Some(b) = bind {
                cfg.review.bind = *b;
            }
            if let Some(p) = port {
                cfg.review.port = *p;
            }
            if !frameworks.is_empty() {
                cfg.review.frameworks = frameworks.clone();
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = Some(v.clone());
    }
}

fn serve(cfg: &PipelineConfig, manifest_path: Option<&std::path::Path>) -> Result<RunManifest, CliError> {
    let r = &cfg.review;
    let data_dir = r.data_dir.clone().ok_or(ConfigError::Missing("review.data_dir / --data-dir"))?;
    config::require_dir("review data directory", &data_dir)?;
    let mut rc = ReviewConfig::new(&data_dir, cfg.seed, r.frameworks.clone());
    if let Some(s) = &r.token_secret {
        rc.token_secret = s.as_bytes().to_vec();
    }
    neurofind_review::AppState::new(rc.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let manifest = RunManifest {
        command: "serve".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.digest(),
        seed: cfg.seed,
        jobs: cfg.jobs,
        started_at: now(),
        finished_at: String::new(),
        items: vec![ItemRecord::ok(format!("{}:{}", r.bind, r.port))],
        outputs: vec![],
    };
    if let Some(p) = manifest_path {
        manifest.write(p)?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(neurofind_review::serve(rc, SocketAddr::new(r.bind, r.port)))?;
    Ok(manifest)
}

pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    let cfg = resolve_config(&cli)?;
    let manifest = cli.manifest.as_deref();
    match &cli.command {
        Command::Extract { .. } => extract::cmd_extract(&cfg, manifest),
        Command::Generate { features, .. } => generate::cmd_generate(&cfg, features, manifest),
        Command::Evaluate {
            references,
            candidates,
            features,
            tbfact,
            ar_iters,
            ..
        } => evaluate::cmd_evaluate(
            &cfg,
            &EvaluateArgs {
                references: references.clone(),
                candidates: candidates.clone(),
                features: features.clone(),
                tbfact: *tbfact,
                ar_iters: *ar_iters,
            },
            manifest,
        ),
        Command::Survival {
            csv,
            covariates,
            multivariate,
            ..
        } => survival::cmd_survival(
            &cfg,
            &SurvivalArgs {
                csv: csv.clone(),
                covariates: covariates.clone(),
                multivariate: *multivariate,
            },
            manifest,
        ),
        Command::Serve { .. } => serve(&cfg, manifest),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(m) => {
            let failed = m.n_failed();
            if failed > 0 {
                eprintln!("{failed} of {} items failed; see the run manifest", m.items.len());
                EXIT_PARTIAL
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

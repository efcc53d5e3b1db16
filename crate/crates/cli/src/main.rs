use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use daf_cli::commands::{self, Console, ReportFormat, TrainInput};
use daf_cli::fixture::{self, FixtureSpec};
use daf_cli::manifest::Manifest;
use daf_cli::{CliError, CliResult};
use daf_core::config::RunConfig;
use daf_core::imageio::PerturbSpec;
use daf_core::residency::Residency;

#[derive(Parser)]
#[command(name = "daf", version, about = "Dynamic assembly forest detector for generated images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Run configuration file (key = value); defaults apply when omitted.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set grid=8. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }

    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

fn parse_perturb(s: &str) -> Result<PerturbSpec, String> {
    s.parse::<PerturbSpec>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Extract features of every manifest image into a cache file.
    Extract {
        #[arg(long, short = 'm')]
        manifest: Option<PathBuf>,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model from a feature cache or a manifest.
    Train {
        #[arg(long, conflicts_with = "manifest")]
        cache: Option<PathBuf>,
        #[arg(long, short = 'm')]
        manifest: Option<PathBuf>,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Training log path; defaults to the model path plus ".log".
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print "path<TAB>score" for each input image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Accuracy and AUC per tag and overall on a labeled manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, short = 'm')]
        manifest: PathBuf,
        /// blur:SIGMA or jpeg:QUALITY, applied after resizing.
        #[arg(long, value_parser = parse_perturb)]
        perturb: Option<PerturbSpec>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate the synthetic labeled corpus.
    Fixture {
        #[arg(long, short = 'o')]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = fixture::DEFAULT_AMPLITUDE)]
        amplitude: f64,
        #[arg(long, default_value_t = fixture::DEFAULT_SIZE)]
        size: usize,
    },
    /// Summarize a model as JSON, or dump last-layer class vectors.
    Inspect {
        model: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        dump_last_layer: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Build a manifest from ROOT/real/** and ROOT/<generator>/** trees.
    ManifestFromDirs {
        root: PathBuf,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set '{name}' in the config)")))
}

fn run(cli: Cli, con: &mut Console<'_>) -> CliResult<()> {
    match cli.command {
        Command::Extract { manifest, out, config } => {
            let cfg = config.load()?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let out = required(out, &cfg.paths.cache, "cache")?;
            commands::cmd_extract(&Manifest::read(&manifest)?, &cfg, &out, con)
        }
        Command::Train { cache, manifest, out, log, config } => {
            let cfg = config.load()?;
            let out = required(out, &cfg.paths.model, "model")?;
            let manifest = manifest.or_else(|| cache.is_none().then(|| cfg.paths.manifest.clone()).flatten());
            let cache = cache.or_else(|| manifest.is_none().then(|| cfg.paths.cache.clone()).flatten());
            let loaded;
            let input = match (&cache, &manifest) {
                (Some(c), _) => TrainInput::Cache(c),
                (None, Some(m)) => {
                    loaded = Manifest::read(m)?;
                    TrainInput::Manifest(&loaded)
                }
                (None, None) => return Err(CliError::Usage("--cache or --manifest is required".into())),
            };
            commands::cmd_train(input, &cfg, &out, log.as_deref(), Residency::disabled(), con).map(|_| ())
        }
        Command::Predict { model, inputs, config } => {
            let cfg = config.given().then(|| config.load()).transpose()?;
            commands::cmd_predict(&model, cfg.as_ref(), &inputs, con).map(|_| ())
        }
        Command::Eval { model, manifest, perturb, format, report, config } => {
            let cfg = config.given().then(|| config.load()).transpose()?;
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Table => ReportFormat::Table,
            };
            let (r, _) = commands::cmd_eval(&model, &Manifest::read(&manifest)?, perturb, cfg.as_ref(), format, con)?;
            if let Some(path) = report {
                std::fs::write(&path, r.to_json()).map_err(|e| daf_core::DafError::io(&path, e))?;
            }
            Ok(())
        }
        Command::Fixture { out, count, seed, amplitude, size } => {
            if !(amplitude >= 0.0 && amplitude.is_finite()) || size == 0 {
                return Err(CliError::Usage("amplitude must be >= 0 and size positive".into()));
            }
            let spec = FixtureSpec { amplitude, size, ..FixtureSpec::new(count, seed) };
            commands::cmd_fixture(&out, &spec, con).map(|_| ())
        }
        Command::Inspect { model, dump_last_layer, config } => {
            let cfg = config.given().then(|| config.load()).transpose()?;
            let dump = dump_last_layer.as_deref().map(Manifest::read).transpose()?;
            commands::cmd_inspect(&model, dump.as_ref(), cfg.as_ref(), con)
        }
        Command::ManifestFromDirs { root, out } => {
            let out = out.unwrap_or_else(|| Path::new(&root).join("manifest.csv"));
            commands::cmd_manifest_from_dirs(&root, &out, con).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (stdout, stderr) = (std::io::stdout(), std::io::stderr());
    let (mut out, mut err) = (stdout.lock(), stderr.lock());
    let mut con = Console { out: &mut out, err: &mut err };
    let code = match run(cli, &mut con) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(con.err, "error: {e}");
            e.exit_code()
        }
    };
    let _ = con.out.flush();
    ExitCode::from(code as u8)
}

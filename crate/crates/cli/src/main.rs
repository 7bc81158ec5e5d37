use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use txie::llm::{Backend, HttpBackend, HttpConfig, MeanKind, ReplayBackend};
use txie::pipeline::{
    cmd_distill, cmd_evaluate, cmd_extract, cmd_resolve, cmd_select, cmd_validate, load_dataset, load_schema_file,
    survivors_file, FileConfig, PipelineError, RunConfig, Subset, CANDIDATES_FILE, DISTILL_FILE, SELECTED_FILE,
    VERDICTS_FILE,
};
use txie::schema::to_output_schema;
use txie::validation::FilterLevel;
use txie::Decimal;

const API_KEY_VARS: [&str; 2] = ["TXIE_API_KEY", "OPENAI_API_KEY"];

/// Validation-first extraction pipeline for invoices and receipts.
#[derive(Parser, Debug)]
#[command(name = "txie", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Schema TOML file (builtin transactional schema by default).
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    /// Relative tolerance for equation checks.
    #[arg(long, global = true)]
    tolerance: Option<String>,
    /// Run directory for all pipeline files.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Maximum documents processed in parallel.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// How token probabilities are averaged for selection.
    #[arg(long, global = true, value_enum)]
    mean: Option<Mean>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate candidates for every dataset document.
    Extract {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        /// Chat-completions base URL (http backend).
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Candidate fixture JSONL (replay backend).
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        max_tokens: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Attach document images where the dataset names one.
        #[arg(long)]
        image: bool,
    },
    /// Run the validation cascade on every candidate.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        /// Filter whose surviving documents are listed.
        #[arg(long, value_enum, default_value_t = Level::Domain)]
        level: Level,
    },
    /// Pick the most probable fully valid candidate per document.
    Select {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score candidates against ground truth and write the filter table.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export prompt/completion pairs for fine-tuning.
    Distill {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SubsetArg::Domain)]
        subset: SubsetArg,
    },
    /// Resolve one explicit JSON document and print the result.
    Resolve { document: PathBuf },
    /// Print the output JSON schema (or the schema definition as TOML).
    Schema {
        #[arg(long, value_enum, default_value_t = SchemaFormat::Json)]
        format: SchemaFormat,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BackendKind {
    Http,
    Replay,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Level {
    Syntactic,
    Task,
    Domain,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SubsetArg {
    Base,
    Domain,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mean {
    Arithmetic,
    Geometric,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemaFormat {
    Json,
    Toml,
}

fn usage(msg: impl Into<String>) -> PipelineError {
    PipelineError::Usage(msg.into())
}

fn run_config(common: &Common, file: &FileConfig) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::new(&common.out);
    config.schema = load_schema_file(common.schema.as_deref().or(file.schema.as_deref()))?;
    if let Some(t) = common.tolerance.as_ref().or(file.tolerance.as_ref()) {
        config.rel_tol = Decimal::from_str(t).map_err(|_| usage(format!("invalid tolerance `{t}`")))?;
    }
    if let Some(c) = common.concurrency.or(file.concurrency) {
        config.concurrency = c.max(1);
    }
    config.mean = match common.mean {
        Some(Mean::Arithmetic) => MeanKind::Arithmetic,
        Some(Mean::Geometric) => MeanKind::Geometric,
        None => file.mean.unwrap_or_default(),
    };
    config.check()?;
    Ok(config)
}

fn backend(
    kind: Option<BackendKind>,
    endpoint: Option<String>,
    model: Option<String>,
    fixtures: Option<PathBuf>,
    file: &FileConfig,
) -> Result<Box<dyn Backend>, PipelineError> {
    let kind = match (kind, file.backend.as_deref()) {
        (Some(k), _) => k,
        (None, Some("http")) => BackendKind::Http,
        (None, Some("replay")) => BackendKind::Replay,
        (None, Some(other)) => return Err(usage(format!("unknown backend `{other}`"))),
        (None, None) => return Err(usage("--backend is required (http or replay)")),
    };
    match kind {
        BackendKind::Replay => {
            let path = fixtures
                .or_else(|| file.fixtures.clone())
                .ok_or_else(|| usage("--fixtures is required for the replay backend"))?;
            Ok(Box::new(ReplayBackend::from_jsonl(&path)?))
        }
        BackendKind::Http => {
            let endpoint = endpoint
                .or_else(|| file.endpoint.clone())
                .ok_or_else(|| usage("--endpoint is required for the http backend"))?;
            let model = model
                .or_else(|| file.model.clone())
                .ok_or_else(|| usage("--model is required for the http backend"))?;
            let mut config = HttpConfig::new(endpoint, model);
            config.api_key = API_KEY_VARS.iter().find_map(|v| std::env::var(v).ok());
            Ok(Box::new(HttpBackend::new(config)?))
        }
    }
}

fn filter_level(level: Level) -> FilterLevel {
    match level {
        Level::Syntactic => FilterLevel::Syntactic,
        Level::Task => FilterLevel::Task,
        Level::Domain => FilterLevel::Domain,
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let file = match &cli.common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut config = run_config(&cli.common, &file)?;
    match cli.command {
        Command::Extract {
            dataset,
            backend: kind,
            endpoint,
            model,
            fixtures,
            temperature,
            samples,
            max_tokens,
            seed,
            image,
        } => {
            let dataset = load_dataset(&dataset)?;
            config.temperature = temperature.or(file.temperature).unwrap_or(config.temperature);
            config.n_samples = samples.or(file.samples).unwrap_or(config.n_samples);
            config.max_tokens = max_tokens.or(file.max_tokens);
            config.seed = seed.or(file.seed);
            config.include_image = image || file.image.unwrap_or(false);
            config.check()?;
            let backend = backend(kind, endpoint, model, fixtures, &file)?;
            let s = cmd_extract(&dataset, backend.as_ref(), &config)?;
            println!(
                "{} documents: {} candidates generated, {} skipped, {} failed -> {}",
                s.documents,
                s.generated,
                s.skipped,
                s.failed,
                show(&config.out_dir.join(CANDIDATES_FILE))
            );
        }
        Command::Validate { dataset, level } => {
            let dataset = load_dataset(&dataset)?;
            let level = filter_level(level);
            let s = cmd_validate(&dataset, &config, level)?;
            println!("{} candidates over {} documents", s.candidates, s.documents);
            for (filter, n) in s.surviving {
                println!("  {:<10} {n} documents remaining", filter.name());
            }
            println!(
                "-> {}, {}",
                show(&config.out_dir.join(VERDICTS_FILE)),
                show(&config.out_dir.join(survivors_file(level)))
            );
        }
        Command::Select { dataset } => {
            let dataset = load_dataset(&dataset)?;
            let selected = cmd_select(&dataset, &config)?;
            println!(
                "{} of {} documents selected -> {}",
                selected.len(),
                dataset.len(),
                show(&config.out_dir.join(SELECTED_FILE))
            );
        }
        Command::Evaluate { dataset } => {
            let dataset = load_dataset(&dataset)?;
            let table = cmd_evaluate(&dataset, &config)?;
            print!("{}", table.to_text());
        }
        Command::Distill { dataset, subset } => {
            let dataset = load_dataset(&dataset)?;
            let subset = match subset {
                SubsetArg::Base => Subset::Base,
                SubsetArg::Domain => Subset::Domain,
            };
            let records = cmd_distill(&dataset, &config, subset)?;
            println!("{} records -> {}", records.len(), show(&config.out_dir.join(DISTILL_FILE)));
        }
        Command::Resolve { document } => {
            let text = std::fs::read_to_string(&document).map_err(|source| PipelineError::Io {
                path: document.clone(),
                source,
            })?;
            let value = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", document.display())))?;
            let out = cmd_resolve(&value, &config.schema, config.rel_tol)?;
            println!("{}", serde_json::to_string_pretty(&out).expect("serialisable"));
        }
        Command::Schema { format } => match format {
            SchemaFormat::Json => println!(
                "{}",
                serde_json::to_string_pretty(&to_output_schema(&config.schema)).expect("serialisable")
            ),
            SchemaFormat::Toml => print!("{}", config.schema.to_toml()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

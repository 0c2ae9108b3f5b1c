use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histotile_core::config::{ConfigError, PipelineConfig};
use histotile_core::pipeline::{Pipeline, PipelineError, Stage};
use histotile_core::synth::{write_cohort, CohortOptions};

/// Whole-slide tiling, stain normalization and VGG-style SCC/AC classification.
#[derive(Debug, Parser)]
#[command(name = "histotile", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, env = "HISTOTILE_THREADS")]
    threads: Option<usize>,

    /// Log stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List pyramid levels of every slide in slides.tsv.
    Inspect,
    /// Cut slides into tiles at the target magnification.
    Tile,
    /// Reject background and low-tissue tiles.
    Filter,
    /// Estimate per-slide stain profiles and normalize kept tiles.
    Normalize,
    /// Assign train / validation / test per class.
    Split,
    /// Extract backbone features and train the stage-1 logistic head.
    Features,
    /// Fine-tune the network with frozen leading blocks.
    Train,
    /// Score the fine-tuned network on the test split.
    Eval,
    /// Run tile, filter, normalize, split, features, train and eval.
    Pipeline,
    /// Write a synthetic slide cohort and its slides.tsv.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    slides_per_class: usize,
    #[arg(long, default_value_t = 5120)]
    width: usize,
    #[arg(long, default_value_t = 3584)]
    height: usize,
    #[arg(long = "synth-seed", default_value_t = 0)]
    synth_seed: u64,
}

/// Flags that override config keys of the same name.
#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    work_dir: Option<String>,
    #[arg(long, global = true)]
    slides_dir: Option<String>,
    #[arg(long, global = true)]
    manifest: Option<String>,
    #[arg(long, global = true)]
    target_mag: Option<String>,
    #[arg(long, global = true)]
    tile_size: Option<String>,
    #[arg(long, global = true)]
    white_threshold: Option<String>,
    #[arg(long, global = true)]
    min_tissue: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[arg(long, global = true)]
    reference_profile: Option<String>,
    #[arg(long, global = true)]
    train_n: Option<String>,
    #[arg(long, global = true)]
    val_n: Option<String>,
    #[arg(long, global = true)]
    test_n: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    by_slide: bool,
    #[arg(long, global = true)]
    epochs: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    learning_rate: Option<String>,
    #[arg(long, global = true)]
    momentum: Option<String>,
    #[arg(long, global = true)]
    freeze_blocks: Option<String>,
    #[arg(long, global = true)]
    input_size: Option<String>,
    #[arg(long, global = true)]
    width_scale: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let named = [
            ("work_dir", &self.work_dir),
            ("slides_dir", &self.slides_dir),
            ("manifest", &self.manifest),
            ("target_mag", &self.target_mag),
            ("tile_size", &self.tile_size),
            ("white_threshold", &self.white_threshold),
            ("min_tissue", &self.min_tissue),
            ("beta", &self.beta),
            ("alpha", &self.alpha),
            ("reference_profile", &self.reference_profile),
            ("train_n", &self.train_n),
            ("val_n", &self.val_n),
            ("test_n", &self.test_n),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("freeze_blocks", &self.freeze_blocks),
            ("input_size", &self.input_size),
            ("width_scale", &self.width_scale),
        ];
        let mut out: Vec<(String, String)> = named
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if self.by_slide {
            out.push(("by_slide".into(), "true".into()));
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::InvalidValue {
                key: "--set".into(),
                value: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

fn report(err: &PipelineError) -> ExitCode {
    let line = serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    });
    eprintln!("{line}");
    ExitCode::from(err.exit_code() as u8)
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Data(format!("thread pool: {e}")))?;
    }
    if let Command::Synth(args) = &cli.command {
        let opts = CohortOptions {
            slides_per_class: args.slides_per_class,
            width: args.width,
            height: args.height,
            seed: args.synth_seed,
        };
        let entries = write_cohort(&args.out, &opts).map_err(|e| PipelineError::Data(e.to_string()))?;
        return Ok(format!("{} slides written to {}", entries.len(), args.out.display()));
    }
    let config = PipelineConfig::load(cli.config.as_deref(), &cli.overrides.pairs()?)?;
    let pipeline = Pipeline::new(config);
    let stage = match cli.command {
        Command::Inspect => Stage::Inspect,
        Command::Tile => Stage::Tile,
        Command::Filter => Stage::Filter,
        Command::Normalize => Stage::Normalize,
        Command::Split => Stage::Split,
        Command::Features => Stage::Features,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Pipeline => return pipeline.run_all(),
        Command::Synth(_) => unreachable!("handled above"),
    };
    pipeline.run(stage)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(summary) => {
            let summary = summary.trim_end();
            if !summary.is_empty() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

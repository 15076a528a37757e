//! Subcommand implementations behind the `distractor` binary.
//!
//! Exit codes: 0 success, 1 usage errors (handled by the parser in main),
//! 2 bad inputs or configuration, 3 failures while running.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};

use distractor::config::{Manifest, RunConfig};
use distractor::data::{
    load_dataset, load_pools, save_dataset, save_pools, save_predictions, ClozeInstance,
    NormalizationPolicy, ParseMode,
};
use distractor::metrics::{evaluate, metrics_table, pair_with_gold};
use distractor::pipeline::{
    align_pools, build_pools, infer_dataset, run_ablation, standard_conditions, train,
    validate_pool, ablation_csv, CandidateGenerator, FrequencyGenerator, PolicyGenerator,
};
use distractor::policy::PolicyModel;
use distractor::synth::{build_corpus, experiment_config};

#[derive(Debug)]
pub struct AppError {
    pub error: anyhow::Error,
    pub code: i32,
}

impl AppError {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            error: error.into(),
            code: 2,
        }
    }

    fn run(error: impl Into<anyhow::Error>) -> Self {
        Self {
            error: error.into(),
            code: 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "distractor",
    version,
    about = "Train and evaluate cloze-test distractor ranking policies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the built-in synthetic corpus and its candidate pools.
    GenData(GenDataArgs),
    /// Train a policy from a dataset and candidate pools.
    Train(TrainArgs),
    /// Predict for a dataset and score against its gold distractors.
    Eval(EvalArgs),
    /// Predict top-k distractors for a dataset.
    Infer(InferArgs),
    /// Compare the five training conditions on the synthetic corpus.
    Ablate(AblateArgs),
}

/// Where inference candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CandidateSource {
    /// Tokens frequent as answers or golds elsewhere in the dataset.
    Frequency,
    /// Tokens the trained policy itself ranks highest.
    Policy,
}

/// Config resolution shared by all subcommands: defaults, then an optional
/// file, then typed flags, then raw --set pairs.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Key=value config file applied before flag overrides.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long, value_name = "adaptive|constant")]
    pub scale_mode: Option<String>,
    #[arg(long)]
    pub constant_scale: Option<f64>,
    #[arg(long, value_name = "dual|uniform")]
    pub reward_mode: Option<String>,
    #[arg(long)]
    pub gen_coefficient: Option<f64>,
    #[arg(long)]
    pub n_topics: Option<usize>,
    #[arg(long)]
    pub per_topic: Option<usize>,
    /// Any config key, repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve_from(&self, mut config: RunConfig) -> Result<RunConfig, AppError> {
        if let Some(path) = &self.config {
            config.apply_file(path).map_err(AppError::input)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        if let Some(batch_size) = self.batch_size {
            config.batch_size = batch_size;
        }
        if let Some(lr) = self.lr {
            config.lr = lr;
        }
        if let Some(dim) = self.feature_dim {
            config.feature_dim = dim;
        }
        if let Some(mode) = &self.scale_mode {
            config.apply("scale_mode", mode).map_err(AppError::input)?;
        }
        if let Some(scale) = self.constant_scale {
            config.constant_scale = scale;
        }
        if let Some(mode) = &self.reward_mode {
            config.apply("reward_mode", mode).map_err(AppError::input)?;
        }
        if let Some(coefficient) = self.gen_coefficient {
            config.gen_coefficient = coefficient;
        }
        if let Some(n) = self.n_topics {
            config.n_topics = n;
        }
        if let Some(n) = self.per_topic {
            config.per_topic = n;
        }
        for pair in &self.set {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                AppError::input(anyhow!("--set expects KEY=VALUE, got {pair:?}"))
            })?;
            config
                .apply(key.trim(), value.trim())
                .map_err(AppError::input)?;
        }
        config.validate().map_err(AppError::input)?;
        Ok(config)
    }

    pub fn resolve(&self) -> Result<RunConfig, AppError> {
        self.resolve_from(RunConfig::default())
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Directory for train.jsonl, pools.jsonl, and run records.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL dataset of cloze instances.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Candidate pools to train on; built by frequency when omitted.
    #[arg(long, value_name = "FILE")]
    pub pools: Option<PathBuf>,
    /// Directory for checkpoint.json, trajectory.csv, and run records.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL dataset with gold distractors to score against.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Candidate source for inference.
    #[arg(long, value_enum, default_value_t = CandidateSource::Frequency)]
    pub candidates: CandidateSource,
    /// Directory for predictions.jsonl, report.json, and run records.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// JSONL dataset of cloze instances.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Candidate source for inference.
    #[arg(long, value_enum, default_value_t = CandidateSource::Frequency)]
    pub candidates: CandidateSource,
    /// Directory for predictions.jsonl and run records.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory for ablation.csv and run records.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Seeds per condition, numbered seed, seed+1, ...
    #[arg(long, default_value_t = 5)]
    pub num_seeds: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn ensure_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path).map_err(|e| {
        AppError::run(anyhow!(
            "cannot create output directory {}: {e}",
            path.display()
        ))
    })
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn load_instances(path: &Path, config: &RunConfig) -> Result<Vec<ClozeInstance>, AppError> {
    let dataset = load_dataset(path, &NormalizationPolicy::default(), config.parse_mode())
        .map_err(AppError::input)?;
    if config.parse_mode() == ParseMode::Lenient && !dataset.rejected.is_empty() {
        eprintln!(
            "warning: skipped {} malformed lines in {}",
            dataset.rejected.len(),
            path.display()
        );
    }
    if dataset.instances.is_empty() {
        return Err(AppError::input(anyhow!(
            "dataset {} has no usable instances",
            path.display()
        )));
    }
    Ok(dataset.instances)
}

/// The ablation's starting hyperparameters; tuned for the synthetic corpus.
fn experiment_base() -> RunConfig {
    let tuned = experiment_config();
    RunConfig {
        epochs: tuned.epochs,
        batch_size: tuned.batch_size,
        lr: tuned.optimizer.lr,
        eps: tuned.optimizer.eps,
        feature_dim: tuned.feature.dim,
        ..RunConfig::default()
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let config = args.config.resolve()?;
    let corpus = build_corpus(&config.synth_config()).map_err(AppError::input)?;
    let pools = build_pools(&corpus.instances, &corpus.generator, &config.pool_config())
        .map_err(AppError::run)?;
    ensure_dir(&args.out_dir)?;
    let data_path = args.out_dir.join("train.jsonl");
    let pools_path = args.out_dir.join("pools.jsonl");
    save_dataset(&data_path, &corpus.instances).map_err(AppError::run)?;
    save_pools(&pools_path, &pools).map_err(AppError::run)?;
    let config_path = args.out_dir.join("effective.cfg");
    config.save(&config_path).map_err(AppError::run)?;
    let mut manifest = Manifest::new("gen-data", &config);
    manifest.outputs = vec![
        display(&data_path),
        display(&pools_path),
        display(&config_path),
    ];
    manifest
        .save(args.out_dir.join("manifest.json"))
        .map_err(AppError::run)?;
    println!(
        "wrote {} instances and {} pools to {}",
        corpus.instances.len(),
        pools.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let config = args.config.resolve()?;
    let instances = load_instances(&args.data, &config)?;
    let pools = match &args.pools {
        Some(path) => {
            let pools = load_pools(path).map_err(AppError::input)?;
            let aligned = align_pools(&instances, &pools).map_err(AppError::input)?;
            for (instance, pool) in instances.iter().zip(&aligned) {
                validate_pool(pool, instance, &config.pool_config()).map_err(AppError::input)?;
            }
            pools
        }
        None => {
            let generator = FrequencyGenerator::from_corpus(&instances);
            build_pools(&instances, &generator, &config.pool_config()).map_err(AppError::run)?
        }
    };
    let output = train(&instances, &pools, &config.train_config()).map_err(AppError::run)?;
    ensure_dir(&args.out_dir)?;
    let checkpoint_path = args.out_dir.join("checkpoint.json");
    let trajectory_path = args.out_dir.join("trajectory.csv");
    let pools_path = args.out_dir.join("pools.jsonl");
    let config_path = args.out_dir.join("effective.cfg");
    output.model.save(&checkpoint_path).map_err(AppError::run)?;
    distractor::pipeline::save_trajectory(&trajectory_path, &output.trajectory)
        .map_err(AppError::run)?;
    save_pools(&pools_path, &pools).map_err(AppError::run)?;
    config.save(&config_path).map_err(AppError::run)?;
    let mut manifest = Manifest::new("train", &config);
    manifest.inputs.push(display(&args.data));
    if let Some(path) = &args.pools {
        manifest.inputs.push(display(path));
    }
    manifest.outputs = vec![
        display(&checkpoint_path),
        display(&trajectory_path),
        display(&pools_path),
        display(&config_path),
    ];
    manifest
        .save(args.out_dir.join("manifest.json"))
        .map_err(AppError::run)?;
    let last = output.trajectory.last();
    println!(
        "trained on {} instances for {} steps (final batch nll {})",
        instances.len(),
        output.trajectory.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.batch_nll))
    );
    Ok(())
}

fn make_generator<'a>(
    source: CandidateSource,
    instances: &[ClozeInstance],
    model: &'a PolicyModel,
) -> Box<dyn CandidateGenerator + 'a> {
    match source {
        CandidateSource::Frequency => Box::new(FrequencyGenerator::from_corpus(instances)),
        CandidateSource::Policy => Box::new(PolicyGenerator::new(model)),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    let config = args.config.resolve()?;
    let instances = load_instances(&args.data, &config)?;
    let model = PolicyModel::load(&args.checkpoint).map_err(AppError::input)?;
    let generator = make_generator(args.candidates, &instances, &model);
    let records = infer_dataset(&model, &instances, generator.as_ref(), &config.infer_config())
        .map_err(AppError::run)?;
    let pairs = pair_with_gold(&records, &instances).map_err(AppError::run)?;
    let evaluation = evaluate(&pairs).map_err(AppError::run)?;
    ensure_dir(&args.out_dir)?;
    let predictions_path = args.out_dir.join("predictions.jsonl");
    let report_path = args.out_dir.join("report.json");
    let config_path = args.out_dir.join("effective.cfg");
    save_predictions(&predictions_path, &records).map_err(AppError::run)?;
    let rounded = evaluation.aggregate.rounded();
    let mut report = serde_json::to_string_pretty(&rounded).expect("report serializes");
    report.push('\n');
    std::fs::write(&report_path, report)
        .map_err(|e| AppError::run(anyhow!("cannot write {}: {e}", report_path.display())))?;
    config.save(&config_path).map_err(AppError::run)?;
    let mut manifest = Manifest::new("eval", &config);
    manifest.inputs = vec![display(&args.data), display(&args.checkpoint)];
    manifest.outputs = vec![
        display(&predictions_path),
        display(&report_path),
        display(&config_path),
    ];
    manifest.metrics = Some(rounded);
    manifest
        .save(args.out_dir.join("manifest.json"))
        .map_err(AppError::run)?;
    print!(
        "{}",
        metrics_table(&[("eval".to_string(), evaluation.aggregate)])
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), AppError> {
    let config = args.config.resolve()?;
    let instances = load_instances(&args.data, &config)?;
    let model = PolicyModel::load(&args.checkpoint).map_err(AppError::input)?;
    let generator = make_generator(args.candidates, &instances, &model);
    let records = infer_dataset(&model, &instances, generator.as_ref(), &config.infer_config())
        .map_err(AppError::run)?;
    ensure_dir(&args.out_dir)?;
    let predictions_path = args.out_dir.join("predictions.jsonl");
    let config_path = args.out_dir.join("effective.cfg");
    save_predictions(&predictions_path, &records).map_err(AppError::run)?;
    config.save(&config_path).map_err(AppError::run)?;
    let mut manifest = Manifest::new("infer", &config);
    manifest.inputs = vec![display(&args.data), display(&args.checkpoint)];
    manifest.outputs = vec![display(&predictions_path), display(&config_path)];
    manifest
        .save(args.out_dir.join("manifest.json"))
        .map_err(AppError::run)?;
    println!(
        "wrote {} predictions to {}",
        records.len(),
        predictions_path.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), AppError> {
    if args.num_seeds == 0 {
        return Err(AppError::input(anyhow!("--num-seeds must be at least 1")));
    }
    let config = args.config.resolve_from(experiment_base())?;
    let corpus = build_corpus(&config.synth_config()).map_err(AppError::input)?;
    let pools = build_pools(&corpus.instances, &corpus.generator, &config.pool_config())
        .map_err(AppError::run)?;
    let seeds: Vec<u64> = (0..args.num_seeds as u64).map(|i| config.seed + i).collect();
    let rows = run_ablation(
        &config.train_config(),
        &standard_conditions(),
        &seeds,
        &corpus.instances,
        &pools,
        &corpus.instances,
        &corpus.generator,
        &config.infer_config(),
    )
    .map_err(AppError::run)?;
    ensure_dir(&args.out_dir)?;
    let csv_path = args.out_dir.join("ablation.csv");
    let config_path = args.out_dir.join("effective.cfg");
    std::fs::write(&csv_path, ablation_csv(&rows))
        .map_err(|e| AppError::run(anyhow!("cannot write {}: {e}", csv_path.display())))?;
    config.save(&config_path).map_err(AppError::run)?;
    let mut manifest = Manifest::new("ablate", &config);
    manifest.outputs = vec![display(&csv_path), display(&config_path)];
    manifest
        .save(args.out_dir.join("manifest.json"))
        .map_err(AppError::run)?;
    print!("{}", metrics_table(&rows));
    Ok(())
}

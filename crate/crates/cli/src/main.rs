use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use tsummary::dataset::{self, load_corpus, save_corpus, Corpus};
use tsummary::evaluate::{
    self, sha256_hex, ClusterSummaryModel, Comparison, EvaluationReport, Method, Prepared,
};
use tsummary::features::featurize;
use tsummary::par::{self, Execution};
use tsummary::reference::ReferencePanel;
use tsummary::regress::Aggregation;
use tsummary::summarize::{summarize_corpus, write_summaries_csv};
use tsummary::vbgmm::MixtureModel;

mod config;

use config::{Overrides, PipelineConfig};

const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "tsummary", version, about = "Cluster-ratio summaries of variable-length time series")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    window_length: Option<usize>,
    /// Comma-separated method names.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, global = true, value_parser = ["sum", "mean"])]
    aggregation: Option<String>,
    /// Run folds concurrently on this many threads.
    #[arg(long, global = true)]
    parallel_folds: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus directory (or its manifest.csv).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// More diagnostics on standard error (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus to the output directory.
    Generate,
    /// Write the window feature table (features.csv).
    Featurize,
    /// Fit the mixture, classifier and regression suite on the whole corpus.
    Fit,
    /// Write summaries.csv for a corpus using a stored mixture model.
    Summarize {
        /// A model_gmm.json written by `fit` or `run`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Leave-one-subject-out evaluation of the configured methods.
    Evaluate,
    /// Generate (if no corpus is given), fit, summarize and evaluate.
    Run,
}

/// A failure tagged with the exit code it maps to.
enum Failure {
    /// Bad flags or configuration: exit 2.
    Config(anyhow::Error),
    /// A pipeline stage failed: exit 1.
    Stage(&'static str, anyhow::Error),
}

trait StageExt<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(name, e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(stage, e)) => {
            eprintln!("error in stage `{stage}`: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let methods = cli
        .methods
        .as_ref()
        .map(|names| names.iter().map(|n| n.trim().parse::<Method>()).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    let aggregation = cli.aggregation.as_deref().map(str::parse::<Aggregation>).transpose()?;
    config.apply(&Overrides {
        seed: cli.seed,
        window_length: cli.window_length,
        methods,
        aggregation,
        out: cli.out.clone(),
        corpus: cli.corpus.clone(),
    });
    config.validate()?;
    Ok(config)
}

fn execution(cli: &Cli) -> Result<(Execution, usize)> {
    match cli.parallel_folds {
        None | Some(1) => Ok((Execution::Sequential, 1)),
        Some(0) => Err(anyhow!("--parallel-folds must be at least 1")),
        Some(n) => {
            if !cfg!(feature = "parallel") {
                log::warn!("built without the `parallel` feature; folds run sequentially");
            }
            Ok((Execution::Parallel, n))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli).map_err(Failure::Config)?;
    let (exec, threads) = execution(&cli).map_err(Failure::Config)?;
    let out = config.io.out.clone();
    let body = || match &cli.command {
        Command::Generate => cmd_generate(&config, &out),
        Command::Featurize => cmd_featurize(&config, &out, exec),
        Command::Fit => cmd_fit(&config, &out, exec),
        Command::Summarize { model } => cmd_summarize(&config, model, &out, exec),
        Command::Evaluate => cmd_evaluate(&config, &out, exec, false),
        Command::Run => cmd_evaluate(&config, &out, exec, true),
    };
    if exec == Execution::Parallel {
        par::with_threads(threads, body)
    } else {
        body()
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .stage("output")
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .stage("output")
}

fn open_writer(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot write {}", path.display()))
        .stage("output")
}

fn generate_into(config: &PipelineConfig, dir: &Path) -> Result<Corpus, Failure> {
    let corpus = dataset::generate_synthetic(&config.synthetic, config.seed).stage("generate")?;
    create_dir(dir)?;
    save_corpus(&corpus, dir).stage("generate")?;
    log::info!(
        "wrote {} bouts from {} subjects to {}",
        corpus.bouts().len(),
        corpus.subjects().len(),
        dir.display()
    );
    Ok(corpus)
}

fn cmd_generate(config: &PipelineConfig, out: &Path) -> Result<(), Failure> {
    let corpus = generate_into(config, out)?;
    println!(
        "bouts={} subjects={} classes={} seed={}",
        corpus.bouts().len(),
        corpus.subjects().len(),
        corpus.label_set().len(),
        config.seed
    );
    Ok(())
}

fn require_corpus(config: &PipelineConfig) -> Result<Corpus, Failure> {
    let path = config
        .io
        .corpus
        .as_ref()
        .ok_or_else(|| Failure::Config(anyhow!("no corpus given: pass --corpus or set io.corpus")))?;
    load(path, config.window_length)
}

fn load(path: &Path, window_length: usize) -> Result<Corpus, Failure> {
    let corpus = load_corpus(path, window_length).stage("load")?;
    log::info!("loaded {} bouts from {}", corpus.bouts().len(), path.display());
    Ok(corpus)
}

fn cmd_featurize(config: &PipelineConfig, out: &Path, exec: Execution) -> Result<(), Failure> {
    let corpus = require_corpus(config)?;
    let table = featurize(&corpus, config.window_length, exec).stage("featurize")?;
    create_dir(out)?;
    let path = out.join("features.csv");
    table.write_csv(open_writer(&path)?).stage("featurize")?;
    println!("windows={} dim={} file={}", table.window_count(), table.dim, path.display());
    Ok(())
}

fn write_models(model: &ClusterSummaryModel, out: &Path) -> Result<(), Failure> {
    write_file(&out.join("model_gmm.json"), &serde_json::to_string_pretty(&model.mixture).stage("fit")?)?;
    write_file(&out.join("model_mlp.json"), &model.classifier.to_json().stage("fit")?)?;
    if let Some(suite) = &model.suite {
        write_file(&out.join("model_regression.json"), &suite.to_json().stage("fit")?)?;
    }
    write_summaries_csv(&model.train_summaries, open_writer(&out.join("summaries.csv"))?).stage("summarize")?;
    Ok(())
}

fn fit_full(prep: &Prepared<'_>, config: &PipelineConfig, exec: Execution) -> Result<ClusterSummaryModel, Failure> {
    let all: Vec<usize> = (0..prep.corpus.bouts().len()).collect();
    let model = ClusterSummaryModel::fit(prep, &all, &config.evaluation_config(exec), config.seed).stage("fit")?;
    for w in &model.warnings {
        log::warn!("{w}");
    }
    log::info!("mixture kept {} components", model.mixture.k_effective());
    Ok(model)
}

fn cmd_fit(config: &PipelineConfig, out: &Path, exec: Execution) -> Result<(), Failure> {
    let corpus = require_corpus(config)?;
    let eval = config.evaluation_config(exec);
    let prep = Prepared::new(&corpus, &eval).stage("featurize")?;
    let model = fit_full(&prep, config, exec)?;
    create_dir(out)?;
    write_models(&model, out)?;
    println!("k_effective={} bouts={}", model.mixture.k_effective(), corpus.bouts().len());
    Ok(())
}

fn cmd_summarize(config: &PipelineConfig, model_path: &Path, out: &Path, exec: Execution) -> Result<(), Failure> {
    let corpus = require_corpus(config)?;
    let text = fs::read_to_string(model_path)
        .with_context(|| format!("cannot read {}", model_path.display()))
        .stage("load")?;
    let model: MixtureModel = serde_json::from_str(&text)
        .with_context(|| format!("invalid mixture model {}", model_path.display()))
        .stage("load")?;
    let table = featurize(&corpus, config.window_length, exec).stage("featurize")?;
    let summaries = summarize_corpus(&table, &model, exec)
        .context("model and corpus features disagree")
        .stage("summarize")?;
    create_dir(out)?;
    let path = out.join("summaries.csv");
    write_summaries_csv(&summaries, open_writer(&path)?).stage("summarize")?;
    println!("bouts={} k={} file={}", summaries.len(), model.k_effective(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct CorpusInfo {
    digest: String,
    bouts: usize,
    subjects: usize,
    windows: usize,
    labels: Vec<String>,
    provenance: dataset::Provenance,
}

/// The machine-readable report. Holds nothing that varies between identical
/// runs (no paths, times or thread counts).
#[derive(Serialize)]
struct RunReport<'a> {
    format_version: u32,
    config_fingerprint: String,
    corpus: CorpusInfo,
    config: ConfigEcho<'a>,
    methods: &'a [EvaluationReport],
    reference: &'a ReferencePanel,
}

/// The configuration minus the `io` section.
#[derive(Serialize)]
struct ConfigEcho<'a> {
    window_length: usize,
    seed: u64,
    synthetic: Option<&'a dataset::SyntheticConfig>,
    gmm: &'a evaluate::MixtureSettings,
    mlp: &'a tsummary::classify::MlpConfig,
    regression: &'a config::RegressionSettings,
    evaluation: &'a config::EvaluationSettings,
}

fn cmd_evaluate(config: &PipelineConfig, out: &Path, exec: Execution, full: bool) -> Result<(), Failure> {
    create_dir(out)?;
    let corpus = match (&config.io.corpus, full) {
        (Some(path), _) => load(path, config.window_length)?,
        (None, true) => generate_into(config, &out.join("corpus"))?,
        (None, false) => return Err(Failure::Config(anyhow!("no corpus given: pass --corpus or set io.corpus"))),
    };
    let eval = config.evaluation_config(exec);
    let prep = Prepared::new(&corpus, &eval).stage("featurize")?;

    if full {
        let model = fit_full(&prep, config, exec)?;
        write_models(&model, out)?;
    }

    let folds = dataset::loso_fold_indices(&corpus).stage("evaluate")?;
    let mut reports = Vec::new();
    for &method in &config.evaluation.methods {
        log::info!("evaluating {method} over {} folds", folds.len());
        reports.push(evaluate::run_prepared(&prep, &folds, method, &eval).stage("evaluate")?);
    }
    let comparison = Comparison {
        labels: corpus.label_set().to_vec(),
        reports,
        reference: ReferencePanel::load().stage("evaluate")?,
    };

    let echo = ConfigEcho {
        window_length: config.window_length,
        seed: config.seed,
        synthetic: config.io.corpus.is_none().then_some(&config.synthetic),
        gmm: &config.gmm,
        mlp: &config.mlp,
        regression: &config.regression,
        evaluation: &config.evaluation,
    };
    let corpus_digest = evaluate::corpus_digest(&corpus);
    let mut fingerprint_input = serde_json::to_vec(&echo).stage("report")?;
    fingerprint_input.extend_from_slice(corpus_digest.as_bytes());
    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config_fingerprint: sha256_hex(&fingerprint_input),
        corpus: CorpusInfo {
            digest: corpus_digest,
            bouts: corpus.bouts().len(),
            subjects: corpus.subjects().len(),
            windows: prep.features.window_count(),
            labels: corpus.label_set().iter().map(|l| l.to_string()).collect(),
            provenance: corpus.provenance.clone(),
        },
        config: echo,
        methods: &comparison.reports,
        reference: &comparison.reference,
    };
    let mut json = serde_json::to_string_pretty(&report).stage("report")?;
    json.push('\n');
    write_file(&out.join("report.json"), &json)?;
    for r in &comparison.reports {
        if let Some(c) = &r.classification {
            let path = out.join(format!("confusion_{}.csv", r.method));
            evaluate::write_confusion_csv(&comparison.labels, &c.confusion, open_writer(&path)?).stage("report")?;
        }
        if let Some(g) = &r.regression {
            let path = out.join(format!("rmse_{}.csv", r.method));
            evaluate::write_rmse_csv(&comparison.labels, g, open_writer(&path)?).stage("report")?;
        }
    }

    print!("{}", comparison.render());
    println!("\nconfig fingerprint: {}", report.config_fingerprint);
    Ok(())
}

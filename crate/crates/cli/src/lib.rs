//! Command-line driver: configuration, subcommands and run manifests.

pub mod config;
pub mod manifest;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use futures::StreamExt;
use thiserror::Error;

use commander_core::commander::{head_context, train_commander_head, Commander, EncoderHeadParams, HeadExample};
use commander_core::domain::{Sample, SubtaskKind};
use commander_core::evaluation::{
    ablation_run, ablation_table, default_sweep_order, export_routing_heatmap, frequency_csv, frequency_stats,
    load_dataset, score_traces, sweep_csv, sweep_subtasks, TraceScore,
};
use commander_core::pipeline::{read_traces, BatchSummary, RouteFeatureSource};
use commander_core::router::{activation_accuracy, distill_routing_labels, load_routing_dataset, train_router, DistillConfig};

use config::{parse_config, ConfigError, Endpoints, LoadedConfig};
use manifest::ManifestBuilder;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Transport(_) => 3,
            _ => 2,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "commander", version, about = "Routed multi-agent sarcasm detection")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "commander.toml")]
    pub config: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label routing supervision with the teacher endpoint.
    Distill {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fit the learned router on distilled labels.
    TrainRouter,
    /// Fit the encoder-head commander on the training split.
    TrainCommander,
    /// Run one sample and print its trace.
    Detect {
        /// A sample id from the eval or train split.
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        id: Option<String>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, requires = "text")]
        image: Option<String>,
    },
    /// Run the eval split and score it.
    Eval,
    /// Full model plus one run per dropped subtask.
    Ablate {
        /// Subtasks to ablate, comma separated. Defaults to all six.
        #[arg(long, value_delimiter = ',')]
        drop: Vec<SubtaskKind>,
    },
    /// F1 as the eligible subtask set grows.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        order: Vec<SubtaskKind>,
    },
    /// Routing score matrix from saved traces.
    Heatmap {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Per-subtask activation counts from saved traces.
    Freq {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Distill { .. } => "distill",
            Command::TrainRouter => "train-router",
            Command::TrainCommander => "train-commander",
            Command::Detect { .. } => "detect",
            Command::Eval => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::Heatmap { .. } => "heatmap",
            Command::Freq { .. } => "freq",
        }
    }
}

/// Exit status of a batch: 0 clean, 1 some samples failed, 3 all failed.
pub fn batch_exit_code(summary: &BatchSummary) -> i32 {
    match summary.errors {
        0 => 0,
        n if n == summary.samples => 3,
        _ => 1,
    }
}

/// Load the config with command-line overrides applied.
pub fn load(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let mut loaded = parse_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        loaded.config.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        if p == 0 {
            return Err(CliError::Input("--parallelism must be positive".into()));
        }
        loaded.config.parallelism = p;
    }
    if let Some(out) = &cli.out {
        loaded.set_output_dir(out.clone());
    }
    let dir = loaded.output_dir().to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(loaded)
}

/// Run a command and return the process exit code.
pub async fn run(cli: Cli) -> i32 {
    match dispatch(&cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

async fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let config = load(cli)?;
    let mut manifest = ManifestBuilder::new(cli.command.name(), &config);
    let code = match &cli.command {
        Command::Distill { count } => distill(&config, *count, &mut manifest).await?,
        Command::TrainRouter => train_router_cmd(&config, &mut manifest)?,
        Command::TrainCommander => train_commander(&config, &mut manifest).await?,
        Command::Detect { id, text, image } => detect(&config, id.as_deref(), text.as_deref(), image.as_deref(), &mut manifest).await?,
        Command::Eval => eval(&config, &mut manifest).await?,
        Command::Ablate { drop } => ablate(&config, drop, &mut manifest).await?,
        Command::Sweep { order } => sweep(&config, order, &mut manifest).await?,
        Command::Heatmap { traces } => heatmap(&config, traces.as_deref(), &mut manifest)?,
        Command::Freq { traces } => freq(&config, traces.as_deref(), &mut manifest)?,
    };
    manifest.finish(code)?;
    Ok(code)
}

fn dataset(config: &LoadedConfig, which: &str, manifest: &mut ManifestBuilder) -> Result<Vec<Sample>, CliError> {
    let path = config.dataset(which)?;
    manifest.input(&path)?;
    load_dataset(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text.into_bytes()
}

fn metrics_line(score: &TraceScore) -> String {
    let m = &score.metrics;
    format!(
        "samples={} acc={:.4} p={:.4} r={:.4} f1={:.4} errored={} unlabeled={}",
        score.scored,
        m.accuracy,
        m.precision,
        m.recall,
        m.f1,
        score.errored_ids.len(),
        score.unlabeled
    )
}

async fn distill(config: &LoadedConfig, count: Option<usize>, manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let samples = dataset(config, "train", manifest)?;
    let d = &config.config.distill;
    let mut eps = Endpoints::new(config);
    let teacher = eps.resolve(d.teacher.as_ref(), "distill teacher")?;
    let embedder = eps.resolve(config.config.router.embedder.as_ref(), "router embedder")?;
    let summarizer = config.agents(&mut eps)?.remove(&SubtaskKind::ImageSummarization).expect("six agents");
    let source = RouteFeatureSource {
        embedder,
        summarizer,
        timing: config.timing(),
    };
    let distill_config = DistillConfig {
        count: count.unwrap_or(d.count),
        seed: config.config.seed,
        output: config.output_path(&d.output),
        concurrency: d.concurrency.unwrap_or(config.config.parallelism),
    };
    manifest.arg("count", distill_config.count);
    let (examples, summary) = distill_routing_labels(&samples, &teacher, Some(&source), &distill_config)
        .await
        .map_err(input)?;
    manifest.output(&d.output.display().to_string())?;
    manifest.write_output("distill_summary.json", &json_bytes(&summary))?;
    println!(
        "labeled {} new, {} already present, {} skipped, {} total in {}",
        summary.labeled,
        summary.already_present,
        summary.skipped,
        examples.len(),
        distill_config.output.display()
    );
    if summary.requested > 0 && summary.skipped == summary.requested {
        return Ok(3);
    }
    Ok(if summary.skipped > 0 { 1 } else { 0 })
}

fn train_router_cmd(config: &LoadedConfig, manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let data_path = config.output_path(&config.config.distill.output);
    manifest.input(&data_path)?;
    let dataset = load_routing_dataset(&data_path).map_err(input)?;
    let outcome = train_router(&dataset, &config.config.router.train).map_err(input)?;
    let mut params = outcome.params;
    config.apply_routing_rule(&mut params);
    let accuracy = activation_accuracy(&params, &dataset).map_err(input)?;
    let path = config.router_params_path();
    params.save(&path).map_err(input)?;
    manifest.output(&config.config.router.params_path.display().to_string())?;
    println!(
        "router trained on {} examples: loss={:.6} activation_accuracy={:.4} -> {}",
        dataset.len(),
        outcome.final_loss,
        accuracy,
        path.display()
    );
    Ok(0)
}

async fn train_commander(config: &LoadedConfig, manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let samples: Vec<Sample> = dataset(config, "train", manifest)?
        .into_iter()
        .filter(|s| s.gold_label.is_some())
        .collect();
    let mut eps = Endpoints::new(config);
    let embedder = config.head_embedder(&mut eps)?;
    let template = EncoderHeadParams::zeros(embedder.embedding_dim(), config.config.commander.fusion);
    let commander = Commander::Head {
        params: template.clone(),
        embedder: embedder.clone(),
    };
    let pipeline = config.pipeline_with(&mut eps, commander)?;

    let results: Vec<Result<HeadExample, String>> = futures::stream::iter(samples.iter())
        .map(|s| {
            let (pipeline, template, embedder) = (&pipeline, &template, &embedder);
            async move {
                let trace = pipeline.execute(s).await;
                if let Some(e) = trace.error {
                    return Err(format!("{}: {e}", s.id));
                }
                let context = head_context(&trace.reports, template, embedder)
                    .await
                    .map_err(|e| format!("{}: {e}", s.id))?;
                Ok(HeadExample {
                    sample_id: s.id.clone(),
                    label: s.gold_label.expect("filtered to labeled"),
                    context,
                })
            }
        })
        .buffered(config.config.parallelism)
        .collect()
        .await;
    let mut examples = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                tracing::warn!(error = %e, "training sample skipped");
                failed += 1;
            }
        }
    }
    if examples.is_empty() && failed > 0 {
        return Err(CliError::Transport(format!("all {failed} training samples failed")));
    }
    let outcome = train_commander_head(&examples, &template, &config.config.commander.train).map_err(input)?;
    let path = config.head_params_path();
    outcome.params.save(&path).map_err(input)?;
    manifest.output(&config.config.commander.params_path.display().to_string())?;
    println!(
        "commander head trained on {} examples ({failed} skipped): loss={:.6} accuracy={:.4} -> {}",
        examples.len(),
        outcome.final_loss,
        outcome.accuracy,
        path.display()
    );
    Ok(if failed > 0 { 1 } else { 0 })
}

async fn detect(
    config: &LoadedConfig,
    id: Option<&str>,
    text: Option<&str>,
    image: Option<&str>,
    manifest: &mut ManifestBuilder,
) -> Result<i32, CliError> {
    let sample = match (id, text) {
        (Some(id), _) => {
            manifest.arg("id", id);
            let mut found = None;
            for which in ["eval", "train"] {
                if config.dataset(which).is_ok() {
                    if let Some(s) = dataset(config, which, manifest)?.into_iter().find(|s| s.id == id) {
                        found = Some(s);
                        break;
                    }
                }
            }
            found.ok_or_else(|| CliError::Input(format!("no sample with id {id:?}")))?
        }
        (None, Some(text)) => {
            manifest.arg("text", text);
            let mut s = Sample::new("cli", text);
            if let Some(img) = image {
                manifest.arg("image", img);
                s = s.with_image(img);
            }
            s
        }
        (None, None) => return Err(CliError::Input("detect needs --id or --text".into())),
    };
    let mut eps = Endpoints::new(config);
    let pipeline = config.pipeline(&mut eps)?;
    let trace = pipeline.detect(&sample).await;
    let line = trace.to_json_line();
    manifest.write_output("detect.json", format!("{line}\n").as_bytes())?;
    println!("{line}");
    match &trace.error {
        Some(e) => {
            eprintln!("error: {e}");
            Ok(3)
        }
        None => Ok(0),
    }
}

async fn eval(config: &LoadedConfig, manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let samples = dataset(config, "eval", manifest)?;
    let mut eps = Endpoints::new(config);
    let pipeline = config.pipeline(&mut eps)?;
    let traces_path = config.output_path(Path::new("traces.jsonl"));
    let output = pipeline.run_batch(&samples, Some(&traces_path)).await.map_err(input)?;
    manifest.output("traces.jsonl")?;
    let score = score_traces(&samples, &output.traces).map_err(input)?;
    manifest.write_output("summary.json", &json_bytes(&output.summary))?;
    manifest.write_output("metrics.json", &json_bytes(&score))?;
    println!("{}", metrics_line(&score));
    let code = batch_exit_code(&output.summary);
    if code == 3 {
        eprintln!("error: every sample failed");
    }
    Ok(code)
}

async fn ablate(config: &LoadedConfig, drop: &[SubtaskKind], manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let samples = dataset(config, "eval", manifest)?;
    let drop: BTreeSet<SubtaskKind> = if drop.is_empty() {
        SubtaskKind::ALL.into_iter().collect()
    } else {
        drop.iter().copied().collect()
    };
    manifest.arg("drop", drop.iter().map(|k| k.descriptor()).collect::<Vec<_>>().join(","));
    let mut eps = Endpoints::new(config);
    let pipeline = config.pipeline(&mut eps)?;
    let rows = ablation_run(&samples, &pipeline, &drop).await.map_err(input)?;
    let table = ablation_table(&rows);
    manifest.write_output("ablation.txt", table.as_bytes())?;
    manifest.write_output("ablation.json", &json_bytes(&rows))?;
    print!("{table}");
    let code = rows
        .iter()
        .filter_map(|r| r.output.as_ref())
        .map(|o| batch_exit_code(&o.summary))
        .max()
        .unwrap_or(0);
    Ok(code)
}

async fn sweep(config: &LoadedConfig, order: &[SubtaskKind], manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let samples = dataset(config, "eval", manifest)?;
    let order = if order.is_empty() {
        default_sweep_order().to_vec()
    } else {
        order.to_vec()
    };
    manifest.arg("order", order.iter().map(|k| k.descriptor()).collect::<Vec<_>>().join(","));
    let mut eps = Endpoints::new(config);
    let pipeline = config.pipeline(&mut eps)?;
    let rows = sweep_subtasks(&samples, &pipeline, &order).await.map_err(input)?;
    let csv = sweep_csv(&rows);
    manifest.write_output("sweep.csv", csv.as_bytes())?;
    manifest.write_output("sweep.json", &json_bytes(&rows))?;
    let mut out = String::new();
    for r in &rows {
        let names: Vec<&str> = r.eligible.iter().map(|k| k.descriptor()).collect();
        let _ = writeln!(out, "m={} f1={:.4} [{}]", r.m, r.score.metrics.f1, names.join(","));
    }
    print!("{out}");
    let errored = rows.iter().any(|r| !r.score.errored_ids.is_empty());
    Ok(if errored { 1 } else { 0 })
}

fn saved_traces(
    config: &LoadedConfig,
    path: Option<&Path>,
    manifest: &mut ManifestBuilder,
) -> Result<Vec<commander_core::domain::Trace>, CliError> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_path(Path::new("traces.jsonl")));
    manifest.input(&path)?;
    read_traces(&path).map_err(input)
}

fn heatmap(config: &LoadedConfig, traces: Option<&Path>, manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let traces = saved_traces(config, traces, manifest)?;
    let csv = export_routing_heatmap(&traces);
    let path = manifest.write_output("heatmap.csv", csv.as_bytes())?;
    println!("{} traces -> {}", traces.len(), path.display());
    Ok(0)
}

fn freq(config: &LoadedConfig, traces: Option<&Path>, manifest: &mut ManifestBuilder) -> Result<i32, CliError> {
    let traces = saved_traces(config, traces, manifest)?;
    let csv = frequency_csv(&frequency_stats(&traces));
    manifest.write_output("frequency.csv", csv.as_bytes())?;
    print!("{csv}");
    Ok(0)
}

//! End-to-end detection: route, run the active agents, integrate.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::agents::{run_agent, AgentSpec};
use crate::commander::Commander;
use crate::domain::{AgentReport, Payload, RoutingDecision, Sample, SubtaskKind, Suppression, Trace, NUM_SUBTASKS};
use crate::endpoint::Endpoint;
use crate::router::{build_route_features, route_decide, route_score, FeatureSource, PromptRouter, RouterParams};
use crate::timing::Timing;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("no samples to process")]
    EmptyBatch,
    #[error("{0}")]
    Io(String),
}

/// Logistic routing heads over text and image-summary embeddings.
#[derive(Debug, Clone)]
pub struct LearnedRouter {
    pub params: RouterParams,
    pub embedder: Endpoint,
}

#[derive(Debug, Clone)]
pub enum RouterMode {
    Learned(Box<LearnedRouter>),
    Prompt(PromptRouter),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub router: RouterMode,
    pub agents: BTreeMap<SubtaskKind, AgentSpec>,
    pub commander: Commander,
    pub sample_parallelism: usize,
    /// Drop failed agents instead of failing the sample.
    pub fail_safe: bool,
    /// Subtasks switched off after routing, for ablations and sweeps.
    pub drop: BTreeSet<SubtaskKind>,
    pub timing: Timing,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for k in SubtaskKind::ALL {
            match self.agents.get(&k) {
                None => return Err(PipelineError::Config(format!("no agent for {k}"))),
                Some(spec) if spec.subtask != k => {
                    return Err(PipelineError::Config(format!(
                        "agent registered for {k} handles {}",
                        spec.subtask
                    )))
                }
                Some(_) => {}
            }
        }
        if self.sample_parallelism == 0 {
            return Err(PipelineError::Config("sample_parallelism must be positive".into()));
        }
        if let RouterMode::Learned(r) = &self.router {
            r.params.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            let expected = 2 * r.embedder.embedding_dim();
            if r.params.feature_dim != expected {
                return Err(PipelineError::Config(format!(
                    "router expects {}-dimensional features but the embedder yields {expected}",
                    r.params.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// The same configuration with `drop` replaced.
    pub fn with_drop(&self, drop: BTreeSet<SubtaskKind>) -> Self {
        Self { drop, ..self.clone() }
    }

    fn agent(&self, subtask: SubtaskKind) -> &AgentSpec {
        &self.agents[&subtask]
    }

    /// Run the summarization agent when the sample has an image. The report
    /// is reused if routing activates that subtask.
    async fn image_summary(&self, sample: &Sample) -> Result<Option<AgentReport>, String> {
        if !sample.has_image() {
            return Ok(None);
        }
        run_agent(self.agent(SubtaskKind::ImageSummarization), sample, self.timing)
            .await
            .map(Some)
            .map_err(|e| e.to_string())
    }

    async fn route(
        &self,
        sample: &Sample,
        failed: &mut BTreeMap<SubtaskKind, String>,
    ) -> Result<(RoutingDecision, Option<AgentReport>), String> {
        match &self.router {
            RouterMode::Prompt(router) => Ok((router.route(sample).await.map_err(|e| e.to_string())?, None)),
            RouterMode::Learned(router) => {
                let summary = match self.image_summary(sample).await {
                    Ok(s) => s,
                    Err(reason) if self.fail_safe => {
                        warn!(sample = %sample.id, %reason, "image summary failed");
                        failed.insert(SubtaskKind::ImageSummarization, reason);
                        None
                    }
                    Err(reason) => return Err(format!("image_summarization: {reason}")),
                };
                let summary_text = match summary.as_ref().map(|r| &r.payload) {
                    Some(Payload::Text(t)) => t.as_str(),
                    _ => "",
                };
                let features = build_route_features(sample, summary_text, &router.embedder, &router.embedder)
                    .await
                    .map_err(|e| e.to_string())?;
                let probs = route_score(&features, &router.params).map_err(|e| e.to_string())?;
                Ok((route_decide(&probs, &router.params), summary))
            }
        }
    }

    /// Route and run the active agents, without integrating. Failures
    /// become error traces.
    pub async fn execute(&self, sample: &Sample) -> Trace {
        let watch = self.timing.start();
        let mut trace = Trace {
            sample_id: sample.id.clone(),
            routing: None,
            reports: BTreeMap::new(),
            failed: BTreeMap::new(),
            verdict: None,
            error: None,
            wall_ms: 0,
        };
        let mut failed = BTreeMap::new();
        let (mut routing, summary) = match self.route(sample, &mut failed).await {
            Ok(r) => r,
            Err(e) => {
                trace.error = Some(format!("routing: {e}"));
                trace.wall_ms = watch.elapsed_ms();
                return trace;
            }
        };
        if !sample.has_image() {
            for k in SubtaskKind::ALL.into_iter().filter(|k| k.requires_image()) {
                routing.suppress(k, Suppression::NoImage);
            }
        }
        for &k in &self.drop {
            routing.suppress(k, Suppression::Dropped);
        }
        failed.retain(|k, _| routing.is_active(*k));

        let pending: Vec<SubtaskKind> = routing
            .active
            .iter()
            .copied()
            .filter(|k| !failed.contains_key(k))
            .collect();
        let runs = pending.iter().map(|&k| {
            let reused = summary.clone().filter(|_| k == SubtaskKind::ImageSummarization);
            async move {
                match reused {
                    Some(report) => (k, Ok(report)),
                    None => (k, run_agent(self.agent(k), sample, self.timing).await),
                }
            }
        });
        let mut abort = None;
        for (k, result) in futures::future::join_all(runs).await {
            match result {
                Ok(report) => {
                    trace.reports.insert(k, report);
                }
                Err(e) if self.fail_safe => {
                    warn!(sample = %sample.id, subtask = %k, error = %e, "agent dropped");
                    failed.insert(k, e.to_string());
                }
                Err(e) => {
                    abort.get_or_insert(format!("{k}: {e}"));
                }
            }
        }
        trace.failed = failed;
        trace.routing = Some(routing);
        trace.error = abort;
        trace.wall_ms = watch.elapsed_ms();
        trace
    }

    /// Run one sample end to end. Failures become error traces.
    pub async fn detect(&self, sample: &Sample) -> Trace {
        let watch = self.timing.start();
        let mut trace = self.execute(sample).await;
        if !trace.is_error() {
            match self.commander.decide(&trace.reports, trace.routing.as_ref()).await {
                Ok(verdict) => trace.verdict = Some(verdict),
                Err(e) => trace.error = Some(format!("commander: {e}")),
            }
        }
        trace.wall_ms = watch.elapsed_ms();
        trace
    }

    /// Run all samples with bounded parallelism. Traces are appended to
    /// `<out>.partial` as they finish, then written to `out` in input order.
    pub async fn run_batch(&self, samples: &[Sample], out: Option<&Path>) -> Result<BatchOutput, PipelineError> {
        self.validate()?;
        if samples.is_empty() {
            return Err(PipelineError::EmptyBatch);
        }
        let watch = self.timing.start();
        let mut partial = match out {
            Some(path) => {
                let p = partial_path(path);
                let file = std::fs::File::create(&p).map_err(|e| io_error(&p, e))?;
                Some((p, std::io::BufWriter::new(file)))
            }
            None => None,
        };

        let mut stream = futures::stream::iter(samples.iter().enumerate())
            .map(|(i, s)| async move { (i, self.detect(s).await) })
            .buffer_unordered(self.sample_parallelism);
        let mut slots: Vec<Option<Trace>> = vec![None; samples.len()];
        while let Some((i, trace)) = stream.next().await {
            if let Some((p, w)) = partial.as_mut() {
                writeln!(w, "{}", trace.to_json_line()).map_err(|e| io_error(p, e))?;
            }
            slots[i] = Some(trace);
        }
        let traces: Vec<Trace> = slots.into_iter().map(|t| t.expect("every sample yields a trace")).collect();

        if let (Some(path), Some((p, mut w))) = (out, partial) {
            w.flush().map_err(|e| io_error(&p, e))?;
            drop(w);
            write_traces(path, &traces)?;
            std::fs::remove_file(&p).map_err(|e| io_error(&p, e))?;
        }
        let summary = BatchSummary::from_traces(&traces, watch.elapsed_ms());
        info!(samples = summary.samples, errors = summary.errors, "batch finished");
        Ok(BatchOutput { traces, summary })
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

fn io_error(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

/// Write traces as JSONL, one per line.
pub fn write_traces(path: &Path, traces: &[Trace]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for t in traces {
        text.push_str(&t.to_json_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<Trace>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Io(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub traces: Vec<Trace>,
    pub summary: BatchSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub samples: usize,
    pub verdicts: usize,
    pub errors: usize,
    /// Traces in which each subtask was active.
    pub invocations: BTreeMap<SubtaskKind, usize>,
    /// Agents dropped under fail-safe mode.
    pub agent_failures: BTreeMap<SubtaskKind, usize>,
    /// Verdicts that are fail-safe defaults.
    pub fallback_verdicts: usize,
    pub wall_ms: u64,
}

impl BatchSummary {
    pub fn from_traces(traces: &[Trace], wall_ms: u64) -> Self {
        let zero = || SubtaskKind::ALL.iter().map(|&k| (k, 0)).collect::<BTreeMap<_, _>>();
        let mut summary = Self {
            samples: traces.len(),
            verdicts: 0,
            errors: 0,
            invocations: zero(),
            agent_failures: zero(),
            fallback_verdicts: 0,
            wall_ms,
        };
        for t in traces {
            summary.errors += usize::from(t.is_error());
            if let Some(v) = &t.verdict {
                summary.verdicts += 1;
                summary.fallback_verdicts += usize::from(v.fallback);
            }
            if let Some(r) = &t.routing {
                for k in &r.active {
                    *summary.invocations.entry(*k).or_default() += 1;
                }
            }
            for k in t.failed.keys() {
                *summary.agent_failures.entry(*k).or_default() += 1;
            }
        }
        summary
    }
}

/// Router features for distillation, computed the way the learned router
/// computes them at detection time.
pub struct RouteFeatureSource {
    pub embedder: Endpoint,
    pub summarizer: AgentSpec,
    pub timing: Timing,
}

#[async_trait]
impl FeatureSource for RouteFeatureSource {
    async fn features(&self, sample: &Sample) -> Result<Vec<f64>, String> {
        let summary = if sample.has_image() {
            match run_agent(&self.summarizer, sample, self.timing).await.map_err(|e| e.to_string())?.payload {
                Payload::Text(t) => t,
                Payload::Vector(_) => String::new(),
            }
        } else {
            String::new()
        };
        build_route_features(sample, &summary, &self.embedder, &self.embedder)
            .await
            .map_err(|e| e.to_string())
    }
}

/// Routing probabilities or 0/1 activations per subtask, for reporting.
pub fn routing_row(routing: &RoutingDecision) -> [f64; NUM_SUBTASKS] {
    let selected = routing.selected();
    std::array::from_fn(|i| {
        let k = SubtaskKind::ALL[i];
        routing.probs[i].unwrap_or(if selected.contains(&k) { 1.0 } else { 0.0 })
    })
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{score_traces, EvalError, TraceScore};
use crate::domain::{Sample, SubtaskKind, Trace};
use crate::pipeline::{routing_row, BatchOutput, PipelineConfig};

/// One configuration of an ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub dropped: BTreeSet<SubtaskKind>,
    pub score: TraceScore,
    #[serde(skip)]
    pub output: Option<BatchOutput>,
}

/// Run the full model plus one configuration per subtask in `drop`, each
/// with that subtask switched off after routing. Rows follow subtask order
/// with the full model last.
pub async fn ablation_run(
    samples: &[Sample],
    config: &PipelineConfig,
    drop: &BTreeSet<SubtaskKind>,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut configs: Vec<(String, BTreeSet<SubtaskKind>)> = drop
        .iter()
        .map(|k| (format!("w/o {}", k.display_name()), BTreeSet::from([*k])))
        .collect();
    configs.push(("Full Model".to_string(), BTreeSet::new()));

    let mut rows = Vec::with_capacity(configs.len());
    for (name, dropped) in configs {
        let cfg = config.with_drop(config.drop.union(&dropped).copied().collect());
        let output = cfg.run_batch(samples, None).await?;
        rows.push(AblationRow {
            name,
            dropped,
            score: score_traces(samples, &output.traces)?,
            output: Some(output),
        });
    }
    Ok(rows)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Aligned text table, metrics in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("Configuration".len());
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "Configuration", "Acc", "P", "R", "F1");
    for r in rows {
        let m = &r.score.metrics;
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
            r.name,
            pct(m.accuracy),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1)
        );
    }
    out
}

/// Number of traces in which each subtask was active.
pub fn frequency_stats(traces: &[Trace]) -> BTreeMap<SubtaskKind, usize> {
    let mut counts: BTreeMap<SubtaskKind, usize> = SubtaskKind::ALL.iter().map(|&k| (k, 0)).collect();
    for routing in traces.iter().filter_map(|t| t.routing.as_ref()) {
        for k in &routing.active {
            *counts.entry(*k).or_default() += 1;
        }
    }
    counts
}

pub fn frequency_csv(counts: &BTreeMap<SubtaskKind, usize>) -> String {
    let mut out = String::from("subtask,count\n");
    for (k, n) in counts {
        let _ = writeln!(out, "{k},{n}");
    }
    out
}

/// Six rows of routing scores, one column per trace. Traces without scores
/// contribute 0/1 selections and mark the file with a `# binary` line;
/// traces without routing contribute empty cells.
pub fn export_routing_heatmap(traces: &[Trace]) -> String {
    let binary = traces
        .iter()
        .filter_map(|t| t.routing.as_ref())
        .any(|r| r.probs.iter().any(Option::is_none));
    let mut out = String::new();
    if binary {
        out.push_str("# binary\n");
    }
    out.push_str("subtask");
    for t in traces {
        out.push(',');
        out.push_str(&csv_field(&t.sample_id));
    }
    out.push('\n');
    let rows: Vec<Option<[f64; 6]>> = traces.iter().map(|t| t.routing.as_ref().map(routing_row)).collect();
    for k in SubtaskKind::ALL {
        out.push_str(k.descriptor());
        for row in &rows {
            out.push(',');
            if let Some(values) = row {
                let _ = write!(out, "{}", values[k.index()]);
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Context modeling, sentiment, image summary, scene text, rhetorical
/// devices, facial expression.
pub fn default_sweep_order() -> [SubtaskKind; 6] {
    [
        SubtaskKind::ContextModeling,
        SubtaskKind::SentimentAnalysis,
        SubtaskKind::ImageSummarization,
        SubtaskKind::SceneText,
        SubtaskKind::RhetoricalDevice,
        SubtaskKind::FacialExpression,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub eligible: Vec<SubtaskKind>,
    pub score: TraceScore,
}

/// For each prefix length `m`, run with only the first `m` subtasks of
/// `order` eligible.
pub async fn sweep_subtasks(
    samples: &[Sample],
    config: &PipelineConfig,
    order: &[SubtaskKind],
) -> Result<Vec<SweepRow>, EvalError> {
    let unique: BTreeSet<SubtaskKind> = order.iter().copied().collect();
    if order.len() != SubtaskKind::ALL.len() || unique.len() != order.len() {
        let names: Vec<&str> = order.iter().map(|k| k.descriptor()).collect();
        return Err(EvalError::InvalidOrder(names.join(",")));
    }
    let mut rows = Vec::with_capacity(order.len());
    for m in 1..=order.len() {
        let eligible = &order[..m];
        let dropped: BTreeSet<SubtaskKind> = order[m..].iter().copied().collect();
        let output = config
            .with_drop(config.drop.union(&dropped).copied().collect())
            .run_batch(samples, None)
            .await?;
        rows.push(SweepRow {
            m,
            eligible: eligible.to_vec(),
            score: score_traces(samples, &output.traces)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("m,f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.m, r.score.metrics.f1);
    }
    out
}

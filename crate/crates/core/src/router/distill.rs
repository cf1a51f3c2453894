//! Routing-label distillation from a teacher chat model.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use futures::StreamExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::prompt::{ask_with_reask, routing_query_messages, YES_NO_REMINDER};
use super::{RouterError, RoutingExample};
use crate::domain::{Sample, SubtaskKind, NUM_SUBTASKS};
use crate::endpoint::Endpoint;
use crate::reply::parse_yes_no;

/// Produces router features for a sample. Implemented by the pipeline, which
/// knows how to obtain image summaries.
#[async_trait]
pub trait FeatureSource: Send + Sync {
    async fn features(&self, sample: &Sample) -> Result<Vec<f64>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub count: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Samples labeled concurrently.
    pub concurrency: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub requested: usize,
    pub already_present: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
}

/// Read a routing-supervision JSONL file.
pub fn load_routing_dataset(path: &Path) -> Result<Vec<RoutingExample>, RouterError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RouterError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ex: RoutingExample = serde_json::from_str(line)
                .map_err(|e| RouterError::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
            ex.validate()?;
            Ok(ex)
        })
        .collect()
}

/// Sample `count` items uniformly with `seed`, keeping dataset order.
fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

async fn label_sample(
    sample: &Sample,
    teacher: &Endpoint,
    features: Option<&dyn FeatureSource>,
) -> Result<RoutingExample, String> {
    let queries = SubtaskKind::ALL.map(|k| async move {
        let messages = routing_query_messages(sample, k);
        match ask_with_reask(teacher, &messages, YES_NO_REMINDER, parse_yes_no).await {
            Ok(Ok(flag)) => Ok(u8::from(flag)),
            Ok(Err(reply)) => Err(format!("{k}: unreadable teacher reply {reply:?}")),
            Err(e) => Err(format!("{k}: {e}")),
        }
    });
    let answers = futures::future::join_all(queries).await;
    let mut labels = [0u8; NUM_SUBTASKS];
    for (k, answer) in answers.into_iter().enumerate() {
        labels[k] = answer?;
    }
    let features = match features {
        Some(source) => source.features(sample).await?,
        None => Vec::new(),
    };
    Ok(RoutingExample {
        sample_id: sample.id.clone(),
        labels,
        features,
    })
}

/// Query `teacher` for per-subtask Yes/No labels on `count` sampled items
/// and append them to `config.output`. Ids already in the file are skipped,
/// so an interrupted run resumes where it stopped. Failed items are logged
/// and skipped.
pub async fn distill_routing_labels(
    samples: &[Sample],
    teacher: &Endpoint,
    features: Option<&dyn FeatureSource>,
    config: &DistillConfig,
) -> Result<(Vec<RoutingExample>, DistillSummary), RouterError> {
    if config.count > samples.len() {
        return Err(RouterError::InvalidCount {
            count: config.count,
            available: samples.len(),
        });
    }
    let existing: HashSet<String> = if config.output.exists() {
        load_routing_dataset(&config.output)?
            .into_iter()
            .map(|ex| ex.sample_id)
            .collect()
    } else {
        HashSet::new()
    };

    let picked = sample_indices(samples.len(), config.count, config.seed);
    let mut summary = DistillSummary {
        requested: picked.len(),
        ..Default::default()
    };
    let pending: Vec<&Sample> = picked
        .iter()
        .map(|&i| &samples[i])
        .filter(|s| {
            let present = existing.contains(&s.id);
            summary.already_present += usize::from(present);
            !present
        })
        .collect();

    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&config.output)
        .map_err(|e| RouterError::Io(format!("{}: {e}", config.output.display())))?;

    let mut results = futures::stream::iter(pending)
        .map(|sample| async move { (sample, label_sample(sample, teacher, features).await) })
        .buffered(config.concurrency.max(1));

    let mut labeled = Vec::new();
    while let Some((sample, result)) = results.next().await {
        match result {
            Ok(example) => {
                let line = serde_json::to_string(&example).expect("example serializes");
                writeln!(file, "{line}")
                    .map_err(|e| RouterError::Io(format!("{}: {e}", config.output.display())))?;
                labeled.push(example);
            }
            Err(reason) => {
                warn!(sample = %sample.id, %reason, "skipping sample");
                summary.skipped += 1;
                summary.skipped_ids.push(sample.id.clone());
            }
        }
    }
    file.flush()
        .map_err(|e| RouterError::Io(format!("{}: {e}", config.output.display())))?;
    summary.labeled = labeled.len();
    info!(?summary.labeled, ?summary.skipped, "distillation finished");
    Ok((labeled, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::{MockBackend, MockReply, MockScript};

    fn samples(n: usize) -> Vec<Sample> {
        (0..n).map(|i| Sample::new(format!("s{i}"), format!("text {i}"))).collect()
    }

    fn config(dir: &Path, count: usize, seed: u64) -> DistillConfig {
        DistillConfig {
            count,
            seed,
            output: dir.join("routing.jsonl"),
            concurrency: 4,
        }
    }

    #[test]
    fn sampling_is_seeded_and_full_count() {
        assert_eq!(sample_indices(19_816, 5_000, 1).len(), 5_000);
        assert_eq!(sample_indices(100, 10, 3), sample_indices(100, 10, 3));
        assert_ne!(sample_indices(100, 10, 3), sample_indices(100, 10, 4));
    }

    #[tokio::test]
    async fn always_yes_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let teacher = Endpoint::mock(
            "t",
            MockBackend::new(0).with_script(MockScript::new().with("Does this input require", MockReply::text("Yes"))),
        );
        let (out, summary) = distill_routing_labels(&samples(10), &teacher, None, &config(dir.path(), 6, 1))
            .await
            .unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|ex| ex.labels == [1; 6]));
        assert_eq!(summary.labeled, 6);
        assert_eq!(load_routing_dataset(&dir.path().join("routing.jsonl")).unwrap(), out);
    }

    #[tokio::test]
    async fn resumes_and_skips_failures() {
        let dir = tempfile::tempdir().unwrap();
        let script = MockScript::new()
            .with("text 3,", MockReply::timeout())
            .with("Does this input require", MockReply::text("No"));
        let teacher = Endpoint::mock("t", MockBackend::new(0).with_script(script));
        let cfg = config(dir.path(), 5, 0);
        let data = samples(5);
        let (first, summary) = distill_routing_labels(&data, &teacher, None, &cfg).await.unwrap();
        assert_eq!(first.len(), 4);
        assert_eq!(summary.skipped_ids, vec!["s3".to_string()]);

        let (second, summary) = distill_routing_labels(&data, &teacher, None, &cfg).await.unwrap();
        assert_eq!(summary.already_present, 4);
        assert!(second.is_empty());
        assert_eq!(summary.skipped, 1);
    }

    #[tokio::test]
    async fn count_larger_than_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let teacher = Endpoint::mock("t", MockBackend::new(0));
        assert!(matches!(
            distill_routing_labels(&samples(2), &teacher, None, &config(dir.path(), 3, 0)).await,
            Err(RouterError::InvalidCount { count: 3, available: 2 })
        ));
    }
}

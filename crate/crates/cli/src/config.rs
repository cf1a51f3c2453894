//! Run configuration: a strict TOML document resolved into core objects.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use commander_core::agents::{default_template, load_templates, validate_template, AgentSpec};
use commander_core::commander::{Commander, CommanderTemplate, EncoderHeadParams, Fusion, LmCommander};
use commander_core::domain::SubtaskKind;
use commander_core::endpoint::{Endpoint, EndpointConfig, MockBackend, MockScript};
use commander_core::pipeline::{LearnedRouter, PipelineConfig, RouterMode};
use commander_core::router::{default_pins, PromptRouteStyle, PromptRouter, RouterParams, TrainConfig, DEFAULT_THRESHOLD};
use commander_core::timing::Timing;

/// A configuration problem, located in the file when possible.
#[derive(Debug, Error)]
#[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

fn default_parallelism() -> usize {
    8
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "yes")]
    pub fail_safe: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to frozen when every endpoint is a mock.
    #[serde(default)]
    pub timing: Option<Timing>,
    #[serde(default)]
    pub dataset: DatasetPaths,
    pub endpoints: BTreeMap<String, EndpointSpec>,
    #[serde(default)]
    pub agents: AgentsSection,
    #[serde(default)]
    pub router: RouterSection,
    #[serde(default)]
    pub commander: CommanderSection,
    #[serde(default)]
    pub distill: DistillSection,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointSpec {
    Mock(MockSpec),
    Openai(EndpointConfig),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    #[serde(default = "MockSpec::default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "MockSpec::default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub script: MockScript,
}

impl MockSpec {
    fn default_dim() -> usize {
        commander_core::endpoint::DEFAULT_EMBEDDING_DIM
    }
    fn default_in_flight() -> usize {
        commander_core::endpoint::DEFAULT_MAX_IN_FLIGHT
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AgentOverride {
    pub endpoint: Option<Spanned<String>>,
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsSection {
    pub endpoint: Option<Spanned<String>>,
    /// Directory of `<subtask>.txt` template overrides.
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub context_modeling: AgentOverride,
    #[serde(default)]
    pub sentiment_analysis: AgentOverride,
    #[serde(default)]
    pub rhetorical_device: AgentOverride,
    #[serde(default)]
    pub facial_expression: AgentOverride,
    #[serde(default)]
    pub image_summarization: AgentOverride,
    #[serde(default)]
    pub scene_text: AgentOverride,
}

impl AgentsSection {
    pub fn override_for(&self, subtask: SubtaskKind) -> &AgentOverride {
        match subtask {
            SubtaskKind::ContextModeling => &self.context_modeling,
            SubtaskKind::SentimentAnalysis => &self.sentiment_analysis,
            SubtaskKind::RhetoricalDevice => &self.rhetorical_device,
            SubtaskKind::FacialExpression => &self.facial_expression,
            SubtaskKind::ImageSummarization => &self.image_summarization,
            SubtaskKind::SceneText => &self.scene_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterModeName {
    #[default]
    Learned,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Thresholds {
    Shared(f64),
    PerSubtask([f64; 6]),
}

impl Thresholds {
    pub fn values(self) -> [f64; 6] {
        match self {
            Thresholds::Shared(a) => [a; 6],
            Thresholds::PerSubtask(a) => a,
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Shared(DEFAULT_THRESHOLD)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSection {
    #[serde(default)]
    pub mode: RouterModeName,
    /// Learned mode: trained heads. Relative to the output directory.
    #[serde(default = "RouterSection::default_params")]
    pub params_path: PathBuf,
    /// Learned mode: embedding endpoint for router features.
    pub embedder: Option<Spanned<String>>,
    /// Prompt mode: chat endpoint asked for routing decisions.
    pub endpoint: Option<Spanned<String>>,
    #[serde(default)]
    pub style: PromptRouteStyle,
    #[serde(default = "yes")]
    pub fail_open: bool,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "RouterSection::default_pins")]
    pub pins: BTreeSet<SubtaskKind>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RouterSection {
    fn default_params() -> PathBuf {
        PathBuf::from("router.json")
    }
    fn default_pins() -> BTreeSet<SubtaskKind> {
        default_pins()
    }
}

impl Default for RouterSection {
    fn default() -> Self {
        toml::from_str("").expect("router defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommanderModeName {
    EncoderHead,
    #[default]
    LanguageModel,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CommanderSection {
    #[serde(default)]
    pub mode: CommanderModeName,
    /// Encoder-head mode: trained head. Relative to the output directory.
    #[serde(default = "CommanderSection::default_params")]
    pub params_path: PathBuf,
    pub embedder: Option<Spanned<String>>,
    #[serde(default)]
    pub fusion: Fusion,
    pub endpoint: Option<Spanned<String>>,
    /// Directory with `system.txt` / `user.txt` overrides.
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl CommanderSection {
    fn default_params() -> PathBuf {
        PathBuf::from("commander_head.json")
    }
}

impl Default for CommanderSection {
    fn default() -> Self {
        toml::from_str("").expect("commander defaults")
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub teacher: Option<Spanned<String>>,
    #[serde(default = "DistillSection::default_count")]
    pub count: usize,
    /// Relative to the output directory.
    #[serde(default = "DistillSection::default_output")]
    pub output: PathBuf,
    pub concurrency: Option<usize>,
}

impl DistillSection {
    fn default_count() -> usize {
        5000
    }
    fn default_output() -> PathBuf {
        PathBuf::from("routing_labels.jsonl")
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        toml::from_str("").expect("distill defaults")
    }
}

/// A parsed configuration plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub source: String,
    pub config: RunConfig,
    base_dir: PathBuf,
    output_dir: PathBuf,
}

pub fn parse_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })?;
    parse_config_str(path, source)
}

pub fn parse_config_str(path: &Path, source: String) -> Result<LoadedConfig, ConfigError> {
    let config: RunConfig = toml::from_str(&source).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: e.span().map(|s| line_of(&source, s.start)),
        message: e.message().to_string(),
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let output_dir = base_dir.join(&config.output_dir);
    let loaded = LoadedConfig {
        path: path.to_path_buf(),
        source,
        config,
        base_dir,
        output_dir,
    };
    loaded.validate()?;
    Ok(loaded)
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl LoadedConfig {
    fn error(&self, line: Option<usize>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    /// The endpoint named by `reference`, or the only endpoint when there
    /// is exactly one and no reference was given.
    pub fn resolve(&self, reference: Option<&Spanned<String>>, user: &str) -> Result<String, ConfigError> {
        match reference {
            Some(r) => {
                if self.config.endpoints.contains_key(r.get_ref()) {
                    Ok(r.get_ref().clone())
                } else {
                    Err(self.error(
                        Some(line_of(&self.source, r.span().start)),
                        format!("{user} references unknown endpoint {:?}", r.get_ref()),
                    ))
                }
            }
            None if self.config.endpoints.len() == 1 => {
                Ok(self.config.endpoints.keys().next().expect("one endpoint").clone())
            }
            None => Err(self.error(None, format!("{user} needs an endpoint"))),
        }
    }

    fn agent_endpoint(&self, subtask: SubtaskKind) -> Result<String, ConfigError> {
        let agents = &self.config.agents;
        let user = format!("agent {subtask}");
        match &agents.override_for(subtask).endpoint {
            Some(r) => self.resolve(Some(r), &user),
            None => self.resolve(agents.endpoint.as_ref(), &user),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if c.endpoints.is_empty() {
            return Err(self.error(None, "at least one endpoint is required"));
        }
        if c.parallelism == 0 {
            return Err(self.error(None, "parallelism must be positive"));
        }
        for (name, spec) in &c.endpoints {
            match spec {
                EndpointSpec::Openai(e) => e
                    .validate()
                    .map_err(|err| self.error(None, format!("endpoint {name:?}: {err}")))?,
                EndpointSpec::Mock(m) if m.embedding_dim == 0 || m.max_in_flight == 0 => {
                    return Err(self.error(
                        None,
                        format!("endpoint {name:?}: embedding_dim and max_in_flight must be positive"),
                    ))
                }
                EndpointSpec::Mock(_) => {}
            }
        }
        for k in SubtaskKind::ALL {
            self.agent_endpoint(k)?;
        }
        let thresholds = c.router.thresholds.values();
        if thresholds.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(self.error(None, "router thresholds must lie in [0, 1]"));
        }
        match c.router.mode {
            RouterModeName::Learned => self.resolve(c.router.embedder.as_ref(), "router embedder")?,
            RouterModeName::Prompt => self.resolve(c.router.endpoint.as_ref(), "router endpoint")?,
        };
        match c.commander.mode {
            CommanderModeName::EncoderHead => self.resolve(c.commander.embedder.as_ref(), "commander embedder")?,
            CommanderModeName::LanguageModel => self.resolve(c.commander.endpoint.as_ref(), "commander endpoint")?,
        };
        if let Some(t) = &c.distill.teacher {
            self.resolve(Some(t), "distill teacher")?;
        }
        Ok(())
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        self.output_dir = dir;
    }

    pub fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    /// A config-relative path.
    pub fn input_path(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// An output-relative path.
    pub fn output_path(&self, p: &Path) -> PathBuf {
        self.output_dir.join(p)
    }

    pub fn timing(&self) -> Timing {
        self.config.timing.unwrap_or_else(|| {
            let all_mock = self
                .config
                .endpoints
                .values()
                .all(|e| matches!(e, EndpointSpec::Mock(_)));
            if all_mock {
                Timing::Frozen
            } else {
                Timing::Wall
            }
        })
    }

    pub fn dataset(&self, which: &str) -> Result<PathBuf, ConfigError> {
        let p = match which {
            "train" => &self.config.dataset.train,
            _ => &self.config.dataset.eval,
        };
        p.as_ref()
            .map(|p| self.input_path(p))
            .ok_or_else(|| self.error(None, format!("dataset.{which} is not set")))
    }
}

/// Endpoint handles built on first use and shared afterwards.
pub struct Endpoints<'a> {
    config: &'a LoadedConfig,
    built: HashMap<String, Endpoint>,
}

impl<'a> Endpoints<'a> {
    pub fn new(config: &'a LoadedConfig) -> Self {
        Self {
            config,
            built: HashMap::new(),
        }
    }

    pub fn get(&mut self, name: &str) -> Result<Endpoint, ConfigError> {
        if let Some(e) = self.built.get(name) {
            return Ok(e.clone());
        }
        let spec = self
            .config
            .config
            .endpoints
            .get(name)
            .ok_or_else(|| self.config.error(None, format!("unknown endpoint {name:?}")))?;
        let endpoint = match spec {
            EndpointSpec::Mock(m) => {
                let backend = MockBackend::new(m.seed.unwrap_or(self.config.config.seed))
                    .with_embedding_dim(m.embedding_dim)
                    .with_script(m.script.clone());
                Endpoint::new(name, std::sync::Arc::new(backend), m.embedding_dim, m.max_in_flight)
            }
            EndpointSpec::Openai(c) => Endpoint::http(name, c.clone())
                .map_err(|e| self.config.error(None, format!("endpoint {name:?}: {e}")))?,
        };
        self.built.insert(name.to_string(), endpoint.clone());
        Ok(endpoint)
    }

    pub fn resolve(&mut self, reference: Option<&Spanned<String>>, user: &str) -> Result<Endpoint, ConfigError> {
        let name = self.config.resolve(reference, user)?;
        self.get(&name)
    }
}

impl LoadedConfig {
    pub fn agents(&self, eps: &mut Endpoints<'_>) -> Result<BTreeMap<SubtaskKind, AgentSpec>, ConfigError> {
        let dir_templates = match &self.config.agents.template_dir {
            Some(dir) => load_templates(&self.input_path(dir)).map_err(|e| self.error(None, e.to_string()))?,
            None => BTreeMap::new(),
        };
        let mut out = BTreeMap::new();
        for k in SubtaskKind::ALL {
            let endpoint = eps.get(&self.agent_endpoint(k)?)?;
            let template = match &self.config.agents.override_for(k).template {
                Some(p) => {
                    let path = self.input_path(p);
                    std::fs::read_to_string(&path)
                        .map_err(|e| self.error(None, format!("{}: {e}", path.display())))?
                }
                None => dir_templates
                    .get(&k)
                    .cloned()
                    .unwrap_or_else(|| default_template(k).to_string()),
            };
            validate_template(k, &template).map_err(|e| self.error(None, e.to_string()))?;
            let spec = AgentSpec::new(k, endpoint)
                .with_template(template)
                .map_err(|e| self.error(None, e.to_string()))?;
            out.insert(k, spec);
        }
        Ok(out)
    }

    pub fn router_params_path(&self) -> PathBuf {
        self.output_path(&self.config.router.params_path)
    }

    pub fn head_params_path(&self) -> PathBuf {
        self.output_path(&self.config.commander.params_path)
    }

    /// Apply the configured thresholds and pins to trained heads.
    pub fn apply_routing_rule(&self, params: &mut RouterParams) {
        params.thresholds = self.config.router.thresholds.values();
        params.pinned = self.config.router.pins.clone();
    }

    pub fn router(&self, eps: &mut Endpoints<'_>) -> Result<RouterMode, ConfigError> {
        let r = &self.config.router;
        match r.mode {
            RouterModeName::Learned => {
                let path = self.router_params_path();
                let mut params = RouterParams::load(&path).map_err(|e| {
                    self.error(None, format!("router params {}: {e} (run train-router first)", path.display()))
                })?;
                self.apply_routing_rule(&mut params);
                Ok(RouterMode::Learned(Box::new(LearnedRouter {
                    params,
                    embedder: eps.resolve(r.embedder.as_ref(), "router embedder")?,
                })))
            }
            RouterModeName::Prompt => {
                let mut router = PromptRouter::new(eps.resolve(r.endpoint.as_ref(), "router endpoint")?);
                router.style = r.style;
                router.fail_open = r.fail_open;
                router.pins = r.pins.clone();
                Ok(RouterMode::Prompt(router))
            }
        }
    }

    /// Embedding endpoint of the encoder-head commander.
    pub fn head_embedder(&self, eps: &mut Endpoints<'_>) -> Result<Endpoint, ConfigError> {
        eps.resolve(self.config.commander.embedder.as_ref(), "commander embedder")
    }

    pub fn commander(&self, eps: &mut Endpoints<'_>) -> Result<Commander, ConfigError> {
        let c = &self.config.commander;
        match c.mode {
            CommanderModeName::EncoderHead => {
                let path = self.head_params_path();
                let params = EncoderHeadParams::load(&path).map_err(|e| {
                    self.error(None, format!("commander head {}: {e} (run train-commander first)", path.display()))
                })?;
                Ok(Commander::Head {
                    params,
                    embedder: self.head_embedder(eps)?,
                })
            }
            CommanderModeName::LanguageModel => {
                let template = match &c.template_dir {
                    Some(dir) => CommanderTemplate::load(&self.input_path(dir)).map_err(|e| self.error(None, e.to_string()))?,
                    None => CommanderTemplate::default(),
                };
                Ok(Commander::Language(LmCommander {
                    endpoint: eps.resolve(c.endpoint.as_ref(), "commander endpoint")?,
                    template,
                    fail_safe: self.config.fail_safe,
                }))
            }
        }
    }

    pub fn pipeline_with(&self, eps: &mut Endpoints<'_>, commander: Commander) -> Result<PipelineConfig, ConfigError> {
        let pipeline = PipelineConfig {
            router: self.router(eps)?,
            agents: self.agents(eps)?,
            commander,
            sample_parallelism: self.config.parallelism,
            fail_safe: self.config.fail_safe,
            drop: BTreeSet::new(),
            timing: self.timing(),
        };
        pipeline.validate().map_err(|e| self.error(None, e.to_string()))?;
        Ok(pipeline)
    }

    pub fn pipeline(&self, eps: &mut Endpoints<'_>) -> Result<PipelineConfig, ConfigError> {
        let commander = self.commander(eps)?;
        self.pipeline_with(eps, commander)
    }
}

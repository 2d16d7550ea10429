//! The engine configuration file and command-line overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use mier_core::eapo::EapoConfig;
use mier_core::engine::{EpisodeLimits, ObservationRole};
use mier_core::eval::Metric;
use mier_core::rerank::plan_windows;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub data: DataConfig,
    pub templates: TemplateConfig,
    pub policy: PolicyConfig,
    pub limits: EpisodeLimits,
    pub rerank: RerankConfig,
    pub eapo: EapoConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    /// Matrix indexed by each query's `embedding_row`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_embeddings: Option<PathBuf>,
    /// Base directory for relative image references.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// `scripted:<path>`, `replay:<path>` or `http`.
    pub backend: String,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: u32,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub observation_role: ObservationRole,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            backend: "http".into(),
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            temperature: 0.0,
            max_tokens: 1024,
            retries: 3,
            token_env: "MIER_API_TOKEN".into(),
            observation_role: ObservationRole::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub k_top: usize,
    pub window: usize,
    pub stride: usize,
    /// Extra attempts for a window whose episode errors.
    pub window_retries: u32,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k_top: 50,
            window: 20,
            stride: 10,
            window_retries: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub exclude_failures: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: Metric::defaults(),
            exclude_failures: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Queries processed concurrently.
    pub parallelism: usize,
    pub seed: u64,
    pub allow_partial: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            parallelism: 4,
            seed: 0,
            allow_partial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

/// The policy backend named by `policy.backend`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Scripted(PathBuf),
    Replay(PathBuf),
    Http,
}

impl FromStr for PolicySpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("scripted", p)) if !p.is_empty() => Ok(PolicySpec::Scripted(p.into())),
            Some(("replay", p)) if !p.is_empty() => Ok(PolicySpec::Replay(p.into())),
            None if s == "http" => Ok(PolicySpec::Http),
            _ => bail!("invalid policy {s:?}; expected scripted:<path>, replay:<path> or http"),
        }
    }
}

/// Values given on the command line take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub pool: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub k_top: Option<usize>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub policy: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub allow_partial: bool,
}

impl EngineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.pool {
            self.data.pool = Some(p.clone());
        }
        if let Some(p) = &o.queries {
            self.data.queries = Some(p.clone());
        }
        if let Some(v) = o.k_top {
            self.rerank.k_top = v;
        }
        if let Some(v) = o.window {
            self.rerank.window = v;
        }
        if let Some(v) = o.stride {
            self.rerank.stride = v;
        }
        if let Some(v) = &o.policy {
            self.policy.backend = v.clone();
        }
        if let Some(v) = &o.out {
            self.output.dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if let Some(v) = o.parallel {
            self.run.parallelism = v;
        }
        self.run.allow_partial |= o.allow_partial;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        plan_windows(self.rerank.k_top, self.rerank.window, self.rerank.stride)
            .context("invalid [rerank] section")?;
        self.limits.validate().context("invalid [limits] section")?;
        self.eapo.validate().context("invalid [eapo] section")?;
        if self.eval.metrics.is_empty() {
            bail!("[eval] metrics must not be empty");
        }
        if self.run.parallelism == 0 {
            bail!("[run] parallelism must be at least 1");
        }
        if self.templates.system.is_some() != self.templates.user.is_some() {
            bail!("[templates] needs both system and user, or neither");
        }
        self.policy_spec()?;
        Ok(())
    }

    pub fn policy_spec(&self) -> anyhow::Result<PolicySpec> {
        self.policy.backend.parse()
    }

    /// SHA-256 of the canonical JSON form; stamped into every output. Settings
    /// that cannot change results (output location, worker count, exit policy)
    /// are left out so identical runs in different directories agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.run.parallelism = RunConfig::default().parallelism;
        c.run.allow_partial = false;
        let json = serde_json::to_vec(&c).expect("config serialises to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

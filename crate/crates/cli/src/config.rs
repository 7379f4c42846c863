//! Run configuration: built-in defaults, an optional flat TOML file, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semfl::callgraph::Strictness;
use semfl::chat::{ChatBackend, ChatEndpoint, HttpChat, RetryPolicy};
use semfl::eval::RecallSet;
use semfl::index::{EmbedEndpoint, Embedder, HashEmbedder, HttpEmbedder};
use semfl::knowledge::KnowledgeOptions;
use semfl::mock::MockChat;
use semfl::querygen::QueryOptions;
use semfl::retrieval::RetrievalOptions;
use semfl::{util, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ChatKind {
    #[serde(alias = "deterministic-mock")]
    #[value(alias = "deterministic-mock")]
    Mock,
    #[serde(alias = "remote")]
    #[value(alias = "remote")]
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    OfflineHash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workspace: PathBuf,
    /// Defaults to the workspace directory name.
    pub bug_id: Option<String>,

    pub chat_kind: ChatKind,
    pub chat_base_url: Option<String>,
    pub chat_model: Option<String>,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub chat_api_key_env: String,
    pub mock_script: Option<PathBuf>,

    pub embedder_kind: EmbedderKind,
    pub embed_base_url: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dimension: usize,
    pub embed_api_key_env: String,

    pub min_size: usize,
    pub max_size: usize,
    pub lambda: usize,
    pub module_lambda: Option<usize>,
    pub method_lambda: Option<usize>,
    pub chunk_lambda: Option<usize>,
    pub max_rounds: u32,
    pub seed: u64,
    pub workers: usize,
    pub char_budget: usize,
    pub explain_top_k: usize,
    pub recall_window: Option<usize>,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,

    pub no_module_context: bool,
    pub no_module_retrieval: bool,
    pub no_chunk_retrieval: bool,
    pub strict_graph: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workspace: PathBuf::from("ws"),
            bug_id: None,
            chat_kind: ChatKind::Mock,
            chat_base_url: None,
            chat_model: None,
            temperature: 1.0,
            chat_api_key_env: "SEMFL_CHAT_API_KEY".into(),
            mock_script: None,
            embedder_kind: EmbedderKind::OfflineHash,
            embed_base_url: None,
            embed_model: None,
            embed_dimension: 256,
            embed_api_key_env: "SEMFL_EMBED_API_KEY".into(),
            min_size: 5,
            max_size: 15,
            lambda: 50,
            module_lambda: None,
            method_lambda: None,
            chunk_lambda: None,
            max_rounds: 5,
            seed: 42,
            workers: 4,
            char_budget: 48_000,
            explain_top_k: 0,
            recall_window: None,
            retry_attempts: 4,
            retry_backoff_ms: 500,
            no_module_context: false,
            no_module_retrieval: false,
            no_chunk_retrieval: false,
            strict_graph: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&util::read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.min_size == 0 || self.min_size > self.max_size {
            return fail("need 1 <= min_size <= max_size");
        }
        if self.lambda == 0 || [self.module_lambda, self.method_lambda, self.chunk_lambda].contains(&Some(0)) {
            return fail("lambda must be at least 1");
        }
        if self.max_rounds == 0 {
            return fail("max_rounds must be at least 1");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return fail("temperature must lie in [0, 2]");
        }
        if self.embed_dimension == 0 {
            return fail("embed_dimension must be positive");
        }
        if self.recall_window == Some(0) {
            return fail("recall_window must be at least 1");
        }
        if self.chat_kind == ChatKind::Http && (self.chat_base_url.is_none() || self.chat_model.is_none()) {
            return fail("http chat needs chat_base_url and chat_model");
        }
        if self.embedder_kind == EmbedderKind::Remote && (self.embed_base_url.is_none() || self.embed_model.is_none()) {
            return fail("remote embedder needs embed_base_url and embed_model");
        }
        Ok(())
    }

    pub fn bug_id(&self) -> String {
        self.bug_id.clone().unwrap_or_else(|| {
            self.workspace
                .file_name()
                .map_or_else(|| "bug".into(), |n| n.to_string_lossy().into_owned())
        })
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry_attempts,
            backoff_ms: self.retry_backoff_ms,
        }
    }

    pub fn chat(&self) -> Result<Box<dyn ChatBackend>> {
        Ok(match self.chat_kind {
            ChatKind::Mock => match &self.mock_script {
                Some(p) => Box::new(MockChat::from_script_file(p)?),
                None => Box::new(MockChat::new()),
            },
            ChatKind::Http => Box::new(HttpChat::new(
                ChatEndpoint {
                    base_url: self.chat_base_url.clone().unwrap_or_default(),
                    model: self.chat_model.clone().unwrap_or_default(),
                    temperature: self.temperature,
                    api_key_env: self.chat_api_key_env.clone(),
                },
                self.retry(),
            )),
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.embedder_kind {
            EmbedderKind::OfflineHash => Box::new(HashEmbedder::new(self.embed_dimension)?),
            EmbedderKind::Remote => Box::new(HttpEmbedder::new(
                EmbedEndpoint {
                    base_url: self.embed_base_url.clone().unwrap_or_default(),
                    model: self.embed_model.clone().unwrap_or_default(),
                    dimension: self.embed_dimension,
                    api_key_env: self.embed_api_key_env.clone(),
                },
                self.retry(),
            )),
        })
    }

    pub fn strictness(&self) -> Strictness {
        if self.strict_graph {
            Strictness::Strict
        } else {
            Strictness::Lenient
        }
    }

    pub fn knowledge_options(&self) -> KnowledgeOptions {
        KnowledgeOptions {
            workers: self.workers,
            char_budget: self.char_budget,
            module_context: !self.no_module_context,
        }
    }

    pub fn query_options(&self) -> QueryOptions {
        QueryOptions {
            max_rounds: self.max_rounds,
            module_details: !self.no_module_context,
            workers: self.workers,
        }
    }

    pub fn retrieval_options(&self) -> RetrievalOptions {
        RetrievalOptions {
            lambda: self.lambda,
            module_lambda: self.module_lambda,
            method_lambda: self.method_lambda,
            chunk_lambda: self.chunk_lambda,
            module_retrieval: !self.no_module_retrieval && !self.no_module_context,
            chunk_retrieval: !self.no_chunk_retrieval,
        }
    }

    pub fn recall_set(&self) -> RecallSet {
        self.recall_window.map_or(RecallSet::FullList, RecallSet::Window)
    }

    /// The settings a chat backend's answers depend on. The script file is
    /// identified by content.
    pub(crate) fn chat_identity(&self) -> Result<serde_json::Value> {
        let script = match (&self.chat_kind, &self.mock_script) {
            (ChatKind::Mock, Some(p)) => Some(util::sha256_hex(
                &std::fs::read(p).map_err(|e| Error::io(p, e))?,
            )),
            _ => None,
        };
        Ok(serde_json::json!({
            "kind": self.chat_kind,
            "base_url": self.chat_base_url,
            "model": self.chat_model,
            "temperature": self.temperature,
            "script": script,
        }))
    }
}

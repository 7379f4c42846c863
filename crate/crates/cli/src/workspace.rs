//! Workspace layout, run manifests and the per-workspace lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semfl::{util, Error, Result};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    BuildGraph,
    DetectModules,
    ExtractKnowledge,
    Index,
    Localize,
    Evaluate,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::BuildGraph => "build-graph",
            Stage::DetectModules => "detect-modules",
            Stage::ExtractKnowledge => "extract-knowledge",
            Stage::Index => "index",
            Stage::Localize => "localize",
            Stage::Evaluate => "evaluate",
        }
    }

    /// What the stage produces, relative to the workspace root.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::BuildGraph => "graph.json",
            Stage::DetectModules => "modules.json",
            Stage::ExtractKnowledge => "kb/maps.json",
            Stage::Index => "idx/methods.vec",
            Stage::Localize => "report.json",
            Stage::Evaluate => "eval.json",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Stage::ExtractKnowledge => "knowledge base",
            Stage::Index => "index",
            other => other.artifact(),
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::BuildGraph => None,
            Stage::DetectModules => Some(Stage::BuildGraph),
            Stage::ExtractKnowledge => Some(Stage::DetectModules),
            Stage::Index => Some(Stage::ExtractKnowledge),
            Stage::Localize => Some(Stage::Index),
            Stage::Evaluate => Some(Stage::Localize),
        }
    }

    /// Settings whose change invalidates the stage's output.
    pub fn config_view(self, c: &RunConfig) -> Result<serde_json::Value> {
        use serde_json::json;
        let embedder = json!({
            "kind": c.embedder_kind,
            "base_url": c.embed_base_url,
            "model": c.embed_model,
            "dimension": c.embed_dimension,
        });
        Ok(match self {
            Stage::BuildGraph => json!({ "strict_graph": c.strict_graph }),
            Stage::DetectModules => json!({ "min_size": c.min_size, "max_size": c.max_size, "seed": c.seed }),
            Stage::ExtractKnowledge => json!({
                "chat": c.chat_identity()?,
                "char_budget": c.char_budget,
                "no_module_context": c.no_module_context,
            }),
            Stage::Index => json!({ "embedder": embedder }),
            Stage::Localize => json!({
                "chat": c.chat_identity()?,
                "embedder": embedder,
                "bug_id": c.bug_id(),
                "retrieval": c.retrieval_options(),
                "max_rounds": c.max_rounds,
                "no_module_context": c.no_module_context,
                "explain_top_k": c.explain_top_k,
            }),
            Stage::Evaluate => json!({ "recall_window": c.recall_window }),
        })
    }

    pub fn config_hash(self, c: &RunConfig) -> Result<String> {
        let view = self.config_view(c)?;
        Ok(util::sha256_hex(serde_json::to_string(&view)?.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub inputs: BTreeMap<String, String>,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.command()))
    }

    pub fn lock(&self) -> Result<WorkspaceLock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkspaceLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "workspace {} is in use by another command (remove {} if none is running)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Hash of a file addressed by a manifest key. Keys are relative to the
    /// workspace unless absolute.
    fn hash_input(&self, key: &str) -> Option<String> {
        let path = self.root.join(key);
        fs::read(path).ok().map(|b| util::sha256_hex(&b))
    }

    pub fn hash_inputs<S: AsRef<str>>(&self, keys: &[S]) -> Result<BTreeMap<String, String>> {
        keys.iter()
            .map(|k| {
                let k = k.as_ref();
                let path = self.root.join(k);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok((k.to_owned(), util::sha256_hex(&bytes)))
            })
            .collect()
    }

    /// Workspace-relative paths of every file under `dir`, sorted, hidden
    /// files skipped.
    pub fn files_under(&self, dir: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.join(dir)];
        while let Some(d) = stack.pop() {
            let entries = match fs::read_dir(&d) {
                Ok(e) => e,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(Error::io(&d, e)),
            };
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&d, e))?;
                let path = entry.path();
                if entry.file_name().to_string_lossy().starts_with('.') {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                } else if let Ok(rel) = path.strip_prefix(&self.root) {
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn write_manifest<S: AsRef<str>>(&self, stage: Stage, config: &RunConfig, inputs: &[S]) -> Result<()> {
        let manifest = Manifest {
            inputs: self.hash_inputs(inputs)?,
            config_hash: stage.config_hash(config)?,
            version: VERSION.to_owned(),
        };
        util::write_json(&self.manifest_path(stage), &manifest)
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<Option<Manifest>> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        util::read_json(&path).map(Some)
    }

    /// Errors unless `stage` and everything upstream of it ran with the
    /// current inputs, and, when `config` is given, the current settings.
    pub fn require_fresh(&self, stage: Stage, config: Option<&RunConfig>) -> Result<()> {
        if let Some(up) = stage.upstream() {
            self.require_fresh(up, config)?;
        }
        let stale = |state: String| Error::Stale {
            artifact: format!("{} in {}", stage.label(), self.root.display()),
            state,
            producer: stage.command(),
        };
        let Some(manifest) = self.read_manifest(stage)? else {
            return Err(stale("missing".into()));
        };
        if !self.path(stage.artifact()).exists() {
            return Err(stale("missing".into()));
        }
        if let Some(c) = config {
            if manifest.config_hash != stage.config_hash(c)? {
                return Err(stale("stale (settings changed)".into()));
            }
        }
        for (key, hash) in &manifest.inputs {
            match self.hash_input(key) {
                Some(h) if &h == hash => {}
                Some(_) => return Err(stale(format!("stale ({key} changed)"))),
                None => return Err(stale(format!("stale ({key} is gone)"))),
            }
        }
        Ok(())
    }
}

/// Held while a command runs; removing the file on drop releases it.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let held = ws.lock().unwrap();
        assert!(matches!(ws.lock(), Err(Error::Config(_))));
        drop(held);
        ws.lock().unwrap();
    }

    #[test]
    fn missing_manifest_names_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let err = ws.require_fresh(Stage::BuildGraph, None).unwrap_err();
        assert!(err.to_string().contains("run `build-graph` first"), "{err}");
    }

    #[test]
    fn changed_input_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = RunConfig::default();
        fs::write(ws.path("methods.json"), "[]").unwrap();
        fs::write(ws.path("graph.json"), "{}").unwrap();
        ws.write_manifest(Stage::BuildGraph, &cfg, &["methods.json"]).unwrap();
        ws.require_fresh(Stage::BuildGraph, Some(&cfg)).unwrap();
        let strict = RunConfig {
            strict_graph: true,
            ..RunConfig::default()
        };
        assert!(ws.require_fresh(Stage::BuildGraph, Some(&strict)).is_err());
        fs::write(ws.path("methods.json"), "[ ]").unwrap();
        let err = ws.require_fresh(Stage::BuildGraph, Some(&cfg)).unwrap_err();
        assert!(err.to_string().contains("methods.json changed"), "{err}");
    }
}

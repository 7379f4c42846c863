//! Multi-granularity retrieval for one query triple: methods first, then
//! modules and chunks restricted to what the retrieved methods cover.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{build_index, check_dimension, Embedder, EmbeddingIndex, Granularity};
use crate::knowledge::{ChunkId, KnowledgeBase};
use crate::querygen::QuerySet;
use crate::{par, util};

/// The three indexes of a knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct Indexes {
    pub modules: EmbeddingIndex,
    pub methods: EmbeddingIndex,
    pub chunks: EmbeddingIndex,
}

impl Indexes {
    pub fn build(embedder: &dyn Embedder, kb: &KnowledgeBase) -> Result<Self> {
        Ok(Indexes {
            modules: build_index(embedder, kb, Granularity::Module)?,
            methods: build_index(embedder, kb, Granularity::Method)?,
            chunks: build_index(embedder, kb, Granularity::Chunk)?,
        })
    }

    pub fn get(&self, g: Granularity) -> &EmbeddingIndex {
        match g {
            Granularity::Module => &self.modules,
            Granularity::Method => &self.methods,
            Granularity::Chunk => &self.chunks,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for g in Granularity::ALL {
            self.get(g).save(&dir.join(g.file_name()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |g: Granularity| -> Result<EmbeddingIndex> {
            let idx = EmbeddingIndex::load(&dir.join(g.file_name()))?;
            if idx.granularity() != g {
                return Err(Error::Integrity(format!("{} holds a {:?} index", g.file_name(), idx.granularity())));
            }
            Ok(idx)
        };
        Ok(Indexes {
            modules: load(Granularity::Module)?,
            methods: load(Granularity::Method)?,
            chunks: load(Granularity::Chunk)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBundle {
    pub test_id: String,
    pub methods: Vec<(String, f64)>,
    pub modules: Vec<(String, f64)>,
    pub chunks: Vec<(ChunkId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalOptions {
    pub lambda: usize,
    pub module_lambda: Option<usize>,
    pub method_lambda: Option<usize>,
    pub chunk_lambda: Option<usize>,
    pub module_retrieval: bool,
    pub chunk_retrieval: bool,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            lambda: 50,
            module_lambda: None,
            method_lambda: None,
            chunk_lambda: None,
            module_retrieval: true,
            chunk_retrieval: true,
        }
    }
}

impl RetrievalOptions {
    pub fn lambda_for(&self, g: Granularity) -> usize {
        match g {
            Granularity::Module => self.module_lambda,
            Granularity::Method => self.method_lambda,
            Granularity::Chunk => self.chunk_lambda,
        }
        .unwrap_or(self.lambda)
    }
}

pub fn retrieve_bundle(
    queries: &QuerySet,
    indexes: &Indexes,
    kb: &KnowledgeBase,
    options: &RetrievalOptions,
    embedder: &dyn Embedder,
) -> Result<RetrievalBundle> {
    for (name, text) in [("module", &queries.module), ("method", &queries.method), ("chunk", &queries.chunk)] {
        if text.trim().is_empty() {
            return Err(Error::Argument(format!("{}: blank {name} query", queries.test_id)));
        }
    }
    for g in Granularity::ALL {
        if options.lambda_for(g) == 0 {
            return Err(Error::Argument("lambda must be at least 1".into()));
        }
    }
    if indexes.methods.is_empty() {
        return Err(Error::Argument("cannot retrieve from an empty method index".into()));
    }
    check_dimension(&indexes.methods, embedder)?;

    let f = embedder.embed(&queries.method)?;
    let methods = indexes.methods.search(&f, options.lambda_for(Granularity::Method));

    let modules = if options.module_retrieval {
        let mut pruned: Vec<&str> = Vec::new();
        for (m, _) in &methods {
            let g = kb
                .module_of(m)
                .ok_or_else(|| Error::Integrity(format!("method {m} has no module in the knowledge base")))?;
            if !pruned.contains(&g) {
                pruned.push(g);
            }
        }
        if indexes.modules.is_empty() {
            return Err(Error::Argument("cannot retrieve from an empty module index".into()));
        }
        check_dimension(&indexes.modules, embedder)?;
        let c = embedder.embed(&queries.module)?;
        let allowed: HashSet<&str> = pruned.into_iter().collect();
        indexes
            .modules
            .search_where(&c, options.lambda_for(Granularity::Module), |id| allowed.contains(id))
    } else {
        Vec::new()
    };

    let chunks = if options.chunk_retrieval {
        let allowed: HashSet<String> = methods
            .iter()
            .flat_map(|(m, _)| kb.chunks_of(m))
            .map(ToString::to_string)
            .collect();
        if indexes.chunks.is_empty() {
            return Err(Error::Argument("cannot retrieve from an empty chunk index".into()));
        }
        check_dimension(&indexes.chunks, embedder)?;
        let l = embedder.embed(&queries.chunk)?;
        indexes
            .chunks
            .search_where(&l, options.lambda_for(Granularity::Chunk), |id| allowed.contains(id))
            .into_iter()
            .map(|(id, e)| Ok((id.parse::<ChunkId>()?, e)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(RetrievalBundle {
        test_id: queries.test_id.clone(),
        methods,
        modules,
        chunks,
    })
}

pub fn retrieve_all(
    queries: &[QuerySet],
    indexes: &Indexes,
    kb: &KnowledgeBase,
    options: &RetrievalOptions,
    embedder: &dyn Embedder,
) -> Result<Vec<RetrievalBundle>> {
    par::map(queries, |q| retrieve_bundle(q, indexes, kb, options, embedder))
        .into_iter()
        .collect()
}

/// Writes `retrieval/<test_id>.json` under `dir`.
pub fn save_bundles(dir: &Path, bundles: &[RetrievalBundle]) -> Result<()> {
    for b in bundles {
        let path = dir.join(format!("{}.json", util::file_name_for(&b.test_id)));
        util::write_json(&path, b)?;
    }
    Ok(())
}

/// Checks that every retrieved module and chunk is covered by a retrieved
/// method.
pub fn check_pruning(bundle: &RetrievalBundle, kb: &KnowledgeBase) -> Result<()> {
    let methods: HashSet<&str> = bundle.methods.iter().map(|(m, _)| m.as_str()).collect();
    let modules: HashSet<&str> = methods.iter().filter_map(|m| kb.module_of(m)).collect();
    if let Some((g, _)) = bundle.modules.iter().find(|(g, _)| !modules.contains(g.as_str())) {
        return Err(Error::Integrity(format!("module {g} covers no retrieved method")));
    }
    if let Some((c, _)) = bundle.chunks.iter().find(|(c, _)| !methods.contains(c.method_id.as_str())) {
        return Err(Error::Integrity(format!("chunk {c} belongs to no retrieved method")));
    }
    Ok(())
}

//! Suspiciousness voting over retrieval bundles, plus optional explanations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::chat::{ChatBackend, ChatMessage};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::prompts;
use crate::querygen::QuerySet;
use crate::retrieval::RetrievalBundle;

/// Similarity mass a method collected at each granularity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub module: f64,
    pub method: f64,
    pub chunk: f64,
}

impl Evidence {
    pub fn total(&self) -> f64 {
        self.module + self.method + self.chunk
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub method_id: String,
    pub score: f64,
    pub rank: usize,
    pub evidence: Evidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedReport {
    pub bug_id: String,
    pub entries: Vec<RankedEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RankedReport {
    pub fn method_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.method_id.as_str())
    }

    pub fn rank_of(&self, method_id: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.method_id == method_id).map(|e| e.rank)
    }
}

/// Scores every method retrieved at method level by any test. A retrieved
/// module votes for each such method it contains, a retrieved chunk for the
/// method that owns it, and a retrieved method for itself; each vote is
/// worth its similarity.
pub fn score_methods(bug_id: &str, bundles: &[RetrievalBundle], kb: &KnowledgeBase) -> Result<RankedReport> {
    if bundles.is_empty() {
        return Err(Error::Argument("no retrieval bundles to score".into()));
    }
    let mut evidence: BTreeMap<&str, Evidence> = BTreeMap::new();
    for b in bundles {
        for (m, _) in &b.methods {
            if !kb.contains_method(m) {
                return Err(Error::Integrity(format!("{}: unknown method {m}", b.test_id)));
            }
            evidence.entry(m.as_str()).or_default();
        }
        for (g, _) in &b.modules {
            if !kb.module_reports.contains_key(g) {
                return Err(Error::Integrity(format!("{}: unknown module {g}", b.test_id)));
            }
        }
        for (c, _) in &b.chunks {
            if kb.chunk_text(c).is_none() {
                return Err(Error::Integrity(format!("{}: unknown chunk {c}", b.test_id)));
            }
        }
    }

    let mut by_module: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for &m in evidence.keys() {
        if let Some(g) = kb.module_of(m) {
            by_module.entry(g).or_default().push(m);
        }
    }
    for b in bundles {
        for (m, e) in &b.methods {
            evidence.get_mut(m.as_str()).expect("collected above").method += e;
        }
        for (g, e) in &b.modules {
            for &m in by_module.get(g.as_str()).map_or(&[][..], Vec::as_slice) {
                evidence.get_mut(m).expect("collected above").module += e;
            }
        }
        for (c, e) in &b.chunks {
            if let Some(ev) = evidence.get_mut(c.method_id.as_str()) {
                ev.chunk += e;
            }
        }
    }

    let mut entries: Vec<RankedEntry> = evidence
        .into_iter()
        .map(|(m, ev)| RankedEntry {
            method_id: m.to_owned(),
            score: ev.total(),
            rank: 0,
            evidence: ev,
            explanation: None,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.method_id.cmp(&b.method_id)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(RankedReport {
        bug_id: bug_id.to_owned(),
        entries,
        warnings: Vec::new(),
    })
}

/// Asks the backend for a short rationale for each of the top `k` methods.
/// Failures leave the entry without an explanation and add a warning; the
/// ranking itself is never touched.
pub fn explain_top_k(
    backend: &dyn ChatBackend,
    report: RankedReport,
    kb: &KnowledgeBase,
    k: usize,
    queries: &[QuerySet],
) -> RankedReport {
    let mut report = report;
    let triples: Vec<(String, String, String)> = queries
        .iter()
        .map(|q| (q.module.clone(), q.method.clone(), q.chunk.clone()))
        .collect();
    let mut failed = BTreeSet::new();
    for entry in report.entries.iter_mut().take(k) {
        let prompt = prompts::explain_prompt(
            &entry.method_id,
            entry.rank,
            entry.score,
            kb.method_reports.get(&entry.method_id),
            &triples,
        );
        let messages = [ChatMessage::system(prompts::EXPLAIN_SYSTEM), ChatMessage::user(prompt)];
        match backend.complete(&messages) {
            Ok(c) if !c.content.trim().is_empty() => entry.explanation = Some(c.content.trim().to_owned()),
            Ok(_) => {
                failed.insert(format!("{}: empty explanation", entry.method_id));
            }
            Err(e) => {
                failed.insert(format!("{}: {e}", entry.method_id));
            }
        }
    }
    for f in failed {
        log::warn!("explanation failed for {f}");
        report.warnings.push(format!("explanation unavailable for {f}"));
    }
    report
}

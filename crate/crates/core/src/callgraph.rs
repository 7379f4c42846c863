//! Dynamic call graph construction from method metadata and invocation logs.
//!
//! The directed graph keeps raw invocation counts and is what gets serialized
//! into prompts. Community detection works on [`SymmetricGraph`], where
//! `w'(i, j) = w(i, j) + w(j, i)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodRef {
    pub id: String,
    pub signature: String,
    #[serde(rename = "file")]
    pub file_path: String,
    pub start_line: u32,
    pub end_line: u32,
    pub code: String,
    pub comment: Option<String>,
}

impl MethodRef {
    /// Simple name of the method: `pkg.Cls#name(int)` -> `name`.
    pub fn simple_name(&self) -> &str {
        let tail = self.id.rsplit_once('#').map_or(self.id.as_str(), |(_, t)| t);
        tail.split('(').next().unwrap_or(tail)
    }
}

/// Parses a `methods.json` document. Records with an empty code body are
/// dropped; duplicate ids are rejected.
pub fn ingest_method_table(document: &str) -> Result<Vec<MethodRef>> {
    let records: Vec<serde_json::Value> = serde_json::from_str(document)
        .map_err(|e| Error::Parse(format!("methods document is not a JSON array: {e}")))?;

    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (idx, record) in records.into_iter().enumerate() {
        let label = record
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("record {idx}"), |id| format!("record {idx} ({id})"));
        let method: MethodRef = serde_json::from_value(record)
            .map_err(|e| Error::Parse(format!("{label}: {e}")))?;
        if method.start_line == 0 || method.start_line > method.end_line {
            return Err(Error::Parse(format!(
                "{label}: invalid line range {}..{}",
                method.start_line, method.end_line
            )));
        }
        if !seen.insert(method.id.clone()) {
            return Err(Error::Integrity(format!("duplicate method id {}", method.id)));
        }
        if method.code.trim().is_empty() {
            log::debug!("dropping {} (no body)", method.id);
            continue;
        }
        out.push(method);
    }
    Ok(out)
}

/// One line of `calls.jsonl`. `count` is absent for unit events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub caller: String,
    pub callee: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
}

impl CallRecord {
    pub fn unit(caller: impl Into<String>, callee: impl Into<String>) -> Self {
        CallRecord {
            caller: caller.into(),
            callee: callee.into(),
            count: None,
        }
    }

    pub fn weight(&self) -> u64 {
        self.count.unwrap_or(1)
    }
}

pub fn parse_call_log(text: &str) -> Result<Vec<CallRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let record: CallRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("calls line {}: {e}", lineno + 1)))?;
        if record.count == Some(0) {
            return Err(Error::Parse(format!("calls line {}: count must be >= 1", lineno + 1)));
        }
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    /// Unknown ids abort the build; an empty log is an error.
    Strict,
    /// Unknown ids are counted and skipped.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    /// Invocations (weighted) that made it into the graph.
    pub ingested: u64,
    /// Invocations skipped because an endpoint was not in the method table.
    pub skipped: u64,
    pub unknown_ids: BTreeSet<String>,
}

/// Weighted directed call graph over runtime-covered methods.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallGraph {
    nodes: BTreeSet<String>,
    edges: BTreeMap<(String, String), u64>,
}

pub fn build_call_graph(
    events: &[CallRecord],
    methods: &[MethodRef],
    strictness: Strictness,
) -> Result<(CallGraph, BuildStats)> {
    let known: BTreeSet<&str> = methods.iter().map(|m| m.id.as_str()).collect();
    let mut graph = CallGraph::default();
    let mut stats = BuildStats::default();

    for ev in events {
        let unknown: Vec<&str> = [ev.caller.as_str(), ev.callee.as_str()]
            .into_iter()
            .filter(|id| !known.contains(id))
            .collect();
        if !unknown.is_empty() {
            if strictness == Strictness::Strict {
                return Err(Error::Integrity(format!(
                    "invocation {} -> {} references unknown method {}",
                    ev.caller, ev.callee, unknown[0]
                )));
            }
            stats.skipped += ev.weight();
            stats.unknown_ids.extend(unknown.into_iter().map(str::to_owned));
            continue;
        }
        graph.add_edge(&ev.caller, &ev.callee, ev.weight());
        stats.ingested += ev.weight();
    }

    if stats.skipped > 0 {
        log::warn!(
            "skipped {} invocations touching {} unknown ids",
            stats.skipped,
            stats.unknown_ids.len()
        );
    }
    if strictness == Strictness::Strict && graph.is_empty() {
        return Err(Error::Integrity(
            "invocation log covers no methods; a failing run must execute code".into(),
        ));
    }
    Ok((graph, stats))
}

impl CallGraph {
    pub fn add_edge(&mut self, caller: &str, callee: &str, weight: u64) {
        if weight == 0 {
            return;
        }
        self.nodes.insert(caller.to_owned());
        self.nodes.insert(callee.to_owned());
        *self
            .edges
            .entry((caller.to_owned(), callee.to_owned()))
            .or_insert(0) += weight;
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains(id)
    }

    /// Directed edges in lexicographic (caller, callee) order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.edges
            .iter()
            .map(|((a, b), w)| (a.as_str(), b.as_str(), *w))
    }

    pub fn weight(&self, caller: &str, callee: &str) -> u64 {
        self.edges
            .get(&(caller.to_owned(), callee.to_owned()))
            .copied()
            .unwrap_or(0)
    }

    /// Sum of directed edge weights.
    pub fn directed_total(&self) -> u64 {
        self.edges.values().sum()
    }

    /// Edges with both endpoints in `members`.
    pub fn internal_edges(&self, members: &BTreeSet<String>) -> Vec<(String, String, u64)> {
        self.edges
            .iter()
            .filter(|((a, b), _)| members.contains(a) && members.contains(b))
            .map(|((a, b), w)| (a.clone(), b.clone(), *w))
            .collect()
    }

    pub fn symmetrized(&self) -> SymmetricGraph {
        let ids: Vec<String> = self.nodes.iter().cloned().collect();
        let index: HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let edges: Vec<(usize, usize, f64)> = self
            .edges
            .iter()
            .map(|((a, b), w)| (index[a.as_str()], index[b.as_str()], *w as f64))
            .collect();
        SymmetricGraph::from_directed(ids, &edges)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<String>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    caller: String,
    callee: String,
    weight: u64,
}

impl Serialize for CallGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphDoc {
            nodes: self.nodes.iter().cloned().collect(),
            edges: self
                .edges()
                .map(|(a, b, w)| EdgeDoc {
                    caller: a.to_owned(),
                    callee: b.to_owned(),
                    weight: w,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CallGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = GraphDoc::deserialize(d)?;
        let mut g = CallGraph::default();
        for e in doc.edges {
            if e.weight == 0 {
                return Err(D::Error::custom("edge weight must be >= 1"));
            }
            g.add_edge(&e.caller, &e.callee, e.weight);
        }
        if doc.nodes.into_iter().collect::<BTreeSet<_>>() != g.nodes {
            return Err(D::Error::custom("node list disagrees with edge endpoints"));
        }
        Ok(g)
    }
}

/// Undirected weighted graph over dense indices. `adj[i]` lists each
/// neighbour once with `w'(i, j)`, including `i` itself for self-loops.
/// `size[i]` counts the original method nodes folded into node `i`.
#[derive(Debug, Clone)]
pub struct SymmetricGraph {
    ids: Vec<String>,
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    size: Vec<usize>,
    total: f64,
}

impl SymmetricGraph {
    /// Symmetrizes directed weighted edges: `w'(i,j) = w(i,j) + w(j,i)`, so a
    /// self-loop of weight `w` contributes `2w` to `w'(i,i)`.
    pub fn from_directed(ids: Vec<String>, edges: &[(usize, usize, f64)]) -> Self {
        let n = ids.len();
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(a, b, w) in edges {
            *maps[a].entry(b).or_insert(0.0) += w;
            *maps[b].entry(a).or_insert(0.0) += w;
        }
        Self::from_symmetric(ids, maps, vec![1; n])
    }

    /// `maps[i][j]` must already equal `maps[j][i]`.
    pub(crate) fn from_symmetric(
        ids: Vec<String>,
        maps: Vec<BTreeMap<usize, f64>>,
        size: Vec<usize>,
    ) -> Self {
        let adj: Vec<Vec<(usize, f64)>> = maps
            .into_iter()
            .map(|m| m.into_iter().filter(|(_, w)| *w != 0.0).collect())
            .collect();
        let degree: Vec<f64> = adj.iter().map(|r| r.iter().map(|(_, w)| w).sum()).collect();
        let total = degree.iter().sum();
        SymmetricGraph {
            ids,
            adj,
            degree,
            size,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|s| s.as_str().cmp(id)).ok()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    /// `k_i`
    pub fn degree(&self, i: usize) -> f64 {
        self.degree[i]
    }

    pub fn node_size(&self, i: usize) -> usize {
        self.size[i]
    }

    /// `W' = sum_{i,j} w'(i,j)`
    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adj[i]
            .binary_search_by_key(&j, |(n, _)| *n)
            .map_or(0.0, |p| self.adj[i][p].1)
    }

    pub fn weight_by_id(&self, a: &str, b: &str) -> f64 {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.weight(i, j),
            _ => 0.0,
        }
    }

    pub fn scaled(&self, alpha: f64) -> SymmetricGraph {
        let mut g = self.clone();
        for row in &mut g.adj {
            for (_, w) in row.iter_mut() {
                *w *= alpha;
            }
        }
        for k in &mut g.degree {
            *k *= alpha;
        }
        g.total *= alpha;
        g
    }
}

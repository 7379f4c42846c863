//! Module, method and chunk knowledge extracted by a chat model.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::callgraph::{CallGraph, MethodRef};
use crate::chat::{ChatBackend, ChatMessage, Exchange};
use crate::community::{FunctionalModule, ModulePartition};
use crate::error::{Error, Result};
use crate::prompts;
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub module_id: String,
    pub title: String,
    pub summary: String,
    pub detailed_findings: Vec<String>,
}

impl ModuleReport {
    /// The document embedded into the module index.
    pub fn document(&self) -> String {
        let mut s = format!("{}\n{}", self.title, self.summary);
        for f in &self.detailed_findings {
            s.push('\n');
            s.push_str(f);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method_id: String,
    pub functionality: String,
    /// One entry per chunk, in generation order.
    pub chunk_descriptions: Vec<String>,
}

/// A chunk is identified by its owning method and position, written
/// `<method_id>::<ordinal>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId {
    pub method_id: String,
    pub ordinal: usize,
}

impl ChunkId {
    pub fn new(method_id: impl Into<String>, ordinal: usize) -> Self {
        ChunkId {
            method_id: method_id.into(),
            ordinal,
        }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.method_id, self.ordinal)
    }
}

impl FromStr for ChunkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, ord) = s
            .rsplit_once("::")
            .ok_or_else(|| Error::Parse(format!("chunk id without ordinal: {s}")))?;
        let ordinal = ord
            .parse()
            .map_err(|_| Error::Parse(format!("bad chunk ordinal in {s}")))?;
        Ok(ChunkId::new(method, ordinal))
    }
}

impl Serialize for ChunkId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChunkId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `kb/maps.json`
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeMaps {
    /// method -> module
    pub phi: BTreeMap<String, String>,
    /// method -> chunks
    pub varphi: BTreeMap<String, Vec<ChunkId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub module_reports: BTreeMap<String, ModuleReport>,
    pub method_reports: BTreeMap<String, MethodReport>,
    pub maps: KnowledgeMaps,
}

impl KnowledgeBase {
    pub fn from_reports(
        module_reports: BTreeMap<String, ModuleReport>,
        method_reports: BTreeMap<String, MethodReport>,
        phi: BTreeMap<String, String>,
    ) -> Result<Self> {
        let varphi = method_reports
            .iter()
            .map(|(id, r)| {
                let chunks = (0..r.chunk_descriptions.len()).map(|i| ChunkId::new(id.clone(), i)).collect();
                (id.clone(), chunks)
            })
            .collect();
        let kb = KnowledgeBase {
            module_reports,
            method_reports,
            maps: KnowledgeMaps { phi, varphi },
        };
        kb.validate()?;
        Ok(kb)
    }

    pub fn module_of(&self, method_id: &str) -> Option<&str> {
        self.maps.phi.get(method_id).map(String::as_str)
    }

    pub fn chunks_of(&self, method_id: &str) -> &[ChunkId] {
        self.maps.varphi.get(method_id).map_or(&[], Vec::as_slice)
    }

    pub fn chunk_text(&self, chunk: &ChunkId) -> Option<&str> {
        self.method_reports
            .get(&chunk.method_id)?
            .chunk_descriptions
            .get(chunk.ordinal)
            .map(String::as_str)
    }

    pub fn contains_method(&self, method_id: &str) -> bool {
        self.method_reports.contains_key(method_id)
    }

    pub fn chunk_count(&self) -> usize {
        self.maps.varphi.values().map(Vec::len).sum()
    }

    /// Module, method and chunk knowledge of one method.
    pub fn triple(&self, method_id: &str) -> Option<(&ModuleReport, &MethodReport, Vec<&str>)> {
        let module = self.module_reports.get(self.module_of(method_id)?)?;
        let method = self.method_reports.get(method_id)?;
        let chunks = self
            .chunks_of(method_id)
            .iter()
            .map(|c| self.chunk_text(c))
            .collect::<Option<Vec<_>>>()?;
        Some((module, method, chunks))
    }

    pub fn validate(&self) -> Result<()> {
        for (m, module) in &self.maps.phi {
            if !self.module_reports.contains_key(module) {
                return Err(Error::Integrity(format!("{m} maps to unknown module {module}")));
            }
            if !self.method_reports.contains_key(m) {
                return Err(Error::Integrity(format!("no method report for {m}")));
            }
        }
        for (m, report) in &self.method_reports {
            if !self.maps.phi.contains_key(m) {
                return Err(Error::Integrity(format!("{m} has a report but no module")));
            }
            let expected: Vec<ChunkId> = (0..report.chunk_descriptions.len())
                .map(|i| ChunkId::new(m.clone(), i))
                .collect();
            if self.chunks_of(m) != expected.as_slice() {
                return Err(Error::Integrity(format!("chunk map of {m} disagrees with its report")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for r in self.module_reports.values() {
            save_module_report(dir, r)?;
        }
        for r in self.method_reports.values() {
            save_method_report(dir, r)?;
        }
        util::write_json(&dir.join("maps.json"), &self.maps)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let maps: KnowledgeMaps = util::read_json(&dir.join("maps.json"))?;
        let (modules, methods) = load_reports(dir)?;
        let mut kb = KnowledgeBase {
            module_reports: BTreeMap::new(),
            method_reports: BTreeMap::new(),
            maps,
        };
        for (id, module) in kb.maps.phi.clone() {
            let report = methods
                .get(&id)
                .ok_or_else(|| Error::Integrity(format!("missing method report {id}")))?;
            kb.method_reports.insert(id, report.clone());
            if let std::collections::btree_map::Entry::Vacant(slot) = kb.module_reports.entry(module) {
                let r = modules
                    .get(slot.key())
                    .ok_or_else(|| Error::Integrity(format!("missing module report {}", slot.key())))?;
                slot.insert(r.clone());
            }
        }
        kb.validate()?;
        Ok(kb)
    }
}

fn save_module_report(dir: &Path, r: &ModuleReport) -> Result<()> {
    let path = dir.join("modules").join(format!("{}.json", util::file_name_for(&r.module_id)));
    util::write_json(&path, r)
}

fn save_method_report(dir: &Path, r: &MethodReport) -> Result<()> {
    let path = dir.join("methods").join(format!("{}.json", util::file_name_for(&r.method_id)));
    util::write_json(&path, r)
}

type Reports = (BTreeMap<String, ModuleReport>, BTreeMap<String, MethodReport>);

/// Reads whatever reports exist under `dir`, including a partial run.
pub fn load_reports(dir: &Path) -> Result<Reports> {
    fn read_all<T: serde::de::DeserializeOwned>(dir: &Path) -> Result<Vec<T>> {
        let Ok(entries) = fs::read_dir(dir) else {
            return Ok(Vec::new());
        };
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| util::read_json(p)).collect()
    }
    let modules = read_all::<ModuleReport>(&dir.join("modules"))?
        .into_iter()
        .map(|r| (r.module_id.clone(), r))
        .collect();
    let methods = read_all::<MethodReport>(&dir.join("methods"))?
        .into_iter()
        .map(|r| (r.method_id.clone(), r))
        .collect();
    Ok((modules, methods))
}

/// Renders a module as prompt text: method blocks sorted by id, then the
/// internal call edges in lexicographic order.
pub fn serialize_module(
    module: &FunctionalModule,
    methods: &HashMap<&str, &MethodRef>,
) -> Result<String> {
    render_module(module, methods, &Default::default())
}

/// Like [`serialize_module`], but elides code bodies longest-first until the
/// text fits in `budget` characters (or nothing is left to elide).
pub fn serialize_module_within(
    module: &FunctionalModule,
    methods: &HashMap<&str, &MethodRef>,
    budget: usize,
) -> Result<String> {
    let mut elided = std::collections::BTreeSet::new();
    let mut text = render_module(module, methods, &elided)?;
    if text.chars().count() <= budget {
        return Ok(text);
    }
    let mut by_len: Vec<&MethodRef> = module
        .members
        .iter()
        .map(|id| methods[id.as_str()])
        .collect();
    by_len.sort_by(|a, b| b.code.len().cmp(&a.code.len()).then_with(|| a.id.cmp(&b.id)));
    for m in by_len {
        elided.insert(m.id.clone());
        text = render_module(module, methods, &elided)?;
        if text.chars().count() <= budget {
            break;
        }
    }
    log::debug!("{}: elided {} code bodies", module.module_id, elided.len());
    Ok(text)
}

fn render_module(
    module: &FunctionalModule,
    methods: &HashMap<&str, &MethodRef>,
    elided: &std::collections::BTreeSet<String>,
) -> Result<String> {
    let mut members = module.members.clone();
    members.sort();
    let mut s = format!("Module ID: {}\n\n## Methods\n", module.module_id);
    for id in &members {
        let m = methods
            .get(id.as_str())
            .ok_or_else(|| Error::Integrity(format!("module member {id} has no method metadata")))?;
        let comment = m.comment.as_deref().filter(|c| !c.trim().is_empty()).unwrap_or(prompts::NONE);
        s.push_str(&format!(
            "### Method {}\nSignature: {}\nDeveloper Comment: {}\n",
            m.id,
            m.signature,
            comment.trim()
        ));
        if elided.contains(id) {
            s.push_str("Code: (elided)\n\n");
        } else {
            s.push_str(&format!("Code:\n```\n{}\n```\n\n", m.code.trim_end()));
        }
    }
    s.push_str("## Calls\n");
    let mut edges = module.internal_edges.clone();
    edges.sort();
    if edges.is_empty() {
        s.push_str("none\n");
    }
    for (a, b, w) in edges {
        s.push_str(&format!("{a} -> {b} (count={w})\n"));
    }
    Ok(s)
}

/// Counters for one extraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeStats {
    pub calls: u32,
    pub transport_retries: u32,
    pub reprompts: u32,
}

impl std::ops::AddAssign for ExchangeStats {
    fn add_assign(&mut self, o: Self) {
        self.calls += o.calls;
        self.transport_retries += o.transport_retries;
        self.reprompts += o.reprompts;
    }
}

/// Asks for a structured report, re-prompting once if the answer does not
/// parse.
fn converse<T>(
    backend: &dyn ChatBackend,
    subject: &str,
    mut messages: Vec<ChatMessage>,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<(T, ExchangeStats, Vec<Exchange>)> {
    let mut stats = ExchangeStats::default();
    let mut transcript = Vec::new();
    let mut last_reason = String::new();
    for attempt in 0..2 {
        let completion = backend.complete(&messages)?;
        stats.calls += 1;
        stats.transport_retries += completion.retries;
        transcript.push(Exchange {
            request: messages.clone(),
            response: completion.content.clone(),
        });
        match parse(&completion.content) {
            Ok(v) => return Ok((v, stats, transcript)),
            Err(reason) if attempt == 0 => {
                log::warn!("{subject}: {reason}; re-prompting");
                stats.reprompts += 1;
                last_reason = reason;
                messages.push(ChatMessage::assistant(completion.content));
                messages.push(ChatMessage::user(prompts::REPORT_REPROMPT));
            }
            Err(reason) => {
                return Err(Error::Extraction {
                    subject: subject.to_owned(),
                    reason: format!("{reason} (first attempt: {last_reason})"),
                    raw_response: completion.content,
                })
            }
        }
    }
    unreachable!()
}

pub fn extract_module_report(
    backend: &dyn ChatBackend,
    module_id: &str,
    serialized: &str,
) -> Result<(ModuleReport, ExchangeStats)> {
    if serialized.trim().is_empty() {
        return Err(Error::Argument(format!("empty serialization for {module_id}")));
    }
    let messages = vec![
        ChatMessage::system(prompts::MODULE_SYSTEM),
        ChatMessage::user(prompts::module_prompt(serialized)),
    ];
    let (report, stats, _) = converse(backend, module_id, messages, |text| {
        parse_module_report(module_id, text)
    })?;
    Ok((report, stats))
}

pub fn extract_method_report(
    backend: &dyn ChatBackend,
    method: &MethodRef,
    module_context: Option<&ModuleReport>,
) -> Result<(MethodReport, ExchangeStats)> {
    if method.code.trim().is_empty() {
        return Err(Error::Argument(format!("{} has no code", method.id)));
    }
    let messages = vec![
        ChatMessage::system(prompts::METHOD_SYSTEM),
        ChatMessage::user(prompts::method_prompt(method, module_context)),
    ];
    let (report, stats, _) = converse(backend, &method.id, messages, |text| {
        parse_method_report(&method.id, text)
    })?;
    Ok((report, stats))
}

const MODULE_HEADINGS: [&str; 3] = ["TITLE", "SUMMARY", "DETAILED FINDINGS"];
const METHOD_HEADINGS: [&str; 2] = ["FUNCTIONALITY", "DESCRIPTION"];

pub fn parse_module_report(module_id: &str, text: &str) -> std::result::Result<ModuleReport, String> {
    let sections = split_sections(text, &MODULE_HEADINGS)?;
    let title = sections["TITLE"]
        .lines()
        .map(|l| l.trim().trim_matches('*').trim())
        .find(|l| !l.is_empty())
        .unwrap_or_default()
        .to_owned();
    let summary = join_lines(&sections["SUMMARY"]);
    let detailed_findings = items(&sections["DETAILED FINDINGS"]);
    if title.is_empty() || summary.is_empty() || detailed_findings.is_empty() {
        return Err("a report section is empty".into());
    }
    Ok(ModuleReport {
        module_id: module_id.to_owned(),
        title,
        summary,
        detailed_findings,
    })
}

pub fn parse_method_report(method_id: &str, text: &str) -> std::result::Result<MethodReport, String> {
    let sections = split_sections(text, &METHOD_HEADINGS)?;
    let functionality = join_lines(&sections["FUNCTIONALITY"]);
    let chunk_descriptions = items(&sections["DESCRIPTION"]);
    if functionality.is_empty() || chunk_descriptions.is_empty() {
        return Err("a report section is empty".into());
    }
    Ok(MethodReport {
        method_id: method_id.to_owned(),
        functionality,
        chunk_descriptions,
    })
}

/// Recognizes `TITLE`, `# Title`, `**Title:** text`, `title: text` and the
/// like. Returns the heading and any inline content after it.
fn heading_line<'a>(line: &'a str, headings: &[&'static str]) -> Option<(&'static str, &'a str)> {
    let stripped = line.trim().trim_start_matches(['#', '*', ' ', '\t']);
    let decorated = stripped.len() != line.trim().len();
    for &h in headings {
        if stripped.len() >= h.len()
            && stripped.is_char_boundary(h.len())
            && stripped[..h.len()].eq_ignore_ascii_case(h)
        {
            let rest = &stripped[h.len()..];
            let rest_trim = rest.trim_start_matches(['*', ' ']);
            if let Some(inline) = rest_trim.strip_prefix(':') {
                return Some((h, inline.trim_start_matches(['*', ' ']).trim()));
            }
            if rest.trim_matches(['*', ' ']).is_empty() && (decorated || rest.is_empty()) {
                return Some((h, ""));
            }
        }
    }
    None
}

fn split_sections(
    text: &str,
    headings: &[&'static str],
) -> std::result::Result<HashMap<&'static str, String>, String> {
    let mut sections: HashMap<&'static str, String> = HashMap::new();
    let mut current: Option<&'static str> = None;
    for line in text.lines() {
        if let Some((h, inline)) = heading_line(line, headings) {
            if !sections.contains_key(h) {
                current = Some(h);
                let entry = sections.entry(h).or_default();
                if !inline.is_empty() {
                    entry.push_str(inline);
                    entry.push('\n');
                }
                continue;
            }
        }
        if let Some(h) = current {
            let entry = sections.get_mut(h).unwrap();
            entry.push_str(line);
            entry.push('\n');
        }
    }
    let missing: Vec<&str> = headings
        .iter()
        .filter(|h| !sections.contains_key(*h))
        .copied()
        .collect();
    if missing.is_empty() {
        Ok(sections)
    } else {
        Err(format!("missing section(s): {}", missing.join(", ")))
    }
}

fn join_lines(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn list_marker(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for m in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(m) {
            return Some(rest);
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return Some(r);
        }
    }
    None
}

/// Bullet items if the body is a list, otherwise blank-line separated
/// paragraphs.
fn items(body: &str) -> Vec<String> {
    let is_list = body.lines().any(|l| list_marker(l).is_some());
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        let j = join_lines(cur);
        if !j.is_empty() {
            out.push(j);
        }
        cur.clear();
    };
    for line in body.lines() {
        if is_list {
            if let Some(rest) = list_marker(line) {
                flush(&mut cur, &mut out);
                cur.push_str(rest);
            } else if !line.trim().is_empty() {
                cur.push(' ');
                cur.push_str(line);
            }
        } else if line.trim().is_empty() {
            flush(&mut cur, &mut out);
        } else {
            cur.push(' ');
            cur.push_str(line);
        }
    }
    flush(&mut cur, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeOptions {
    /// Concurrent backend requests.
    pub workers: usize,
    /// Character budget for a serialized module.
    pub char_budget: usize,
    /// Whether method prompts include their module's report.
    pub module_context: bool,
}

impl Default for KnowledgeOptions {
    fn default() -> Self {
        KnowledgeOptions {
            workers: 4,
            char_budget: 48_000,
            module_context: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeStats {
    pub modules_extracted: usize,
    pub methods_extracted: usize,
    pub reused: usize,
    pub exchanges: ExchangeStats,
}

/// Extracts module reports, then method reports using the module report as
/// context. When `dir` is given every finished report is written there
/// immediately and reports already present are reused, so an aborted run can
/// be resumed.
pub fn build_knowledge_base(
    backend: &dyn ChatBackend,
    graph: &CallGraph,
    partition: &ModulePartition,
    methods: &[MethodRef],
    options: &KnowledgeOptions,
    dir: Option<&Path>,
) -> Result<(KnowledgeBase, KnowledgeStats)> {
    let lookup: HashMap<&str, &MethodRef> = methods.iter().map(|m| (m.id.as_str(), m)).collect();
    if let Some(missing) = graph.nodes().find(|id| !lookup.contains_key(id)) {
        return Err(Error::Integrity(format!("covered method {missing} has no metadata")));
    }
    let (mut module_reports, mut method_reports) = match dir {
        Some(d) => load_reports(d)?,
        None => Default::default(),
    };
    let mut stats = KnowledgeStats::default();

    let modules = partition.functional_modules(graph);
    module_reports.retain(|id, _| partition.modules().contains_key(id));
    let pending: Vec<&FunctionalModule> = modules
        .iter()
        .filter(|m| !module_reports.contains_key(&m.module_id))
        .collect();
    stats.reused += module_reports.len();

    let results = crate::par::map_bounded(&pending, options.workers, |module| {
        let text = serialize_module_within(module, &lookup, options.char_budget)?;
        let (report, ex) = extract_module_report(backend, &module.module_id, &text)?;
        if let Some(d) = dir {
            save_module_report(d, &report)?;
        }
        Ok((report, ex))
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok((report, ex)) => {
                stats.modules_extracted += 1;
                stats.exchanges += ex;
                module_reports.insert(report.module_id.clone(), report);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    method_reports.retain(|id, _| partition.module_of(id).is_some());
    stats.reused += method_reports.len();
    let pending: Vec<&MethodRef> = partition
        .assignment()
        .keys()
        .filter(|id| !method_reports.contains_key(*id))
        .map(|id| lookup[id.as_str()])
        .collect();
    let results = crate::par::map_bounded(&pending, options.workers, |method| {
        let module_id = partition.module_of(&method.id).expect("assigned");
        let context = options.module_context.then(|| &module_reports[module_id]);
        let (report, ex) = extract_method_report(backend, method, context)?;
        if let Some(d) = dir {
            save_method_report(d, &report)?;
        }
        Ok((report, ex))
    });
    for r in results {
        match r {
            Ok((report, ex)) => {
                stats.methods_extracted += 1;
                stats.exchanges += ex;
                method_reports.insert(report.method_id.clone(), report);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let kb = KnowledgeBase::from_reports(module_reports, method_reports, partition.assignment().clone())?;
    if let Some(d) = dir {
        util::write_json(&d.join("maps.json"), &kb.maps)?;
    }
    Ok((kb, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::FnChat;

    #[test]
    fn parses_plain_report() {
        let text = "Sure, here it is.\n\nTITLE: Order pricing\nSUMMARY: Computes totals\nacross orders.\nDETAILED FINDINGS:\n- `total` sums lines\n- `tax` applies\n  the rate\n";
        let r = parse_module_report("m", text).unwrap();
        assert_eq!(r.title, "Order pricing");
        assert_eq!(r.summary, "Computes totals across orders.");
        assert_eq!(r.detailed_findings, ["`total` sums lines", "`tax` applies the rate"]);
    }

    #[test]
    fn parses_markdown_headings_case_insensitively() {
        let text = "## Title\n**Parser**\n\n## Summary\nReads input.\n\n## Detailed Findings\n1. first\n2. second\n";
        let r = parse_module_report("m", text).unwrap();
        assert_eq!(r.title, "Parser");
        assert_eq!(r.detailed_findings.len(), 2);
    }

    #[test]
    fn missing_heading_is_reported() {
        let err = parse_module_report("m", "TITLE: x\nSUMMARY: y\n").unwrap_err();
        assert!(err.contains("DETAILED FINDINGS"), "{err}");
    }

    #[test]
    fn description_paragraphs_become_chunks() {
        let text = "FUNCTIONALITY: Adds numbers.\n\nDESCRIPTION:\nChecks inputs.\n\nSums them\nin a loop.\n\nReturns.";
        let r = parse_method_report("a", text).unwrap();
        assert_eq!(r.chunk_descriptions, ["Checks inputs.", "Sums them in a loop.", "Returns."]);
    }

    #[test]
    fn prose_word_is_not_a_heading() {
        let text = "FUNCTIONALITY: x\nDESCRIPTION:\nDescription of the loop follows.\n";
        let r = parse_method_report("a", text).unwrap();
        assert_eq!(r.chunk_descriptions, ["Description of the loop follows."]);
    }

    #[test]
    fn chunk_id_roundtrip() {
        let c = ChunkId::new("a.B#c(int)", 3);
        assert_eq!(c.to_string(), "a.B#c(int)::3");
        assert_eq!("a.B#c(int)::3".parse::<ChunkId>().unwrap(), c);
        assert!("nope".parse::<ChunkId>().is_err());
    }

    fn method(id: &str, code: &str) -> MethodRef {
        MethodRef {
            id: id.into(),
            signature: format!("void {id}()"),
            file_path: "X.java".into(),
            start_line: 1,
            end_line: 2,
            code: code.into(),
            comment: None,
        }
    }

    #[test]
    fn serialization_is_stable() {
        let a = method("a", "void a() { b(); }");
        let b = method("b", "void b() {}");
        let lookup: HashMap<&str, &MethodRef> = [("a", &a), ("b", &b)].into_iter().collect();
        let module = FunctionalModule {
            module_id: "module-000".into(),
            members: vec!["b".into(), "a".into()],
            internal_edges: vec![("a".into(), "b".into(), 2)],
        };
        let s1 = serialize_module(&module, &lookup).unwrap();
        let s2 = serialize_module(&module, &lookup).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.contains("### Method a") && s1.contains("### Method b"));
        assert!(s1.contains("a -> b (count=2)"));
        assert!(s1.find("### Method a") < s1.find("### Method b"));

        let lonely = FunctionalModule {
            internal_edges: vec![],
            ..module.clone()
        };
        assert!(serialize_module(&lonely, &lookup).unwrap().contains("## Calls\nnone\n"));

        let missing = FunctionalModule {
            members: vec!["zzz".into()],
            ..module.clone()
        };
        assert!(matches!(serialize_module(&missing, &lookup), Err(Error::Integrity(_))));
    }

    #[test]
    fn budget_elides_longest_bodies_first() {
        let long = method("a", &"x".repeat(500));
        let short = method("b", "void b() {}");
        let lookup: HashMap<&str, &MethodRef> = [("a", &long), ("b", &short)].into_iter().collect();
        let module = FunctionalModule {
            module_id: "m".into(),
            members: vec!["a".into(), "b".into()],
            internal_edges: vec![],
        };
        let s = serialize_module_within(&module, &lookup, 300).unwrap();
        assert!(s.contains("Code: (elided)"));
        assert!(s.contains("void b() {}"));
    }

    #[test]
    fn reprompts_once_then_fails_with_raw_response() {
        let bad = FnChat::new(|_, _| Ok("TITLE: t\nSUMMARY: s\n".to_string()));
        match extract_module_report(&bad, "m", "Module ID: m") {
            Err(Error::Extraction { raw_response, .. }) => assert!(raw_response.contains("TITLE")),
            other => panic!("{other:?}"),
        }
        assert_eq!(bad.calls(), 2);

        let fixed = FnChat::new(|msgs: &[ChatMessage], i| {
            if i == 0 {
                Ok("nonsense".into())
            } else {
                assert!(msgs.last().unwrap().content.contains("exact report structure"));
                Ok("TITLE: t\nSUMMARY: s\nDETAILED FINDINGS:\n- f".into())
            }
        });
        let (r, stats) = extract_module_report(&fixed, "m", "Module ID: m").unwrap();
        assert_eq!(r.title, "t");
        assert_eq!(stats.reprompts, 1);
    }

    #[test]
    fn transport_failure_is_a_backend_error() {
        let down = FnChat::new(|_, _| Err(crate::BackendError::Fatal("down".into())));
        assert!(matches!(
            extract_module_report(&down, "m", "x"),
            Err(Error::Backend(_))
        ));
    }
}

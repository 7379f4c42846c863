//! The query-generation conversation: per failed test, the chat backend may
//! ask for module knowledge a few times before committing to a
//! module/method/chunk query triple.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatBackend, ChatMessage, Exchange};
use crate::error::{Error, Result};
use crate::index::{check_dimension, Embedder, EmbeddingIndex};
use crate::knowledge::{KnowledgeBase, ModuleReport};
use crate::prompts::{self, FaultView};
use crate::{par, util};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInfo {
    pub test_id: String,
    pub test_code: String,
    #[serde(default)]
    pub test_output: Option<String>,
    #[serde(default)]
    pub stack_trace: Option<String>,
    #[serde(default, skip_serializing)]
    pub module_details: Vec<(String, ModuleReport)>,
}

impl FaultInfo {
    pub fn new(test_id: impl Into<String>, test_code: impl Into<String>) -> Self {
        FaultInfo {
            test_id: test_id.into(),
            test_code: test_code.into(),
            test_output: None,
            stack_trace: None,
            module_details: Vec::new(),
        }
    }
}

/// Reads `tests.json`: an array of failed tests.
pub fn load_faults(path: &Path) -> Result<Vec<FaultInfo>> {
    let faults: Vec<FaultInfo> = util::read_json(path)?;
    if faults.is_empty() {
        return Err(Error::Argument(format!("{}: no failed tests", path.display())));
    }
    for f in &faults {
        if f.test_id.trim().is_empty() {
            return Err(Error::Parse(format!("{}: failed test with empty id", path.display())));
        }
    }
    Ok(faults)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub test_id: String,
    pub module: String,
    pub method: String,
    pub chunk: String,
    pub rounds_used: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolResponse {
    Request(String),
    Answer {
        module: String,
        method: String,
        chunk: String,
    },
}

/// Finds the first JSON object embedded in `text` and classifies it.
pub fn parse_protocol_response(text: &str) -> std::result::Result<ProtocolResponse, String> {
    let mut saw_object = false;
    for (start, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        let Some(Ok(serde_json::Value::Object(obj))) = stream.next() else {
            continue;
        };
        saw_object = true;
        let get = |k: &str| obj.get(k).and_then(|v| v.as_str()).map(str::trim);
        if let (Some(module), Some(method), Some(chunk)) = (get("module"), get("method"), get("chunk")) {
            if module.is_empty() || method.is_empty() || chunk.is_empty() {
                return Err("answer has an empty query field".into());
            }
            return Ok(ProtocolResponse::Answer {
                module: module.to_owned(),
                method: method.to_owned(),
                chunk: chunk.to_owned(),
            });
        }
        if let Some(request) = get("request") {
            if request.is_empty() {
                return Err("empty request".into());
            }
            return Ok(ProtocolResponse::Request(request.to_owned()));
        }
        break;
    }
    if saw_object {
        Err("JSON object is neither a request nor an answer".into())
    } else {
        Err("no JSON object in response".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOptions {
    pub max_rounds: u32,
    /// Answer knowledge requests with module reports. Off for the
    /// no-module-context ablation.
    pub module_details: bool,
    pub workers: usize,
}

impl Default for QueryOptions {
    fn default() -> Self {
        QueryOptions {
            max_rounds: 5,
            module_details: true,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRun {
    pub queries: QuerySet,
    pub fault: FaultInfo,
    pub transcript: Vec<Exchange>,
}

/// Runs the conversation for one failed test. Every backend call, re-prompts
/// included, counts toward the budget of `max_rounds + 1` calls; the last
/// call always carries the final-round instruction.
pub fn generate_queries(
    backend: &dyn ChatBackend,
    fault: FaultInfo,
    module_index: &EmbeddingIndex,
    kb: &KnowledgeBase,
    options: &QueryOptions,
    embedder: &dyn Embedder,
) -> Result<QueryRun> {
    if options.module_details {
        check_dimension(module_index, embedder)?;
    }
    let mut fault = fault;
    let mut seen: BTreeSet<String> = fault.module_details.iter().map(|(id, _)| id.clone()).collect();
    let mut transcript: Vec<Exchange> = Vec::new();
    let mut forced_final = false;
    let mut pending_reprompt: Option<String> = None;
    let mut failures = 0;

    let fail = |fault: &FaultInfo, transcript: Vec<Exchange>, reason: String| Error::QueryGen {
        test_id: fault.test_id.clone(),
        reason,
        transcript,
    };

    for call in 0..=options.max_rounds {
        let final_round = forced_final || call == options.max_rounds;
        let view = FaultView {
            test_id: &fault.test_id,
            test_code: &fault.test_code,
            test_output: fault.test_output.as_deref(),
            stack_trace: fault.stack_trace.as_deref(),
            module_details: &fault.module_details,
            allow_requests: options.module_details,
            final_round,
        };
        let mut messages = vec![
            ChatMessage::system(prompts::QUERY_SYSTEM),
            ChatMessage::user(prompts::query_prompt(&view)),
        ];
        if let Some(previous) = pending_reprompt.take() {
            messages.push(ChatMessage::assistant(previous));
            messages.push(ChatMessage::user(prompts::PROTOCOL_REPROMPT));
        }
        let completion = backend.complete(&messages)?;
        transcript.push(Exchange {
            request: messages,
            response: completion.content.clone(),
        });

        let parsed = match parse_protocol_response(&completion.content) {
            Ok(p) => p,
            Err(reason) => {
                failures += 1;
                if failures >= 2 || final_round {
                    return Err(fail(&fault, transcript, reason));
                }
                log::warn!("{}: {reason}; re-prompting", fault.test_id);
                pending_reprompt = Some(completion.content);
                continue;
            }
        };
        failures = 0;

        match parsed {
            ProtocolResponse::Answer { module, method, chunk } => {
                return Ok(finish(fault, transcript, module, method, chunk));
            }
            ProtocolResponse::Request(text) if final_round => {
                log::warn!("{}: request in the final round; using it as the query", fault.test_id);
                return Ok(finish(fault, transcript, text.clone(), text.clone(), text));
            }
            ProtocolResponse::Request(text) => {
                if !options.module_details || module_index.is_empty() {
                    forced_final = true;
                    continue;
                }
                let q = embedder.embed(&text)?;
                let hit = module_index.search_where(&q, 1, |id| !seen.contains(id));
                match hit.into_iter().next() {
                    Some((id, _)) => {
                        let report = kb.module_reports.get(&id).ok_or_else(|| {
                            Error::Integrity(format!("module {id} is indexed but has no report"))
                        })?;
                        seen.insert(id.clone());
                        fault.module_details.push((id, report.clone()));
                    }
                    None => forced_final = true,
                }
            }
        }
    }
    Err(fail(&fault, transcript, "call budget exhausted".into()))
}

fn finish(fault: FaultInfo, transcript: Vec<Exchange>, module: String, method: String, chunk: String) -> QueryRun {
    QueryRun {
        queries: QuerySet {
            test_id: fault.test_id.clone(),
            module,
            method,
            chunk,
            rounds_used: fault.module_details.len() as u32,
        },
        fault,
        transcript,
    }
}

/// One conversation per failed test, run on up to `options.workers` threads.
/// Results come back in test id order.
pub fn generate_all(
    backend: &dyn ChatBackend,
    faults: Vec<FaultInfo>,
    module_index: &EmbeddingIndex,
    kb: &KnowledgeBase,
    options: &QueryOptions,
    embedder: &dyn Embedder,
) -> Result<Vec<QueryRun>> {
    let mut faults = faults;
    faults.sort_by(|a, b| a.test_id.cmp(&b.test_id));
    if let Some(w) = faults.windows(2).find(|w| w[0].test_id == w[1].test_id) {
        return Err(Error::Argument(format!("duplicate failed test {}", w[0].test_id)));
    }
    par::map_bounded(&faults, options.workers, |f| {
        generate_queries(backend, f.clone(), module_index, kb, options, embedder)
    })
    .into_iter()
    .collect()
}

/// Row of `queries.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub test_id: String,
    pub module: String,
    pub method: String,
    pub chunk: String,
    pub rounds_used: u32,
    pub transcript_path: String,
}

impl QueryRecord {
    pub fn queries(&self) -> QuerySet {
        QuerySet {
            test_id: self.test_id.clone(),
            module: self.module.clone(),
            method: self.method.clone(),
            chunk: self.chunk.clone(),
            rounds_used: self.rounds_used,
        }
    }
}

/// Writes `queries.json` under `dir` and one transcript per test under
/// `dir/transcripts/`.
pub fn save_runs(dir: &Path, runs: &[QueryRun]) -> Result<Vec<QueryRecord>> {
    let mut records = Vec::with_capacity(runs.len());
    for run in runs {
        let rel = format!("transcripts/{}.json", util::file_name_for(&run.queries.test_id));
        util::write_json(&dir.join(&rel), &run.transcript)?;
        let q = &run.queries;
        records.push(QueryRecord {
            test_id: q.test_id.clone(),
            module: q.module.clone(),
            method: q.method.clone(),
            chunk: q.chunk.clone(),
            rounds_used: q.rounds_used,
            transcript_path: rel,
        });
    }
    util::write_json(&dir.join("queries.json"), &records)?;
    Ok(records)
}

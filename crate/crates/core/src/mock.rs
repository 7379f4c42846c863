//! Deterministic offline chat backend.
//!
//! The mock reads the prompt the pipeline produced and answers with reports
//! assembled from fixed templates over features of that prompt: member
//! signatures, comment text and code identifiers. Query-generation answers can
//! be scripted per test id; unscripted tests get queries built from the stack
//! trace and test output.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde_json::json;

use crate::chat::{ChatBackend, ChatMessage, Completion, Role};
use crate::error::{BackendError, Result};
use crate::prompts::{self, section};
use crate::util::{self, words};

/// Scripted protocol responses: test id -> response per round. Round `k`
/// (the number of module details already in the prompt) gets entry `k`, and
/// the last entry repeats once the script runs out.
pub type MockScript = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Default)]
pub struct MockChat {
    script: MockScript,
}

impl MockChat {
    pub fn new() -> Self {
        MockChat::default()
    }

    pub fn with_script(script: MockScript) -> Self {
        MockChat { script }
    }

    pub fn from_script_file(path: &Path) -> Result<Self> {
        Ok(MockChat::with_script(util::read_json(path)?))
    }
}

impl ChatBackend for MockChat {
    fn complete(&self, messages: &[ChatMessage]) -> std::result::Result<Completion, BackendError> {
        let prompt = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| BackendError::Fatal("mock: no user message".into()))?;
        let content = if let Some(body) = section(prompt, prompts::MODULE_TASK_MARKER) {
            module_report(body)
        } else if let Some(body) = section(prompt, prompts::METHOD_TASK_MARKER) {
            method_report(body, section(prompt, "# Module Context").unwrap_or(""))
        } else if prompt.contains(prompts::FAULT_MARKER) {
            self.protocol_answer(prompt)
        } else if let Some(body) = section(prompt, prompts::EXPLAIN_MARKER) {
            explanation(body, prompt)
        } else {
            return Err(BackendError::Fatal("mock: unrecognized prompt".into()));
        };
        Ok(Completion {
            content,
            retries: 0,
        })
    }
}

const STOP: &[&str] = &[
    "public", "private", "protected", "static", "final", "void", "int", "long", "double", "float",
    "boolean", "char", "byte", "short", "new", "return", "if", "else", "for", "while", "do",
    "switch", "case", "break", "continue", "this", "super", "null", "true", "false", "class",
    "interface", "extends", "implements", "throw", "throws", "try", "catch", "finally", "import",
    "package", "instanceof", "var", "the", "a", "an", "of", "to", "and", "or", "in", "is", "it",
    "at", "by", "on", "with", "as", "be", "string", "get", "set",
];

fn content_words(text: &str) -> Vec<String> {
    words(text)
        .into_iter()
        .filter(|w| w.len() > 1 && !w.chars().all(|c| c.is_ascii_digit()) && !STOP.contains(&w.as_str()))
        .collect()
}

/// Most frequent words, ties alphabetical.
fn top_words(text: &str, n: usize) -> Vec<String> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for w in content_words(text) {
        *freq.entry(w).or_default() += 1;
    }
    let mut v: Vec<(String, usize)> = freq.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(w, _)| w).collect()
}

fn unique_words(text: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    content_words(text).into_iter().filter(|w| seen.insert(w.clone())).collect()
}

fn field<'a>(block: &'a str, name: &str) -> Option<&'a str> {
    block
        .lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(": ")))
        .map(str::trim)
}

fn code_block(block: &str) -> &str {
    let Some(start) = block.find("```\n") else {
        return "";
    };
    let body = &block[start + 4..];
    body.find("\n```").map_or(body, |end| &body[..end])
}

fn first_sentence(text: &str) -> String {
    let t = text.trim();
    let end = t.find(". ").map_or(t.len(), |i| i + 1);
    let mut s = t[..end].to_owned();
    if !s.ends_with('.') {
        s.push('.');
    }
    s
}

fn method_name(signature: &str, id: &str) -> String {
    let before = signature.split('(').next().unwrap_or(signature);
    match before.split_whitespace().last() {
        Some(n) if !n.is_empty() => n.to_owned(),
        _ => id.to_owned(),
    }
}

fn phrase(words: &[String]) -> String {
    match words {
        [] => "general processing".into(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

struct MemberView {
    name: String,
    signature: String,
    comment: Option<String>,
    code: String,
}

fn module_report(body: &str) -> String {
    let methods = section(body, "## Methods").unwrap_or("");
    let mut members = Vec::new();
    for block in methods.split("### Method ").skip(1) {
        let id = block.lines().next().unwrap_or("").trim();
        let signature = field(block, "Signature").unwrap_or("").to_owned();
        let comment = field(block, "Developer Comment")
            .filter(|c| *c != prompts::NONE)
            .map(str::to_owned);
        members.push(MemberView {
            name: method_name(&signature, id),
            signature,
            comment,
            code: code_block(block).to_owned(),
        });
    }
    let calls: Vec<(String, String, u64)> = section(body, "## Calls")
        .unwrap_or("")
        .lines()
        .filter_map(|l| {
            let (a, rest) = l.split_once(" -> ")?;
            let (b, count) = rest.rsplit_once(" (count=")?;
            Some((a.to_owned(), b.to_owned(), count.trim_end_matches(')').parse().ok()?))
        })
        .collect();

    let signatures: String = members.iter().map(|m| m.signature.as_str()).collect::<Vec<_>>().join(" ");
    let names: Vec<&str> = members.iter().map(|m| m.name.as_str()).collect();
    let title = format!("Functionality around {}", phrase(&top_words(&names.join(" "), 3)));
    if signatures.is_empty() {
        log::debug!("mock: module without signatures");
    }
    let invocations: u64 = calls.iter().map(|c| c.2).sum();
    let mut summary = format!(
        "The module groups {} methods ({}) that are linked by {} runtime call edges totalling {} invocations.",
        members.len(),
        names.join(", "),
        calls.len(),
        invocations
    );
    let callees: std::collections::HashSet<&str> = calls.iter().map(|c| c.1.as_str()).collect();
    let callers: std::collections::HashSet<&str> = calls.iter().map(|c| c.0.as_str()).collect();
    let entries: Vec<&str> = callers.difference(&callees).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if !entries.is_empty() {
        summary.push_str(&format!(" Control enters through {}.", entries.join(", ")));
    }

    let mut out = format!("TITLE: {title}\nSUMMARY: {summary}\nDETAILED FINDINGS:\n");
    for m in &members {
        let detail = match &m.comment {
            Some(c) => first_sentence(c),
            None => format!("Works with {}.", phrase(&top_words(&m.code, 4))),
        };
        out.push_str(&format!("- {}: {detail}\n", m.name));
    }
    out
}

fn method_report(body: &str, context: &str) -> String {
    let id = field(body, "Method ID").unwrap_or("");
    let signature = field(body, "Signature").unwrap_or("");
    let comment = field(body, "Developer Comment").filter(|c| *c != prompts::NONE);
    let code = code_block(body);
    let name = method_name(signature, id);

    let mut functionality = {
        let ws = words(&name);
        let mut s = ws.join(" ");
        if let Some(first) = s.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        s.push('.');
        s
    };
    if let Some(c) = comment {
        functionality.push(' ');
        functionality.push_str(c.trim());
        if !functionality.ends_with('.') {
            functionality.push('.');
        }
    }
    let key = top_words(code, 5);
    if !key.is_empty() {
        functionality.push_str(&format!(" Key operations involve {}.", phrase(&key)));
    }
    if let Some(title) = field(context, "TITLE") {
        functionality.push_str(&format!(" It runs within the module '{title}'."));
    }

    // drop the signature line, then one chunk per blank-line separated block
    let lines: Vec<&str> = code.lines().collect();
    let body_lines = if lines.len() > 1 { &lines[1..] } else { &lines[..] };
    let mut blocks: Vec<String> = Vec::new();
    let mut cur = String::new();
    for l in body_lines {
        if l.trim().is_empty() {
            if !cur.is_empty() {
                blocks.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push_str(l);
            cur.push('\n');
        }
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    let mut chunks: Vec<String> = blocks
        .iter()
        .map(|b| unique_words(b))
        .filter(|ws| !ws.is_empty())
        .enumerate()
        .map(|(i, ws)| format!("Step {}: handles {}.", i + 1, ws.join(" ")))
        .collect();
    if chunks.is_empty() {
        chunks.push(format!("Step 1: performs {}.", words(&name).join(" ")));
    }

    let mut out = format!("FUNCTIONALITY: {functionality}\n\nDESCRIPTION:\n");
    out.push_str(&chunks.join("\n\n"));
    out.push('\n');
    out
}

impl MockChat {
    fn protocol_answer(&self, prompt: &str) -> String {
        let fault = section(prompt, prompts::FAULT_MARKER).unwrap_or("");
        let test_id = section(fault, "## Test ID").unwrap_or("").trim();
        let round = section(fault, "## Module Details")
            .map_or(0, |d| d.lines().filter(|l| l.starts_with("### Module ")).count());
        if let Some(responses) = self.script.get(test_id) {
            if let Some(r) = responses.get(round).or(responses.last()) {
                return r.clone();
            }
        }

        let trace = section(fault, "## Stack Trace").unwrap_or("");
        let output = section(fault, "## Test Output").unwrap_or("");
        let frames: String = trace
            .lines()
            .filter(|l| {
                let low = l.to_lowercase();
                !low.contains("test") && !low.contains("junit") && !l.trim_start().starts_with("at java.")
            })
            .collect::<Vec<_>>()
            .join(" ");
        let mut focus = unique_words(&format!("{frames} {output}"));
        focus.retain(|w| w != "none" && w != "at" && w != "java");
        if focus.is_empty() {
            focus = unique_words(section(fault, "## Failed Test Code").unwrap_or(test_id));
        }
        let text = focus.join(" ");
        json!({
            "module": format!("functionality involving {text}"),
            "method": text,
            "chunk": text,
        })
        .to_string()
    }
}

fn explanation(body: &str, prompt: &str) -> String {
    let id = field(body, "Method ID").unwrap_or("");
    let rank = field(body, "Rank").unwrap_or("?");
    let score = field(body, "Score").unwrap_or("?");
    let knowledge = section(prompt, "# Method Knowledge").unwrap_or("");
    let queries = section(prompt, "# Suspected Faulty Functionality").unwrap_or("");
    let method_query = field(
        &queries.lines().map(|l| l.trim_start_matches("- ")).collect::<Vec<_>>().join("\n"),
        "method",
    )
    .unwrap_or("")
    .to_owned();
    let mut s = format!("{id} is ranked {rank} with score {score}. {}", first_sentence(knowledge));
    if !method_query.is_empty() {
        s.push_str(&format!(" This matches the suspected faulty functionality \"{method_query}\"."));
    }
    s
}

/// Word overlap helper for tests and diagnostics.
pub fn shared_words(a: &str, b: &str) -> usize {
    let wa: HashMap<String, ()> = content_words(a).into_iter().map(|w| (w, ())).collect();
    unique_words(b).into_iter().filter(|w| wa.contains_key(w)).count()
}

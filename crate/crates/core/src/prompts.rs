//! Prompt templates. The section headings double as markers that the mock
//! backend keys on, so change them together with [`crate::mock`].

use crate::callgraph::MethodRef;
use crate::knowledge::{MethodReport, ModuleReport};

pub const MODULE_SYSTEM: &str = "You are an expert software analyst. You read call graphs \
recorded while a program was running and explain what the code in them does.";

pub const METHOD_SYSTEM: &str = "You are an expert code summarizer. You explain what a method \
does and how it does it, step by step, in plain language.";

pub const QUERY_SYSTEM: &str = "You are a debugging assistant. Given a failing test and \
knowledge about the program under test, you describe the functionality that most likely \
contains the fault.";

pub const EXPLAIN_SYSTEM: &str = "You are a debugging assistant. You explain to a developer \
why a method was ranked as a likely fault location.";

pub const REPORT_REPROMPT: &str = "Your answer did not follow the report structure. Respond \
again with the exact report structure, using the section headings exactly as given.";

pub const PROTOCOL_REPROMPT: &str = "Your answer did not contain a valid JSON object. Respond \
with exactly one JSON object in one of the two formats given under Response Format.";

pub const MODULE_TASK_MARKER: &str = "# Module Under Analysis";
pub const METHOD_TASK_MARKER: &str = "# Method Under Analysis";
pub const FAULT_MARKER: &str = "# Fault Information";
pub const FINAL_MARKER: &str = "# Final Round";
pub const EXPLAIN_MARKER: &str = "# Ranked Method";
pub const NONE: &str = "(none)";

pub fn module_prompt(serialized: &str) -> String {
    format!(
        "# Task\n\
         Below is a functional module: a group of methods that called each other while the \
         program ran, given as method blocks and call edges with invocation counts. Write a \
         comprehensive functionality report for this module.\n\n\
         # Report Structure\n\
         TITLE: one line naming the overall functionality of the module.\n\
         SUMMARY: a paragraph on the module's overall structure and how its methods interact.\n\
         DETAILED FINDINGS: a bulleted list; each bullet explains the behaviour of one important method.\n\n\
         {MODULE_TASK_MARKER}\n{serialized}"
    )
}

const METHOD_EXAMPLE: &str = "\
## Example Input\n\
Signature: int clampIndex(int index, int size)\n\
Developer Comment: Keeps an index inside the valid range.\n\
Method Code:\n\
```\n\
int clampIndex(int index, int size) {\n\
    if (size <= 0) {\n\
        throw new IllegalArgumentException(\"empty\");\n\
    }\n\
\n\
    return Math.max(0, Math.min(index, size - 1));\n\
}\n\
```\n\
Module Context: Collection utilities that bound and normalize positions before element access.\n\n\
## Example Output\n\
FUNCTIONALITY: Clamps a position into the valid index range of a non-empty collection, so that \
callers in the collection utilities never access an element out of bounds.\n\
DESCRIPTION:\n\
Validates the collection size and throws an IllegalArgumentException when the collection is empty.\n\n\
Returns the index limited to the range from zero to the last valid position.\n";

pub fn method_prompt(method: &MethodRef, context: Option<&ModuleReport>) -> String {
    let comment = method.comment.as_deref().filter(|c| !c.trim().is_empty()).unwrap_or(NONE);
    let context = match context {
        Some(r) => render_module_report(r),
        None => NONE.to_owned(),
    };
    format!(
        "# Task\n\
         Describe the key functionality of the method and provide a detailed walkthrough of its \
         workflow. Use the module context to explain the method's role at runtime.\n\n\
         # Report Structure\n\
         FUNCTIONALITY: a detailed description of what the method does and its role within the module context.\n\
         DESCRIPTION: paragraphs separated by blank lines, one per logical block of the method in \
         source order, each explaining what that block does.\n\n\
         # Example\n{METHOD_EXAMPLE}\n\
         {METHOD_TASK_MARKER}\n\
         Method ID: {}\n\
         Signature: {}\n\
         Developer Comment: {comment}\n\
         Method Code:\n```\n{}\n```\n\n\
         # Module Context\n{context}\n",
        method.id,
        method.signature,
        method.code.trim_end(),
    )
}

pub fn render_module_report(r: &ModuleReport) -> String {
    let mut s = format!("TITLE: {}\nSUMMARY: {}\nDETAILED FINDINGS:\n", r.title, r.summary);
    for f in &r.detailed_findings {
        s.push_str("- ");
        s.push_str(f);
        s.push('\n');
    }
    s
}

pub struct FaultView<'a> {
    pub test_id: &'a str,
    pub test_code: &'a str,
    pub test_output: Option<&'a str>,
    pub stack_trace: Option<&'a str>,
    pub module_details: &'a [(String, ModuleReport)],
    pub allow_requests: bool,
    pub final_round: bool,
}

pub fn query_prompt(f: &FaultView<'_>) -> String {
    let mut s = String::from(
        "# Task\n\
         A test case fails. Using the fault information and any module details provided, either \
         identify the potential faulty functionality or request additional information as needed.\n\n",
    );
    s.push_str(FAULT_MARKER);
    s.push('\n');
    s.push_str(&format!("## Test ID\n{}\n\n", f.test_id));
    s.push_str(&format!("## Failed Test Code\n```\n{}\n```\n\n", f.test_code.trim_end()));
    s.push_str(&format!("## Test Output\n{}\n\n", f.test_output.unwrap_or(NONE).trim_end()));
    s.push_str(&format!("## Stack Trace\n{}\n\n", f.stack_trace.unwrap_or(NONE).trim_end()));
    s.push_str("## Module Details\n");
    if f.module_details.is_empty() {
        s.push_str(NONE);
        s.push('\n');
    }
    for (id, report) in f.module_details {
        s.push_str(&format!("### Module {id}\n{}\n", render_module_report(report)));
    }
    s.push_str("\n# Response Format\nRespond with exactly one JSON object.\n");
    if f.allow_requests && !f.final_round {
        s.push_str(
            "If you need more knowledge about a functional module of the program, respond with\n\
             {\"request\": \"<description of the module functionality you need details about>\"}\n\
             Otherwise respond with\n",
        );
    }
    s.push_str(
        "{\"module\": \"<the suspicious functionality at module level>\", \
         \"method\": \"<the suspicious functionality at method level>\", \
         \"chunk\": \"<the suspicious logic inside the method>\"}\n",
    );
    if f.final_round {
        s.push_str(&format!(
            "\n{FINAL_MARKER}\nNo more information can be provided. Respond now with the \
             module, method and chunk fields.\n"
        ));
    }
    s
}

pub fn explain_prompt(
    method_id: &str,
    rank: usize,
    score: f64,
    report: Option<&MethodReport>,
    queries: &[(String, String, String)],
) -> String {
    let mut s = String::from(
        "# Task\nIn two or three sentences, explain why the method below may contain the fault, \
         referring to its functionality and to the suspected faulty functionality.\n\n",
    );
    s.push_str(&format!("{EXPLAIN_MARKER}\nMethod ID: {method_id}\nRank: {rank}\nScore: {score:.6}\n\n"));
    s.push_str("# Method Knowledge\n");
    s.push_str(report.map_or(NONE, |r| r.functionality.as_str()));
    s.push_str("\n\n# Suspected Faulty Functionality\n");
    if queries.is_empty() {
        s.push_str(NONE);
        s.push('\n');
    }
    for (module, method, chunk) in queries {
        s.push_str(&format!("- module: {module}\n- method: {method}\n- chunk: {chunk}\n"));
    }
    s
}

/// Text following `heading` up to the next heading of the same or higher level.
pub fn section<'a>(text: &'a str, heading: &str) -> Option<&'a str> {
    let level = heading.chars().take_while(|&c| c == '#').count();
    let start = text
        .match_indices(heading)
        .find(|(i, _)| {
            (*i == 0 || text.as_bytes()[i - 1] == b'\n')
                && text[i + heading.len()..].starts_with('\n')
        })
        .map(|(i, _)| i + heading.len() + 1)?;
    let body = &text[start..];
    let mut offset = 0;
    let mut in_code = false;
    for line in body.split_inclusive('\n') {
        if line.starts_with("```") {
            in_code = !in_code;
        }
        if !in_code {
            let hashes = line.chars().take_while(|&c| c == '#').count();
            if hashes > 0 && hashes <= level && line[hashes..].starts_with(' ') {
                break;
            }
        }
        offset += line.len();
    }
    Some(body[..offset].trim_end_matches('\n'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_stops_at_same_level() {
        let t = "# A\nx\n## B\ny\n```\n# not a heading\n```\n# C\nz\n";
        assert_eq!(section(t, "# A").unwrap(), "x\n## B\ny\n```\n# not a heading\n```");
        assert_eq!(section(t, "## B").unwrap(), "y\n```\n# not a heading\n```");
        assert_eq!(section(t, "# C").unwrap(), "z");
        assert!(section(t, "# D").is_none());
    }

    #[test]
    fn null_comment_renders_none() {
        let m = MethodRef {
            id: "a.B#c()".into(),
            signature: "void c()".into(),
            file_path: "B.java".into(),
            start_line: 1,
            end_line: 1,
            code: "void c() {}".into(),
            comment: None,
        };
        assert!(method_prompt(&m, None).contains("Developer Comment: (none)"));
    }
}

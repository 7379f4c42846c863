//! The six pipeline commands. Each checks its prerequisites through the
//! manifests, writes its artifacts, then records a manifest of its own.

use std::fs;
use std::path::{Path, PathBuf};

use semfl::callgraph::{build_call_graph, ingest_method_table, parse_call_log, CallGraph};
use semfl::community::{leiden_detect, repair_module_sizes, ModulePartition, ModulesDocument};
use semfl::eval::{aggregate_with, GroundTruth};
use semfl::knowledge::{build_knowledge_base, KnowledgeBase};
use semfl::querygen::{generate_all, load_faults, save_runs};
use semfl::retrieval::{check_pruning, retrieve_all, save_bundles, Indexes};
use semfl::voting::{explain_top_k, score_methods, RankedReport};
use semfl::{util, Error, Result};

use crate::config::RunConfig;
use crate::workspace::{Stage, Workspace};

fn open(config: &RunConfig) -> Result<Workspace> {
    config.validate()?;
    Ok(Workspace::new(&config.workspace))
}

fn load_graph(ws: &Workspace) -> Result<CallGraph> {
    util::read_json(&ws.path("graph.json"))
}

fn remove_dir(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Copies an input file into the workspace, unless it already is that file.
fn import(ws: &Workspace, source: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let target = ws.path(rel);
    if fs::canonicalize(source).ok() == fs::canonicalize(&target).ok() && target.exists() {
        return Ok(());
    }
    util::write_bytes(&target, bytes)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_build_graph(config: &RunConfig, methods: &Path, calls: &Path) -> Result<String> {
    let ws = open(config)?;
    let _lock = ws.lock()?;
    let method_bytes = read_bytes(methods)?;
    let call_bytes = read_bytes(calls)?;
    let table = ingest_method_table(&String::from_utf8_lossy(&method_bytes))?;
    let events = parse_call_log(&String::from_utf8_lossy(&call_bytes))?;
    let (graph, stats) = build_call_graph(&events, &table, config.strictness())?;

    import(&ws, methods, "methods.json", &method_bytes)?;
    import(&ws, calls, "calls.jsonl", &call_bytes)?;
    util::write_json(&ws.path("graph.json"), &graph)?;
    ws.write_manifest(Stage::BuildGraph, config, &["methods.json", "calls.jsonl"])?;
    Ok(format!(
        "graph: {} methods, {} edges, {} invocations ({} skipped)",
        graph.node_count(),
        graph.edges().count(),
        stats.ingested,
        stats.skipped
    ))
}

pub fn cmd_detect_modules(config: &RunConfig) -> Result<String> {
    let ws = open(config)?;
    let _lock = ws.lock()?;
    ws.require_fresh(Stage::BuildGraph, Some(config))?;
    let graph = load_graph(&ws)?;
    let initial = leiden_detect(&graph, config.max_size, config.seed)?;
    let (partition, steps) = repair_module_sizes(&graph, &initial, config.min_size, config.max_size)?;
    for step in steps.iter().filter(|s| s.over_cap) {
        log::warn!(
            "merged a module of {} methods past the size cap; no neighbour had room",
            step.source.len()
        );
    }
    let doc = partition.to_document(config.seed, config.min_size, config.max_size);
    util::write_json(&ws.path("modules.json"), &doc)?;
    ws.write_manifest(Stage::DetectModules, config, &["graph.json"])?;
    Ok(format!(
        "modules: {} (from {} before repair, {} merges), Q = {:.6}",
        partition.len(),
        initial.len(),
        steps.len(),
        partition.quality()
    ))
}

pub fn cmd_extract_knowledge(config: &RunConfig) -> Result<String> {
    let ws = open(config)?;
    let _lock = ws.lock()?;
    ws.require_fresh(Stage::DetectModules, Some(config))?;
    let graph = load_graph(&ws)?;
    let methods = ingest_method_table(&util::read_text(&ws.path("methods.json"))?)?;
    let doc: ModulesDocument = util::read_json(&ws.path("modules.json"))?;
    let partition = ModulePartition::from_document(&graph.symmetrized(), &doc)?;

    // Reports on disk are reused only if they came from the same inputs and
    // settings; otherwise start over.
    let inputs = ["graph.json", "modules.json", "methods.json"];
    let fingerprint = util::sha256_hex(
        serde_json::to_string(&(ws.hash_inputs(&inputs)?, Stage::ExtractKnowledge.config_hash(config)?))?
            .as_bytes(),
    );
    let kb_dir = ws.path("kb");
    let marker = kb_dir.join(".run");
    if fs::read_to_string(&marker).ok().as_deref() != Some(fingerprint.as_str()) {
        remove_dir(&kb_dir)?;
        util::write_bytes(&marker, fingerprint.as_bytes())?;
    }

    let chat = config.chat()?;
    let (kb, stats) = build_knowledge_base(
        chat.as_ref(),
        &graph,
        &partition,
        &methods,
        &config.knowledge_options(),
        Some(&kb_dir),
    )?;
    ws.write_manifest(Stage::ExtractKnowledge, config, &inputs)?;
    Ok(format!(
        "knowledge: {} modules, {} methods, {} chunks ({} reports reused, {} calls, {} re-prompts)",
        kb.module_reports.len(),
        kb.method_reports.len(),
        kb.chunk_count(),
        stats.reused,
        stats.exchanges.calls,
        stats.exchanges.reprompts
    ))
}

pub fn cmd_index(config: &RunConfig) -> Result<String> {
    let ws = open(config)?;
    let _lock = ws.lock()?;
    ws.require_fresh(Stage::ExtractKnowledge, Some(config))?;
    let kb = KnowledgeBase::load(&ws.path("kb"))?;
    let embedder = config.embedder()?;
    let indexes = Indexes::build(embedder.as_ref(), &kb)?;
    indexes.save(&ws.path("idx"))?;
    ws.write_manifest(Stage::Index, config, &ws.files_under("kb")?)?;
    Ok(format!(
        "index: {} modules, {} methods, {} chunks, dimension {}",
        indexes.modules.len(),
        indexes.methods.len(),
        indexes.chunks.len(),
        indexes.methods.dimension()
    ))
}

pub fn cmd_localize(config: &RunConfig, tests: Option<&Path>) -> Result<String> {
    let ws = open(config)?;
    let _lock = ws.lock()?;
    ws.require_fresh(Stage::Index, Some(config))?;
    match tests {
        Some(path) => {
            let bytes = read_bytes(path)?;
            load_faults(path)?;
            import(&ws, path, "tests.json", &bytes)?;
        }
        None if !ws.path("tests.json").exists() => {
            return Err(Error::Argument("no failed tests given and none in the workspace".into()));
        }
        None => {}
    }
    let faults = load_faults(&ws.path("tests.json"))?;
    let kb = KnowledgeBase::load(&ws.path("kb"))?;
    let indexes = Indexes::load(&ws.path("idx"))?;
    let chat = config.chat()?;
    let embedder = config.embedder()?;

    let runs = generate_all(
        chat.as_ref(),
        faults,
        &indexes.modules,
        &kb,
        &config.query_options(),
        embedder.as_ref(),
    )?;
    remove_dir(&ws.path("transcripts"))?;
    save_runs(ws.root(), &runs)?;
    let queries: Vec<_> = runs.into_iter().map(|r| r.queries).collect();

    let bundles = retrieve_all(&queries, &indexes, &kb, &config.retrieval_options(), embedder.as_ref())?;
    for b in &bundles {
        check_pruning(b, &kb)?;
    }
    remove_dir(&ws.path("retrieval"))?;
    save_bundles(&ws.path("retrieval"), &bundles)?;

    let mut report = score_methods(&config.bug_id(), &bundles, &kb)?;
    if config.explain_top_k > 0 {
        report = explain_top_k(chat.as_ref(), report, &kb, config.explain_top_k, &queries);
    }
    util::write_json(&ws.path("report.json"), &report)?;

    let mut inputs = vec!["tests.json".to_owned()];
    inputs.extend(ws.files_under("idx")?);
    inputs.extend(ws.files_under("kb")?);
    ws.write_manifest(Stage::Localize, config, &inputs)?;
    let top = report
        .entries
        .first()
        .map_or("nothing".to_owned(), |e| format!("{} ({:.4})", e.method_id, e.score));
    Ok(format!(
        "localize: {} failed tests, {} ranked methods, top {top}",
        queries.len(),
        report.entries.len()
    ))
}

/// Evaluates the reports in `report_dirs` (default: the configured
/// workspace) and writes `eval.json` and `eval.csv` into the workspace.
pub fn cmd_evaluate(config: &RunConfig, report_dirs: &[PathBuf], truth: &Path) -> Result<String> {
    let ws = open(config)?;
    let _lock = ws.lock()?;
    let dirs: Vec<PathBuf> = if report_dirs.is_empty() {
        vec![config.workspace.clone()]
    } else {
        report_dirs.to_vec()
    };
    let truth_bytes = read_bytes(truth)?;
    let ground = GroundTruth::load(truth)?;

    let mut reports: Vec<RankedReport> = Vec::with_capacity(dirs.len());
    let mut external = Vec::new();
    for dir in &dirs {
        let other = Workspace::new(dir);
        let same = fs::canonicalize(dir).ok() == fs::canonicalize(ws.root()).ok();
        other.require_fresh(Stage::Localize, same.then_some(config))?;
        reports.push(util::read_json(&other.path("report.json"))?);
        if !same {
            let p = fs::canonicalize(other.path("report.json")).map_err(|e| Error::io(dir, e))?;
            external.push(p.to_string_lossy().into_owned());
        }
    }
    let result = aggregate_with(&reports, &ground, config.recall_set())?;

    import(&ws, truth, "truth.json", &truth_bytes)?;
    util::write_json(&ws.path("eval.json"), &result)?;
    util::write_bytes(&ws.path("eval.csv"), result.to_csv().as_bytes())?;
    let mut inputs = vec!["truth.json".to_owned()];
    if ws.path("report.json").exists() && external.len() < dirs.len() {
        inputs.push("report.json".into());
    }
    inputs.extend(external);
    ws.write_manifest(Stage::Evaluate, config, &inputs)?;
    let t = &result.total;
    Ok(format!(
        "evaluate: {} bugs, top-1 {}, top-5 {}, top-10 {}, MFR {:.2}, MAR {:.2}",
        t.bugs, t.top1, t.top5, t.top10, t.mfr, t.mar
    ))
}

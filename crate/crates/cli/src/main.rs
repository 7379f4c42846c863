use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semfl::Result;
use semfl_cli::commands;
use semfl_cli::config::{ChatKind, EmbedderKind, RunConfig};
use semfl_cli::exit_code;

#[derive(Parser)]
#[command(name = "semfl", version, about = "Localize faulty methods by searching a knowledge base built from the failing run")]
struct Cli {
    /// Flat TOML file of settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dynamic call graph from a method table and invocation log.
    BuildGraph {
        #[arg(long)]
        methods: PathBuf,
        #[arg(long)]
        calls: PathBuf,
    },
    /// Partition the call graph into functional modules.
    DetectModules,
    /// Ask the chat backend for module, method and chunk knowledge.
    ExtractKnowledge,
    /// Embed the knowledge base.
    Index,
    /// Generate queries for the failed tests and rank suspicious methods.
    Localize {
        /// Failed tests (JSON array); defaults to the workspace copy.
        #[arg(long)]
        tests: Option<PathBuf>,
    },
    /// Score ranked reports against known buggy methods.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        /// Workspaces holding report.json; defaults to --workspace.
        reports: Vec<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[arg(long, global = true)]
    bug_id: Option<String>,
    #[arg(long, global = true, value_enum)]
    chat: Option<ChatKind>,
    #[arg(long, global = true)]
    chat_base_url: Option<String>,
    #[arg(long, global = true)]
    chat_model: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    chat_api_key_env: Option<String>,
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    embedder: Option<EmbedderKind>,
    #[arg(long, global = true)]
    embed_base_url: Option<String>,
    #[arg(long, global = true)]
    embed_model: Option<String>,
    #[arg(long, global = true)]
    embed_dimension: Option<usize>,
    #[arg(long, global = true)]
    embed_api_key_env: Option<String>,
    #[arg(long, global = true)]
    min_size: Option<usize>,
    #[arg(long, global = true)]
    max_size: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<usize>,
    #[arg(long, global = true)]
    module_lambda: Option<usize>,
    #[arg(long, global = true)]
    method_lambda: Option<usize>,
    #[arg(long, global = true)]
    chunk_lambda: Option<usize>,
    #[arg(long, global = true)]
    max_rounds: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    char_budget: Option<usize>,
    #[arg(long, global = true)]
    explain_top_k: Option<usize>,
    #[arg(long, global = true)]
    recall_window: Option<usize>,
    #[arg(long, global = true)]
    retry_attempts: Option<u32>,
    #[arg(long, global = true)]
    retry_backoff_ms: Option<u64>,
    #[arg(long, global = true)]
    no_module_context: bool,
    #[arg(long, global = true)]
    no_module_retrieval: bool,
    #[arg(long, global = true)]
    no_chunk_retrieval: bool,
    #[arg(long, global = true)]
    strict_graph: bool,
}

macro_rules! apply {
    ($cfg:ident, $o:ident; $($field:ident),*) => {
        $(if let Some(v) = $o.$field { $cfg.$field = v; })*
    };
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) {
        let o = self;
        apply!(cfg, o; workspace, temperature, chat_api_key_env, embed_dimension, embed_api_key_env,
            min_size, max_size, lambda, max_rounds, seed, workers, char_budget, explain_top_k,
            retry_attempts, retry_backoff_ms);
        if let Some(k) = o.chat {
            cfg.chat_kind = k;
        }
        if let Some(k) = o.embedder {
            cfg.embedder_kind = k;
        }
        for (dst, src) in [
            (&mut cfg.bug_id, o.bug_id),
            (&mut cfg.chat_base_url, o.chat_base_url),
            (&mut cfg.chat_model, o.chat_model),
            (&mut cfg.embed_base_url, o.embed_base_url),
            (&mut cfg.embed_model, o.embed_model),
        ] {
            if src.is_some() {
                *dst = src;
            }
        }
        if o.mock_script.is_some() {
            cfg.mock_script = o.mock_script;
        }
        for (dst, src) in [
            (&mut cfg.module_lambda, o.module_lambda),
            (&mut cfg.method_lambda, o.method_lambda),
            (&mut cfg.chunk_lambda, o.chunk_lambda),
            (&mut cfg.recall_window, o.recall_window),
        ] {
            if src.is_some() {
                *dst = src;
            }
        }
        cfg.no_module_context |= o.no_module_context;
        cfg.no_module_retrieval |= o.no_module_retrieval;
        cfg.no_chunk_retrieval |= o.no_chunk_retrieval;
        cfg.strict_graph |= o.strict_graph;
    }
}

fn run(cli: Cli) -> Result<String> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut config);
    match cli.command {
        Command::BuildGraph { methods, calls } => commands::cmd_build_graph(&config, &methods, &calls),
        Command::DetectModules => commands::cmd_detect_modules(&config),
        Command::ExtractKnowledge => commands::cmd_extract_knowledge(&config),
        Command::Index => commands::cmd_index(&config),
        Command::Localize { tests } => commands::cmd_localize(&config, tests.as_deref()),
        Command::Evaluate { truth, reports } => commands::cmd_evaluate(&config, &reports, &truth),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

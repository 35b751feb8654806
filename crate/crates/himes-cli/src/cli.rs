//! Subcommands: `ingest`, `datagen`, `eval`, `rar`, `reward`, `serve`.
//!
//! Exit codes: 0 success, 1 validation error, 2 transport error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use himes_core::clients::http::{HttpChatClient, HttpClientConfig};
use himes_core::clients::stub::{
    HashedBagEmbedder, SimAgentClient, SimUserClient, StubJudge, StubResponder,
    TaxonomyOverlapClassifier,
};
use himes_core::clients::{ChatClient, EmbedderClient};
use himes_core::datagen::{
    build_blueprints, emit_rewrite_samples, score_transcript, select_high_quality,
    simulate_dialogue, SourceRecord,
};
use himes_core::eval::{
    lambda_sweep, load_test_set, run_ablation, stub_rewriter_for, EvalHarness,
};
use himes_core::kb::KnowledgeBase;
use himes_core::pipeline::{AccountMeta, PipelineConfig};
use himes_core::reward::{
    group_relative_advantages, score_rollout_with_mode, HitMode, RewardWeights, RolloutSample,
};
use himes_core::store::repeated_asking_rate;
use himes_core::taxonomy::TopicTaxonomy;

use crate::config::{ClientMode, Overrides, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "himes",
    about = "Memory-augmented retrieval middleware: ingest, datagen, eval, rar, reward, serve",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ClientArgs {
    /// Client backend for LLM/embedder calls.
    #[arg(long, default_value = "stub")]
    clients: ClientMode,
    /// Chat completion endpoint (http mode).
    #[arg(long)]
    chat_endpoint: Option<String>,
    /// Embedding endpoint (http mode).
    #[arg(long)]
    embed_endpoint: Option<String>,
    /// Embedding dimension.
    #[arg(long, default_value_t = 256)]
    embed_dim: usize,
    /// Bearer token for upstream clients.
    #[arg(long)]
    client_auth_token: Option<String>,
    /// Per-call timeout in seconds.
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

impl ClientArgs {
    fn http_config(&self, endpoint: &str) -> HttpClientConfig {
        let mut config = HttpClientConfig::new(endpoint);
        config.auth_token = self.client_auth_token.clone();
        config.timeout = std::time::Duration::from_secs(self.timeout_secs);
        config
    }

    fn embedder(&self) -> anyhow::Result<Arc<dyn EmbedderClient>> {
        match self.clients {
            ClientMode::Stub => Ok(Arc::new(HashedBagEmbedder::new(self.embed_dim))),
            ClientMode::Http => {
                let endpoint = self
                    .embed_endpoint
                    .as_deref()
                    .context("--embed-endpoint is required with --clients http")?;
                Ok(Arc::new(himes_core::clients::http::HttpEmbedderClient::new(
                    self.http_config(endpoint),
                    "embedder",
                    self.embed_dim,
                )?))
            }
        }
    }

    fn chat(&self, role: &str) -> anyhow::Result<Option<Arc<dyn ChatClient>>> {
        match self.clients {
            ClientMode::Stub => Ok(None),
            ClientMode::Http => {
                let endpoint = self
                    .chat_endpoint
                    .as_deref()
                    .context("--chat-endpoint is required with --clients http")?;
                Ok(Some(Arc::new(HttpChatClient::new(
                    self.http_config(endpoint),
                    role,
                )?)))
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Embed a knowledge-base JSONL corpus, refreshing the sidecar cache.
    Ingest {
        /// Knowledge base JSONL ({doc_id, title, body} per line).
        #[arg(long)]
        kb: PathBuf,
        /// Skip the sidecar embedding cache.
        #[arg(long)]
        no_cache: bool,
        #[command(flatten)]
        clients: ClientArgs,
    },
    /// Generate multi-turn dialogue transcripts and rewrite samples.
    Datagen {
        /// Source records JSONL ({user_persona, agent_persona, core_question}).
        #[arg(long)]
        sources: PathBuf,
        /// Output directory for transcripts.jsonl and samples.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        max_turns: usize,
        /// Stub user flags the question solved on this turn number.
        #[arg(long, default_value_t = 3)]
        stub_solve_turn: usize,
        /// Judge transcripts and keep only the top quartile.
        #[arg(long)]
        quality_filter: bool,
        #[command(flatten)]
        clients: ClientArgs,
    },
    /// Run the ablation grid over a test set and emit CSV/JSON reports.
    Eval {
        /// Test set JSONL ({history, query, timestamp, gold_doc_id?, annotated_rewrite?, ...}).
        #[arg(long)]
        testset: PathBuf,
        /// Knowledge base JSONL.
        #[arg(long)]
        kb: PathBuf,
        /// Output directory for report.csv / report.json.
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated row labels: native,history,stm,ltm,full.
        #[arg(long, default_value = "native,history,stm,ltm,full")]
        grid: String,
        /// Archive per-row pipeline traces next to the reports.
        #[arg(long)]
        traces: bool,
        /// Comma-separated lambda values; adds a reward-fusion sweep
        /// (samples then need reference_answer and annotated_rewrite).
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        clients: ClientArgs,
    },
    /// Compute the Repeated Asking Rate over session logs.
    Rar {
        /// Sessions JSONL ({user_id, queries} per line, in chronological order).
        #[arg(long)]
        sessions: PathBuf,
        /// Similarity threshold for counting a repeat.
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[command(flatten)]
        clients: ClientArgs,
    },
    /// Score rollouts: rollout JSONL in, reward-breakdown JSONL out.
    Reward {
        /// Rollout JSONL (RolloutSample per line).
        #[arg(long)]
        rollouts: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Token-coverage threshold of the hit component.
        #[arg(long, default_value_t = 0.8)]
        hit_threshold: f64,
        /// Require verbatim containment for hits instead of token coverage.
        #[arg(long)]
        substring_hit: bool,
        /// Also emit per-rollout group-relative advantages over the fused
        /// reward (rollout count must be divisible by this).
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Start the HTTP service.
    Serve {
        /// TOML config file (flags and HIMES_* env vars override it).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Static bearer token required on all endpoints except /v1/health.
        #[arg(long)]
        auth_token: Option<String>,
        #[command(flatten)]
        clients: ClientArgs,
    },
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    fn transportish(e: &himes_core::Error) -> bool {
        match e {
            himes_core::Error::Transport { .. } => true,
            himes_core::Error::Stage { source, .. } => transportish(source),
            _ => false,
        }
    }
    match e.downcast_ref::<himes_core::Error>() {
        Some(core) if transportish(core) => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest { kb, no_cache, clients } => cmd_ingest(&kb, !no_cache, &clients),
        Command::Datagen {
            sources,
            out_dir,
            seed,
            max_turns,
            stub_solve_turn,
            quality_filter,
            clients,
        } => cmd_datagen(&sources, &out_dir, seed, max_turns, stub_solve_turn, quality_filter, &clients),
        Command::Eval {
            testset,
            kb,
            out_dir,
            grid,
            traces,
            lambdas,
            seed,
            clients,
        } => cmd_eval(&testset, &kb, &out_dir, &grid, traces, lambdas.as_deref(), seed, &clients),
        Command::Rar { sessions, tau, clients } => cmd_rar(&sessions, tau, &clients),
        Command::Reward {
            rollouts,
            out,
            alpha,
            beta,
            lambda,
            hit_threshold,
            substring_hit,
            group_size,
        } => cmd_reward(&rollouts, out.as_deref(), alpha, beta, lambda, hit_threshold, substring_hit, group_size),
        Command::Serve {
            config,
            listen,
            store,
            kb,
            taxonomy,
            auth_token,
            clients,
        } => cmd_serve(config.as_deref(), listen, store, kb, taxonomy, auth_token, &clients),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let content = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    for (line_no, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), line_no + 1))?;
        records.push(record);
    }
    Ok(records)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_ingest(kb_path: &Path, cache: bool, clients: &ClientArgs) -> anyhow::Result<()> {
    let embedder = clients.embedder()?;
    let kb = KnowledgeBase::load(kb_path, &*embedder, cache)?;
    println!(
        "{}",
        serde_json::json!({
            "documents": kb.len(),
            "embedder": kb.embedder_identity(),
            "cache": cache,
        })
    );
    Ok(())
}

fn cmd_datagen(
    sources_path: &Path,
    out_dir: &Path,
    seed: u64,
    max_turns: usize,
    stub_solve_turn: usize,
    quality_filter: bool,
    clients: &ClientArgs,
) -> anyhow::Result<()> {
    let sources: Vec<SourceRecord> = read_jsonl(sources_path)?;
    if sources.is_empty() {
        bail!("no source records in {}", sources_path.display());
    }
    std::fs::create_dir_all(out_dir)?;

    let http_chat = clients.chat("datagen")?;
    let mut transcripts = Vec::new();
    for source in &sources {
        for blueprint in build_blueprints(source, seed)? {
            let transcript = match &http_chat {
                Some(chat) => simulate_dialogue(&blueprint, &**chat, &**chat, max_turns)?,
                None => {
                    let user = SimUserClient::new(Some(stub_solve_turn));
                    let agent = SimAgentClient::new(None);
                    simulate_dialogue(&blueprint, &user, &agent, max_turns)?
                }
            };
            transcripts.push(transcript);
        }
    }

    let kept: Vec<usize> = if quality_filter {
        let judge: Arc<dyn ChatClient> = match &http_chat {
            Some(chat) => chat.clone(),
            None => Arc::new(StubJudge::new(seed)),
        };
        let mut scores = Vec::with_capacity(transcripts.len());
        for transcript in &transcripts {
            scores.push(score_transcript(transcript, &*judge)?.unwrap_or(0.0));
        }
        select_high_quality(&scores, 0.75)
    } else {
        (0..transcripts.len()).collect()
    };

    let annotator = http_chat.as_deref();
    let mut samples = Vec::new();
    for &index in &kept {
        if transcripts[index].turns.len() >= 2 {
            samples.extend(emit_rewrite_samples(&transcripts[index], annotator)?);
        }
    }

    write_jsonl(&out_dir.join("transcripts.jsonl"), &transcripts)?;
    let kept_transcripts: Vec<_> = kept.iter().map(|&i| transcripts[i].clone()).collect();
    if quality_filter {
        write_jsonl(&out_dir.join("transcripts_high_quality.jsonl"), &kept_transcripts)?;
    }
    write_jsonl(&out_dir.join("samples.jsonl"), &samples)?;
    println!(
        "{}",
        serde_json::json!({
            "sources": sources.len(),
            "blueprints": sources.len() * 4,
            "transcripts": transcripts.len(),
            "kept": kept.len(),
            "samples": samples.len(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    testset: &Path,
    kb_path: &Path,
    out_dir: &Path,
    grid_spec: &str,
    archive_traces: bool,
    lambdas: Option<&str>,
    seed: u64,
    clients: &ClientArgs,
) -> anyhow::Result<()> {
    let samples = load_test_set(testset)?;
    if samples.is_empty() {
        bail!("test set {} is empty", testset.display());
    }
    let taxonomy = TopicTaxonomy::shipped_default();
    let embedder = clients.embedder()?;
    let kb = KnowledgeBase::load(kb_path, &*embedder, false)?;

    let http_chat = clients.chat("eval")?;
    let stub_rewriter;
    let stub_responder;
    let stub_judge;
    let (rewriter, responder, judge): (&dyn ChatClient, &dyn ChatClient, &dyn ChatClient) =
        match &http_chat {
            Some(chat) => (&**chat, &**chat, &**chat),
            None => {
                stub_rewriter = stub_rewriter_for(&samples);
                stub_responder = StubResponder::new(seed);
                stub_judge = StubJudge::new(seed);
                (&stub_rewriter, &stub_responder, &stub_judge)
            }
        };
    let classifier = TaxonomyOverlapClassifier::new(&taxonomy);

    let harness = EvalHarness {
        rewriter,
        responder,
        judge,
        embedder: &*embedder,
        classifier: &classifier,
        kb: &kb,
        taxonomy: taxonomy.clone(),
        account: AccountMeta {
            biz_id: "eval".into(),
            agent: "evaluation account".into(),
        },
        meta_prompt: String::new(),
        comments: "(none)".into(),
        seed,
    };

    let grid = parse_grid(grid_spec)?;
    std::fs::create_dir_all(out_dir)?;
    let trace_dir = archive_traces.then(|| out_dir.join("traces"));
    let report = run_ablation(&samples, &grid, &harness, trace_dir.as_deref())?;
    std::fs::write(out_dir.join("report.json"), report.to_json()?)?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv()?)?;

    if let Some(spec) = lambdas {
        let values: Vec<f64> = spec
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad lambda '{v}'")))
            .collect::<anyhow::Result<_>>()?;
        let rows = lambda_sweep(&samples, &values, &PipelineConfig::stm_rag(), &harness)?;
        std::fs::write(
            out_dir.join("lambda_sweep.json"),
            serde_json::to_string_pretty(&rows)?,
        )?;
    }

    println!(
        "{}",
        serde_json::json!({
            "rows": report.rows.len(),
            "n_samples": samples.len(),
            "out_dir": out_dir.display().to_string(),
        })
    );
    Ok(())
}

fn parse_grid(spec: &str) -> anyhow::Result<Vec<(String, PipelineConfig)>> {
    let mut grid = Vec::new();
    for label in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let config = match label {
            "native" => PipelineConfig::native_rag(),
            "history" => PipelineConfig::native_rag_with_history(),
            "stm" => PipelineConfig::stm_rag(),
            "ltm" => PipelineConfig::ltm_rag(),
            "full" => PipelineConfig::full(),
            other => bail!("unknown grid label '{other}' (native|history|stm|ltm|full)"),
        };
        grid.push((label.to_string(), config));
    }
    if grid.is_empty() {
        bail!("empty --grid");
    }
    Ok(grid)
}

#[derive(Deserialize)]
struct SessionRecord {
    user_id: String,
    queries: Vec<String>,
}

fn cmd_rar(sessions_path: &Path, tau: f64, clients: &ClientArgs) -> anyhow::Result<()> {
    let records: Vec<SessionRecord> = read_jsonl(sessions_path)?;
    let sessions: Vec<(String, Vec<String>)> = records
        .into_iter()
        .map(|r| (r.user_id, r.queries))
        .collect();
    let embedder = clients.embedder()?;
    let rar = repeated_asking_rate(&sessions, &*embedder, tau)?;
    println!(
        "{}",
        serde_json::json!({
            "rar": rar,
            "tau": tau,
            "sessions": sessions.len(),
            "queries": sessions.iter().map(|(_, q)| q.len()).sum::<usize>(),
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct BreakdownLine {
    #[serde(flatten)]
    breakdown: himes_core::reward::RewardBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    advantage: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_reward(
    rollouts_path: &Path,
    out: Option<&Path>,
    alpha: f64,
    beta: f64,
    lambda: f64,
    hit_threshold: f64,
    substring_hit: bool,
    group_size: Option<usize>,
) -> anyhow::Result<()> {
    let rollouts: Vec<RolloutSample> = read_jsonl(rollouts_path)?;
    if rollouts.is_empty() {
        bail!("no rollouts in {}", rollouts_path.display());
    }
    let weights = RewardWeights { alpha, beta, lambda };
    let hit_mode = if substring_hit {
        HitMode::Substring
    } else {
        HitMode::Coverage {
            threshold: hit_threshold,
        }
    };
    let mut breakdowns = Vec::with_capacity(rollouts.len());
    for (index, rollout) in rollouts.iter().enumerate() {
        let breakdown = score_rollout_with_mode(rollout, &weights, &hit_mode)
            .with_context(|| format!("rollout {} (line {})", index, index + 1))?;
        breakdowns.push(breakdown);
    }
    let advantages = match group_size {
        Some(g) => {
            let fused: Vec<f64> = breakdowns.iter().map(|b| b.fused).collect();
            Some(group_relative_advantages(&fused, g)?)
        }
        None => None,
    };
    let lines: Vec<BreakdownLine> = breakdowns
        .into_iter()
        .enumerate()
        .map(|(i, breakdown)| BreakdownLine {
            breakdown,
            advantage: advantages.as_ref().map(|a| a[i]),
        })
        .collect();
    match out {
        Some(path) => write_jsonl(path, &lines)?,
        None => {
            for line in &lines {
                println!("{}", serde_json::to_string(line)?);
            }
        }
    }
    Ok(())
}

fn cmd_serve(
    config_path: Option<&Path>,
    listen: Option<String>,
    store: Option<PathBuf>,
    kb: Option<PathBuf>,
    taxonomy: Option<PathBuf>,
    auth_token: Option<String>,
    clients: &ClientArgs,
) -> anyhow::Result<()> {
    let config_path = config_path
        .map(PathBuf::from)
        .or_else(|| std::env::var("HIMES_CONFIG").ok().map(PathBuf::from));
    let flags = Overrides {
        listen,
        store_dir: store,
        kb_path: kb,
        taxonomy_path: taxonomy,
        auth_token,
        client_mode: Some(clients.clients),
        chat_endpoint: clients.chat_endpoint.clone(),
        embed_endpoint: clients.embed_endpoint.clone(),
        embed_dim: Some(clients.embed_dim),
    };
    let config = ServiceConfig::resolve(config_path.as_deref(), &flags)?;
    // Clients (including blocking HTTP handles) must be built before the
    // async runtime starts.
    let state = Arc::new(crate::service::build_state(&config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::service::serve(state, &config.listen))
}

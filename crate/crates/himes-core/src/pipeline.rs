//! End-to-end answer pipeline: short-term rewrite, knowledge-base retrieval,
//! long-term recall, attention rerank, context budgeting, prompt assembly,
//! and the black-box response — with switches that isolate each stage for
//! ablation runs.

use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clients::{ChatClient, ClassifierClient, EmbedderClient};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::prompts;
use crate::rerank::{
    context_budget, rerank_top_k, ChunkPolicy, DocumentChunk, RetrievedDocument,
    ScoreAggregation, ScoredChunk,
};
use crate::reward::RewardWeights;
use crate::store::{classify_query, MemoryStore};
use crate::taxonomy::PartitionKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

impl DialogueTurn {
    pub fn new(role: Role, text: impl Into<String>, timestamp: DateTime<Utc>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("dialogue turn text must be non-empty".into()));
        }
        Ok(DialogueTurn {
            role,
            text,
            timestamp,
        })
    }
}

/// Ordered dialogue turns with chronologically non-decreasing timestamps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueHistory {
    turns: Vec<DialogueTurn>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        DialogueHistory::default()
    }

    pub fn from_turns(turns: Vec<DialogueTurn>) -> Result<Self> {
        let mut history = DialogueHistory::new();
        for turn in turns {
            history.push(turn)?;
        }
        Ok(history)
    }

    pub fn push(&mut self, turn: DialogueTurn) -> Result<()> {
        if let Some(last) = self.turns.last() {
            if turn.timestamp < last.timestamp {
                return Err(Error::InvalidArgument(
                    "dialogue turns must have non-decreasing timestamps".into(),
                ));
            }
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn last_n(&self, n: usize) -> &[DialogueTurn] {
        &self.turns[self.turns.len().saturating_sub(n)..]
    }

    /// `role: text` lines, or the explicit empty marker.
    pub fn rendered(&self) -> String {
        prompts::render_history(self.turns.iter().map(|t| (t.role.as_str(), t.text.as_str())))
    }
}

/// Account identity slotted into the rewrite prompt.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccountMeta {
    pub biz_id: String,
    /// Account name and specialized domains, as one display string.
    pub agent: String,
}

/// Stage switches and tuning for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Rewrite the query from dialogue history before retrieval.
    pub stm_enabled: bool,
    /// Recall historical queries and rerank chunks with them.
    pub ltm_enabled: bool,
    /// With the rewriter off, concatenate recent history into the retrieval
    /// string (the long-context baseline).
    pub include_history_in_retrieval: bool,
    /// Turns concatenated by `include_history_in_retrieval`.
    pub history_window: usize,
    /// Historical queries recalled for the rerank.
    pub top_n_history: usize,
    /// Golden chunks kept by the rerank.
    pub top_k_chunks: usize,
    /// Documents returned by first-stage retrieval.
    pub top_r_docs: usize,
    pub chunk_policy: ChunkPolicy,
    /// Character budget for assembled reference content.
    pub context_budget_chars: usize,
    pub aggregation: ScoreAggregation,
    /// Store the rewritten query instead of the user's original utterance.
    pub store_rewritten_query: bool,
    pub reward_weights: RewardWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stm_enabled: true,
            ltm_enabled: true,
            include_history_in_retrieval: false,
            history_window: 6,
            top_n_history: 10,
            top_k_chunks: 5,
            top_r_docs: 5,
            chunk_policy: ChunkPolicy::default(),
            context_budget_chars: 2000,
            aggregation: ScoreAggregation::Mean,
            store_rewritten_query: false,
            reward_weights: RewardWeights::default(),
        }
    }
}

impl PipelineConfig {
    /// Plain retrieval on the raw query; no memory stages.
    pub fn native_rag() -> Self {
        PipelineConfig {
            stm_enabled: false,
            ltm_enabled: false,
            include_history_in_retrieval: false,
            ..PipelineConfig::default()
        }
    }

    /// Long-context baseline: recent history concatenated into the
    /// retrieval string, no memory stages.
    pub fn native_rag_with_history() -> Self {
        PipelineConfig {
            include_history_in_retrieval: true,
            ..PipelineConfig::native_rag()
        }
    }

    /// Rewriter on, long-term memory off.
    pub fn stm_rag() -> Self {
        PipelineConfig {
            stm_enabled: true,
            ltm_enabled: false,
            include_history_in_retrieval: false,
            ..PipelineConfig::default()
        }
    }

    /// Long-term memory on, rewriter off (history-concatenation retrieval).
    pub fn ltm_rag() -> Self {
        PipelineConfig {
            stm_enabled: false,
            ltm_enabled: true,
            include_history_in_retrieval: true,
            ..PipelineConfig::default()
        }
    }

    /// Both memory modules on.
    pub fn full() -> Self {
        PipelineConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.chunk_policy.validate()?;
        self.reward_weights.validate()?;
        for (name, value) in [
            ("top_n_history", self.top_n_history),
            ("top_k_chunks", self.top_k_chunks),
            ("top_r_docs", self.top_r_docs),
            ("context_budget_chars", self.context_budget_chars),
        ] {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenChunkRef {
    pub doc_id: String,
    pub chunk_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

/// Complete record of one answer. Everything except `stage_millis` is a
/// deterministic function of the inputs under deterministic clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
    pub original_query: String,
    pub rewritten_query: Option<String>,
    pub retrieval_query: String,
    pub retrieved_doc_ids: Vec<String>,
    pub recalled_record_ids: Vec<u64>,
    pub golden_chunks: Vec<GoldenChunkRef>,
    pub no_memory_fallback: bool,
    pub assembled_prompt: String,
    pub response: String,
    pub warnings: Vec<String>,
    pub stage_millis: Vec<StageTiming>,
}

impl PipelineTrace {
    fn new(query: &str) -> Self {
        PipelineTrace {
            trace_id: None,
            original_query: query.to_string(),
            rewritten_query: None,
            retrieval_query: String::new(),
            retrieved_doc_ids: Vec::new(),
            recalled_record_ids: Vec::new(),
            golden_chunks: Vec::new(),
            no_memory_fallback: false,
            assembled_prompt: String::new(),
            response: String::new(),
            warnings: Vec::new(),
            stage_millis: Vec::new(),
        }
    }

    /// Copy with zeroed timings, for comparisons of semantic content.
    pub fn without_timings(&self) -> PipelineTrace {
        let mut trace = self.clone();
        trace.stage_millis = Vec::new();
        trace
    }
}

#[derive(Deserialize)]
struct RewriteReply {
    query_rewrited: String,
}

/// Output of the rewrite stage.
#[derive(Debug, Clone)]
pub struct RewriteOutcome {
    pub query: String,
    /// False when the no-history rule short-circuited the client call.
    pub invoked_client: bool,
    pub warning: Option<String>,
}

/// Rewrites the current query from the dialogue history via the rewriter
/// client. With no history the original query is returned without any client
/// call. Malformed or failing client replies fall back to the original query
/// with a warning; a rewrite failure never aborts an answer.
pub fn rewrite_query(
    history: &DialogueHistory,
    query: &str,
    rewriter: &dyn ChatClient,
    account: &AccountMeta,
) -> RewriteOutcome {
    if history.is_empty() {
        return RewriteOutcome {
            query: query.to_string(),
            invoked_client: false,
            warning: None,
        };
    }
    let prompt = match prompts::render_rewrite_prompt(
        query,
        &history.rendered(),
        &account.biz_id,
        &account.agent,
    ) {
        Ok(prompt) => prompt,
        Err(e) => {
            return RewriteOutcome {
                query: query.to_string(),
                invoked_client: false,
                warning: Some(format!("rewrite prompt failed to render: {e}")),
            }
        }
    };
    match rewriter
        .generate(&prompt)
        .and_then(|reply| prompts::parse_json_reply::<RewriteReply>(&reply))
    {
        Ok(reply) if !reply.query_rewrited.trim().is_empty() => RewriteOutcome {
            query: reply.query_rewrited,
            invoked_client: true,
            warning: None,
        },
        Ok(_) => RewriteOutcome {
            query: query.to_string(),
            invoked_client: true,
            warning: Some("rewriter returned an empty rewrite; using original query".into()),
        },
        Err(e) => RewriteOutcome {
            query: query.to_string(),
            invoked_client: true,
            warning: Some(format!("rewrite failed ({e}); using original query")),
        },
    }
}

/// Renders the response prompt: golden chunks in score order as
/// `Reference Historical Article <title>: <content>` entries, or the
/// empty-knowledge-base branch when nothing survived retrieval.
pub fn assemble_response_prompt(
    meta_prompt: &str,
    golden: &[ScoredChunk],
    docs: &[RetrievedDocument],
    comments: &str,
    query: &str,
) -> Result<String> {
    let knowledge_base = if golden.is_empty() {
        prompts::EMPTY_KB_NOTICE.to_string()
    } else {
        golden
            .iter()
            .map(|item| {
                let title = docs
                    .iter()
                    .find(|d| d.doc_id == item.chunk.doc_id)
                    .map(|d| d.title.as_str())
                    .unwrap_or(item.chunk.doc_id.as_str());
                format!("{} {}: {}", prompts::ARTICLE_PREFIX, title, item.chunk.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    prompts::render_response_prompt(meta_prompt, &knowledge_base, comments, query)
}

/// All handles one answer needs. Clients are trait objects so runs swap
/// freely between stubs and HTTP endpoints.
pub struct Pipeline<'a> {
    pub rewriter: &'a dyn ChatClient,
    pub responder: &'a dyn ChatClient,
    pub embedder: &'a dyn EmbedderClient,
    pub classifier: &'a dyn ClassifierClient,
    pub kb: &'a KnowledgeBase,
    pub account: AccountMeta,
    pub meta_prompt: String,
    pub comments: String,
    pub config: PipelineConfig,
}

impl Pipeline<'_> {
    /// Runs the full pipeline for one user query at time `now`.
    ///
    /// Stage order is rewrite? -> retrieve -> recall? -> rerank? -> assemble
    /// -> respond, with the current query stored into long-term memory only
    /// after a successful response so failed requests leave the store
    /// untouched and recall never sees the query being answered.
    pub fn answer(
        &self,
        store: &mut MemoryStore,
        user_id: &str,
        history: &DialogueHistory,
        query: &str,
        now: DateTime<Utc>,
    ) -> Result<(String, PipelineTrace)> {
        self.config.validate()?;
        if query.trim().is_empty() {
            return Err(Error::InvalidArgument("query must be non-empty".into()));
        }
        let mut trace = PipelineTrace::new(query);

        // rewrite?
        if self.config.stm_enabled {
            let started = Instant::now();
            let outcome = rewrite_query(history, query, self.rewriter, &self.account);
            trace.rewritten_query = Some(outcome.query.clone());
            trace.retrieval_query = outcome.query;
            if let Some(warning) = outcome.warning {
                trace.warnings.push(warning);
            }
            push_timing(&mut trace, "rewrite", started);
        } else if self.config.include_history_in_retrieval && !history.is_empty() {
            let mut parts: Vec<&str> = history
                .last_n(self.config.history_window)
                .iter()
                .map(|t| t.text.as_str())
                .collect();
            parts.push(query);
            trace.retrieval_query = parts.join("\n");
        } else {
            trace.retrieval_query = query.to_string();
        }

        // retrieve
        let started = Instant::now();
        let docs = match self
            .kb
            .retrieve(&trace.retrieval_query, self.embedder, self.config.top_r_docs)
        {
            Ok(docs) => docs,
            Err(e) => return Err(stage_failure("retrieve", trace, e)),
        };
        trace.retrieved_doc_ids = docs.iter().map(|d| d.doc_id.clone()).collect();
        push_timing(&mut trace, "retrieve", started);

        // recall? + rerank?
        let mut stored_partition: Option<PartitionKey> = None;
        let golden: Vec<ScoredChunk> = if self.config.ltm_enabled {
            let started = Instant::now();
            let partition =
                match classify_query(query, store.taxonomy(), self.classifier) {
                    Ok(classification) => {
                        if let Some(warning) = classification.warning {
                            trace.warnings.push(warning);
                        }
                        classification.partition
                    }
                    Err(e) => {
                        trace
                            .warnings
                            .push(format!("classification failed ({e}); using fallback partition"));
                        PartitionKey::fallback()
                    }
                };
            stored_partition = Some(partition.clone());
            let query_embedding = match self.embedder.embed(&trace.retrieval_query) {
                Ok(embedding) => embedding,
                Err(e) => return Err(stage_failure("recall", trace, e)),
            };
            let recalled = match store.recall_partition_first(
                user_id,
                &query_embedding,
                self.config.top_n_history,
                &partition,
            ) {
                Ok(recalled) => recalled,
                Err(e) => return Err(stage_failure("recall", trace, e)),
            };
            trace.recalled_record_ids = recalled.iter().map(|r| r.record.record_id).collect();
            push_timing(&mut trace, "recall", started);

            let started = Instant::now();
            let records: Vec<crate::store::MemoryRecord> =
                recalled.into_iter().map(|r| r.record).collect();
            let output = match rerank_top_k(
                &docs,
                &records,
                self.config.top_k_chunks,
                &self.config.chunk_policy,
                self.embedder,
                self.config.aggregation,
            ) {
                Ok(output) => output,
                Err(e) => return Err(stage_failure("rerank", trace, e)),
            };
            trace.no_memory_fallback = output.no_memory_fallback;
            let budgeted = context_budget(&output.chunks, self.config.context_budget_chars);
            push_timing(&mut trace, "rerank", started);
            budgeted
        } else {
            // whole retrieved documents, one pseudo-chunk each, under the
            // same context budget
            let whole: Vec<ScoredChunk> = docs
                .iter()
                .map(|doc| ScoredChunk {
                    chunk: DocumentChunk {
                        doc_id: doc.doc_id.clone(),
                        chunk_index: 0,
                        text: doc.body.clone(),
                        embedding: None,
                    },
                    score: 0.0,
                })
                .collect();
            context_budget(&whole, self.config.context_budget_chars)
        };
        trace.golden_chunks = golden
            .iter()
            .map(|item| GoldenChunkRef {
                doc_id: item.chunk.doc_id.clone(),
                chunk_index: item.chunk.chunk_index,
                score: item.score,
            })
            .collect();

        // assemble
        let started = Instant::now();
        let prompt =
            match assemble_response_prompt(&self.meta_prompt, &golden, &docs, &self.comments, query)
            {
                Ok(prompt) => prompt,
                Err(e) => return Err(stage_failure("assemble", trace, e)),
            };
        trace.assembled_prompt = prompt;
        push_timing(&mut trace, "assemble", started);

        // respond
        let started = Instant::now();
        let response = match self.responder.generate(&trace.assembled_prompt) {
            Ok(response) => response,
            Err(e) => return Err(stage_failure("respond", trace, e)),
        };
        trace.response = response.clone();
        push_timing(&mut trace, "respond", started);

        // store the answered query into long-term memory
        if let Some(partition) = stored_partition {
            let started = Instant::now();
            let text = if self.config.store_rewritten_query {
                trace.rewritten_query.as_deref().unwrap_or(query)
            } else {
                query
            };
            let stored = self
                .embedder
                .embed(text)
                .and_then(|embedding| store.store_query(user_id, text, partition, embedding, now));
            if let Err(e) = stored {
                trace.warnings.push(format!("memory write failed: {e}"));
            }
            push_timing(&mut trace, "store", started);
        }

        Ok((response, trace))
    }
}

fn push_timing(trace: &mut PipelineTrace, stage: &str, started: Instant) {
    trace.stage_millis.push(StageTiming {
        stage: stage.to_string(),
        millis: started.elapsed().as_secs_f64() * 1e3,
    });
}

fn stage_failure(stage: &'static str, trace: PipelineTrace, source: Error) -> Error {
    Error::Stage {
        stage,
        trace: Box::new(trace),
        source: Box::new(source),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::stub::{
        HashedBagEmbedder, KeyedChatClient, ScriptedChatClient, StubResponder,
        TaxonomyOverlapClassifier,
    };
    use crate::taxonomy::TopicTaxonomy;
    use chrono::TimeZone;

    fn ts(seconds: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + seconds, 0).unwrap()
    }

    fn history_one_turn() -> DialogueHistory {
        DialogueHistory::from_turns(vec![
            DialogueTurn::new(Role::User, "tell me about sourdough", ts(0)).unwrap(),
            DialogueTurn::new(Role::Assistant, "sourdough needs a starter", ts(1)).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn empty_history_skips_the_rewriter_entirely() {
        let rewriter = ScriptedChatClient::new(vec![]);
        let outcome = rewrite_query(
            &DialogueHistory::new(),
            "hello",
            &rewriter,
            &AccountMeta::default(),
        );
        assert_eq!(outcome.query, "hello");
        assert!(!outcome.invoked_client);
        assert_eq!(rewriter.call_count(), 0);
    }

    #[test]
    fn rewriter_json_reply_is_used() {
        let rewriter =
            ScriptedChatClient::new(vec![r#"{"query_rewrited": "X"}"#.to_string()]);
        let outcome = rewrite_query(&history_one_turn(), "it?", &rewriter, &AccountMeta::default());
        assert_eq!(outcome.query, "X");
        assert!(outcome.warning.is_none());
    }

    #[test]
    fn malformed_rewrite_falls_back_with_warning() {
        let rewriter = ScriptedChatClient::new(vec!["not json at all".to_string()]);
        let outcome = rewrite_query(&history_one_turn(), "it?", &rewriter, &AccountMeta::default());
        assert_eq!(outcome.query, "it?");
        assert!(outcome.warning.is_some());

        // transport failure degrades the same way
        let exhausted = ScriptedChatClient::new(vec![]);
        let outcome =
            rewrite_query(&history_one_turn(), "it?", &exhausted, &AccountMeta::default());
        assert_eq!(outcome.query, "it?");
        assert!(outcome.warning.is_some());
    }

    fn chunked(doc_id: &str, text: &str, score: f64) -> ScoredChunk {
        ScoredChunk {
            chunk: DocumentChunk {
                doc_id: doc_id.into(),
                chunk_index: 0,
                text: text.into(),
                embedding: None,
            },
            score,
        }
    }

    #[test]
    fn assembled_prompt_renders_chunks_or_empty_branch() {
        let docs = vec![
            RetrievedDocument {
                doc_id: "a".into(),
                title: "First Title".into(),
                body: "body a".into(),
            },
            RetrievedDocument {
                doc_id: "b".into(),
                title: "Second Title".into(),
                body: "body b".into(),
            },
        ];
        let golden = vec![chunked("b", "chunk from b", 0.9), chunked("a", "chunk from a", 0.5)];
        let prompt = assemble_response_prompt("meta. ", &golden, &docs, "(no comments)", "q?")
            .unwrap();
        let first = prompt.find("Reference Historical Article Second Title: chunk from b").unwrap();
        let second = prompt.find("Reference Historical Article First Title: chunk from a").unwrap();
        assert!(first < second, "chunks must appear in score order");
        assert!(prompt.contains("The user's original question is: q?"));

        let empty = assemble_response_prompt("meta. ", &[], &docs, "(no comments)", "q?").unwrap();
        assert!(empty.contains(prompts::EMPTY_KB_NOTICE));

        let again = assemble_response_prompt("meta. ", &golden, &docs, "(no comments)", "q?")
            .unwrap();
        assert_eq!(prompt, again);
    }

    struct Fixture {
        kb: KnowledgeBase,
        embedder: HashedBagEmbedder,
        classifier: TaxonomyOverlapClassifier,
        responder: StubResponder,
    }

    impl Fixture {
        fn new() -> Self {
            let embedder = HashedBagEmbedder::new(256);
            let docs = vec![
                RetrievedDocument {
                    doc_id: "doc-bread".into(),
                    title: "Baking Bread".into(),
                    body: "sourdough starter flour yeast rising schedule".into(),
                },
                RetrievedDocument {
                    doc_id: "doc-bike".into(),
                    title: "Bike Repair".into(),
                    body: "bicycle chain lube brake adjustment".into(),
                },
            ];
            let kb = KnowledgeBase::from_documents(docs, &embedder).unwrap();
            Fixture {
                kb,
                embedder,
                classifier: TaxonomyOverlapClassifier::new(&TopicTaxonomy::shipped_default()),
                responder: StubResponder::new(1),
            }
        }

        fn pipeline<'a>(&'a self, rewriter: &'a dyn ChatClient, config: PipelineConfig) -> Pipeline<'a> {
            Pipeline {
                rewriter,
                responder: &self.responder,
                embedder: &self.embedder,
                classifier: &self.classifier,
                kb: &self.kb,
                account: AccountMeta {
                    biz_id: "biz-1".into(),
                    agent: "Test Account, baking and cycling".into(),
                },
                meta_prompt: "You are the account assistant. ".into(),
                comments: "(no comments)".into(),
                config,
            }
        }

        fn store(&self) -> MemoryStore {
            MemoryStore::in_memory(TopicTaxonomy::shipped_default(), 256)
        }
    }

    #[test]
    fn stm_disabled_never_invokes_the_rewriter() {
        let fixture = Fixture::new();
        let rewriter = ScriptedChatClient::new(vec![]);
        let pipeline = fixture.pipeline(&rewriter, PipelineConfig::native_rag());
        let mut store = fixture.store();
        let (_, trace) = pipeline
            .answer(&mut store, "u1", &history_one_turn(), "how do I fix it", ts(10))
            .unwrap();
        assert_eq!(rewriter.call_count(), 0);
        assert!(trace.rewritten_query.is_none());
        assert_eq!(trace.retrieval_query, "how do I fix it");
    }

    #[test]
    fn ltm_disabled_leaves_the_store_untouched() {
        let fixture = Fixture::new();
        let rewriter = ScriptedChatClient::new(vec![]);
        let pipeline = fixture.pipeline(&rewriter, PipelineConfig::native_rag());
        let mut store = fixture.store();
        let (_, trace) = pipeline
            .answer(&mut store, "u1", &DialogueHistory::new(), "sourdough starter", ts(5))
            .unwrap();
        assert_eq!(store.len(), 0);
        assert!(trace.recalled_record_ids.is_empty());
        let stages: Vec<&str> = trace.stage_millis.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(stages, ["retrieve", "assemble", "respond"]);
        // whole docs pass through as pseudo-chunks
        assert!(!trace.golden_chunks.is_empty());
    }

    #[test]
    fn history_concatenation_baseline_builds_long_retrieval_query() {
        let fixture = Fixture::new();
        let rewriter = ScriptedChatClient::new(vec![]);
        let pipeline = fixture.pipeline(&rewriter, PipelineConfig::native_rag_with_history());
        let mut store = fixture.store();
        let (_, trace) = pipeline
            .answer(&mut store, "u1", &history_one_turn(), "how long does it take", ts(10))
            .unwrap();
        assert!(trace.retrieval_query.contains("tell me about sourdough"));
        assert!(trace.retrieval_query.ends_with("how long does it take"));
    }

    #[test]
    fn full_pipeline_runs_all_stages_in_order_and_stores_after_success() {
        let fixture = Fixture::new();
        let rewriter = KeyedChatClient::new(
            vec![(
                "how long does it rise".into(),
                r#"{"query_rewrited": "sourdough starter rising time"}"#.into(),
            )],
            r#"{"query_rewrited": ""}"#,
        );
        let pipeline = fixture.pipeline(&rewriter, PipelineConfig::full());
        let mut store = fixture.store();
        let (response, trace) = pipeline
            .answer(&mut store, "u1", &history_one_turn(), "how long does it rise", ts(10))
            .unwrap();
        assert!(!response.is_empty());
        assert_eq!(trace.rewritten_query.as_deref(), Some("sourdough starter rising time"));
        let stages: Vec<&str> = trace.stage_millis.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(stages, ["rewrite", "retrieve", "recall", "rerank", "assemble", "respond", "store"]);
        // first answer for a fresh user: no memory yet, fallback path
        assert!(trace.no_memory_fallback);
        assert_eq!(store.len(), 1);
        assert_eq!(store.records().next().unwrap().query_text, "how long does it rise");

        // second answer now recalls the stored query
        let (_, trace2) = pipeline
            .answer(&mut store, "u1", &history_one_turn(), "how long does it rise", ts(20))
            .unwrap();
        assert_eq!(trace2.recalled_record_ids, vec![1]);
        assert!(!trace2.no_memory_fallback);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn responder_failure_carries_trace_and_leaves_store_unchanged() {
        let fixture = Fixture::new();
        let rewriter = ScriptedChatClient::new(vec![]);
        let failing = ScriptedChatClient::new(vec![]); // exhausted: transport error
        let pipeline = Pipeline {
            responder: &failing,
            ..fixture.pipeline(&rewriter, PipelineConfig::ltm_rag())
        };
        let mut store = fixture.store();
        let err = pipeline
            .answer(&mut store, "u1", &history_one_turn(), "sourdough", ts(10))
            .unwrap_err();
        match err {
            Error::Stage { stage, trace, .. } => {
                assert_eq!(stage, "respond");
                assert!(!trace.assembled_prompt.is_empty());
            }
            other => panic!("expected stage failure, got {other}"),
        }
        assert_eq!(store.len(), 0, "failed answers must not persist the query");
    }

    #[test]
    fn traces_serialize_losslessly() {
        let fixture = Fixture::new();
        let rewriter = KeyedChatClient::new(vec![], r#"{"query_rewrited": "sourdough starter"}"#);
        let pipeline = fixture.pipeline(&rewriter, PipelineConfig::full());
        let mut store = fixture.store();
        let (_, trace) = pipeline
            .answer(&mut store, "u1", &history_one_turn(), "tell me about it", ts(10))
            .unwrap();
        let json = serde_json::to_string(&trace).unwrap();
        let back: PipelineTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn answer_is_deterministic_modulo_timings() {
        let fixture = Fixture::new();
        let rewriter = KeyedChatClient::new(vec![], r#"{"query_rewrited": "sourdough starter"}"#);
        let pipeline = fixture.pipeline(&rewriter, PipelineConfig::full());
        let run = || {
            let mut store = fixture.store();
            let (_, trace) = pipeline
                .answer(&mut store, "u1", &history_one_turn(), "how about it", ts(10))
                .unwrap();
            trace.without_timings()
        };
        assert_eq!(run(), run());
    }
}

//! Python bindings: the text/similarity primitives, the reward engine, the
//! partitioned memory store, and a self-contained pipeline runner on
//! deterministic stub clients.

use std::collections::HashMap;

use chrono::TimeZone;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use himes_core::clients::stub::{
    EchoRewriter, HashedBagEmbedder, KeyedChatClient, StubResponder, TaxonomyOverlapClassifier,
};
use himes_core::clients::{ChatClient, EmbedderClient};
use himes_core::embedding::EmbeddingVector;
use himes_core::kb::KnowledgeBase;
use himes_core::pipeline::{AccountMeta, DialogueHistory, DialogueTurn, Pipeline, PipelineConfig, Role};
use himes_core::rerank::RetrievedDocument;
use himes_core::reward::{HitMode, RewardWeights, RolloutSample};
use himes_core::store::RecallScope;
use himes_core::taxonomy::{PartitionKey, TopicTaxonomy};
use himes_core::text::TokenSequence;

fn py_err(e: himes_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn normalize_text(raw: &str) -> String {
    himes_core::text::normalize_text(raw)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    himes_core::text::tokenize(text).tokens().to_vec()
}

#[pyfunction]
fn lcs_length(a: Vec<String>, b: Vec<String>) -> usize {
    himes_core::text::lcs_length(
        &TokenSequence::from_tokens(a),
        &TokenSequence::from_tokens(b),
    )
}

#[pyfunction]
fn rouge_l_f1(pred: Vec<String>, reference: Vec<String>) -> f64 {
    himes_core::text::rouge_l_f1(
        &TokenSequence::from_tokens(pred),
        &TokenSequence::from_tokens(reference),
    )
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    himes_core::embedding::cosine_similarity(&EmbeddingVector::raw(a), &EmbeddingVector::raw(b))
        .map_err(py_err)
}

#[pyfunction]
fn exact_match(pred: &str, reference: &str) -> u8 {
    himes_core::reward::exact_match(pred, reference)
}

#[pyfunction]
#[pyo3(signature = (pred, contents, threshold = 0.8))]
fn hit(pred: &str, contents: Vec<String>, threshold: f64) -> u8 {
    himes_core::reward::hit_with_mode(pred, &contents, &HitMode::Coverage { threshold })
}

#[pyfunction]
fn sser(rewritten_query: &str, annotated_rewrite: &str) -> PyResult<f64> {
    himes_core::reward::sser(rewritten_query, annotated_rewrite).map_err(py_err)
}

#[pyfunction]
fn group_relative_advantages(rewards: Vec<f64>, group_size: usize) -> PyResult<Vec<f64>> {
    himes_core::reward::group_relative_advantages(&rewards, group_size).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (
    rewritten_query,
    predicted_answer,
    reference_answer,
    retrieved_contents,
    annotated_rewrite = None,
    alpha = 0.5,
    beta = 0.5,
    lambda_ = 0.0
))]
#[allow(clippy::too_many_arguments)]
fn score_rollout<'py>(
    py: Python<'py>,
    rewritten_query: String,
    predicted_answer: String,
    reference_answer: String,
    retrieved_contents: Vec<String>,
    annotated_rewrite: Option<String>,
    alpha: f64,
    beta: f64,
    lambda_: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sample = RolloutSample {
        rewritten_query,
        predicted_answer,
        reference_answer,
        retrieved_contents,
        annotated_rewrite,
    };
    let weights = RewardWeights {
        alpha,
        beta,
        lambda: lambda_,
    };
    let b = himes_core::reward::score_rollout(&sample, &weights).map_err(py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("f1_h", b.f1_h)?;
    dict.set_item("em_h", b.em_h)?;
    dict.set_item("hit", b.hit)?;
    dict.set_item("hser", b.hser)?;
    dict.set_item("sser", b.sser)?;
    dict.set_item("fused", b.fused)?;
    Ok(dict)
}

#[pyfunction]
#[pyo3(signature = (sessions, tau = 0.9, dim = 256))]
fn repeated_asking_rate(sessions: Vec<(String, Vec<String>)>, tau: f64, dim: usize) -> PyResult<f64> {
    let embedder = HashedBagEmbedder::new(dim);
    himes_core::store::repeated_asking_rate(&sessions, &embedder, tau).map_err(py_err)
}

/// Partitioned long-term memory over a user's historical queries, with a
/// deterministic hashed bag-of-tokens embedder and a taxonomy-overlap
/// classifier built in.
#[pyclass]
struct MemoryStore {
    inner: himes_core::store::MemoryStore,
    embedder: HashedBagEmbedder,
    classifier: TaxonomyOverlapClassifier,
    clock: i64,
}

#[pymethods]
impl MemoryStore {
    #[new]
    #[pyo3(signature = (dim = 256))]
    fn new(dim: usize) -> Self {
        let taxonomy = TopicTaxonomy::shipped_default();
        MemoryStore {
            inner: himes_core::store::MemoryStore::in_memory(taxonomy.clone(), dim),
            embedder: HashedBagEmbedder::new(dim),
            classifier: TaxonomyOverlapClassifier::new(&taxonomy),
            clock: 1_700_000_000,
        }
    }

    /// Classifies, embeds, and stores one query; returns
    /// {record_id, topic, subtopic}.
    fn store<'py>(&mut self, py: Python<'py>, user_id: &str, query: &str) -> PyResult<Bound<'py, PyDict>> {
        let classification = himes_core::store::classify_query(
            query,
            self.inner.taxonomy(),
            &self.classifier,
        )
        .map_err(py_err)?;
        let embedding = self.embedder.embed(query).map_err(py_err)?;
        self.clock += 1;
        let timestamp = chrono::Utc.timestamp_opt(self.clock, 0).unwrap();
        let record_id = self
            .inner
            .store_query(user_id, query, classification.partition.clone(), embedding, timestamp)
            .map_err(py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("record_id", record_id)?;
        dict.set_item("topic", classification.partition.topic)?;
        dict.set_item("subtopic", classification.partition.subtopic)?;
        Ok(dict)
    }

    /// Top-n similar stored queries of the user. scope: "partition"
    /// (classify the query, partition-first with global fill) or "global".
    #[pyo3(signature = (user_id, query, n = 10, scope = "partition"))]
    fn recall<'py>(
        &self,
        py: Python<'py>,
        user_id: &str,
        query: &str,
        n: usize,
        scope: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let embedding = self.embedder.embed(query).map_err(py_err)?;
        let hits = match scope {
            "global" => self
                .inner
                .recall_top_n(user_id, &embedding, n, &RecallScope::Global)
                .map_err(py_err)?,
            "partition" => {
                let classification = himes_core::store::classify_query(
                    query,
                    self.inner.taxonomy(),
                    &self.classifier,
                )
                .map_err(py_err)?;
                self.inner
                    .recall_partition_first(user_id, &embedding, n, &classification.partition)
                    .map_err(py_err)?
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown scope '{other}' (partition|global)"
                )))
            }
        };
        hits.into_iter()
            .map(|hit| {
                let dict = PyDict::new(py);
                dict.set_item("record_id", hit.record.record_id)?;
                dict.set_item("query_text", hit.record.query_text)?;
                dict.set_item("topic", hit.record.partition.topic)?;
                dict.set_item("subtopic", hit.record.partition.subtopic)?;
                dict.set_item("similarity", hit.similarity)?;
                Ok(dict)
            })
            .collect()
    }

    /// Records a given scope would scan; omit topic for the global count.
    #[pyo3(signature = (topic = None, subtopic = None))]
    fn candidate_count(&self, topic: Option<String>, subtopic: Option<String>) -> PyResult<usize> {
        let scope = match (topic, subtopic) {
            (None, None) => RecallScope::Global,
            (Some(topic), Some(subtopic)) => {
                RecallScope::Partition(PartitionKey::new(topic, subtopic))
            }
            _ => return Err(PyValueError::new_err("topic and subtopic go together")),
        };
        Ok(self.inner.candidate_set_size(&scope))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

enum RewriterKind {
    Keyed(KeyedChatClient),
    Echo(EchoRewriter),
}

impl RewriterKind {
    fn as_chat(&self) -> &dyn ChatClient {
        match self {
            RewriterKind::Keyed(client) => client,
            RewriterKind::Echo(client) => client,
        }
    }
}

/// The full answer pipeline over an in-memory store, a document corpus, and
/// deterministic stub clients. `rewrite_rules` maps a substring of the
/// current query to the rewritten retrieval query the stub rewriter should
/// produce.
#[pyclass]
struct Himes {
    store: himes_core::store::MemoryStore,
    kb: KnowledgeBase,
    embedder: HashedBagEmbedder,
    classifier: TaxonomyOverlapClassifier,
    rewriter: RewriterKind,
    responder: StubResponder,
    clock: i64,
}

#[pymethods]
impl Himes {
    #[new]
    #[pyo3(signature = (docs, dim = 256, rewrite_rules = None))]
    fn new(
        docs: Vec<HashMap<String, String>>,
        dim: usize,
        rewrite_rules: Option<Vec<(String, String)>>,
    ) -> PyResult<Self> {
        let documents: Vec<RetrievedDocument> = docs
            .into_iter()
            .enumerate()
            .map(|(i, mut d)| {
                let body = d
                    .remove("body")
                    .ok_or_else(|| PyValueError::new_err(format!("doc {i} is missing 'body'")))?;
                Ok(RetrievedDocument {
                    doc_id: d.remove("doc_id").unwrap_or_else(|| format!("doc-{i:02}")),
                    title: d.remove("title").unwrap_or_default(),
                    body,
                })
            })
            .collect::<PyResult<_>>()?;
        let embedder = HashedBagEmbedder::new(dim);
        let kb = KnowledgeBase::from_documents(documents, &embedder).map_err(py_err)?;
        let taxonomy = TopicTaxonomy::shipped_default();
        let rewriter = match rewrite_rules {
            Some(rules) => RewriterKind::Keyed(KeyedChatClient::new(
                rules
                    .into_iter()
                    .map(|(key, rewrite)| {
                        (key, serde_json::json!({ "query_rewrited": rewrite }).to_string())
                    })
                    .collect(),
                r#"{"query_rewrited": ""}"#,
            )),
            None => RewriterKind::Echo(EchoRewriter),
        };
        Ok(Himes {
            store: himes_core::store::MemoryStore::in_memory(taxonomy.clone(), dim),
            kb,
            embedder,
            classifier: TaxonomyOverlapClassifier::new(&taxonomy),
            rewriter,
            responder: StubResponder::new(0),
            clock: 1_700_000_000,
        })
    }

    /// Runs one answer. `history` is a list of (role, text) with role "user"
    /// or "assistant". Returns (response, trace) with the trace as a JSON
    /// string.
    #[pyo3(signature = (user_id, history, query, stm = true, ltm = true, top_r = 3, top_k = 5))]
    #[allow(clippy::too_many_arguments)]
    fn answer(
        &mut self,
        user_id: &str,
        history: Vec<(String, String)>,
        query: &str,
        stm: bool,
        ltm: bool,
        top_r: usize,
        top_k: usize,
    ) -> PyResult<(String, String)> {
        let mut dialogue = DialogueHistory::new();
        for (i, (role, text)) in history.iter().enumerate() {
            let role = if role == "user" { Role::User } else { Role::Assistant };
            let at = chrono::Utc
                .timestamp_opt(self.clock - history.len() as i64 + i as i64, 0)
                .unwrap();
            dialogue
                .push(DialogueTurn::new(role, text.clone(), at).map_err(py_err)?)
                .map_err(py_err)?;
        }
        self.clock += 60;
        let now = chrono::Utc.timestamp_opt(self.clock, 0).unwrap();
        let config = PipelineConfig {
            stm_enabled: stm,
            ltm_enabled: ltm,
            top_r_docs: top_r,
            top_k_chunks: top_k,
            ..PipelineConfig::default()
        };
        let pipeline = Pipeline {
            rewriter: self.rewriter.as_chat(),
            responder: &self.responder,
            embedder: &self.embedder,
            classifier: &self.classifier,
            kb: &self.kb,
            account: AccountMeta {
                biz_id: "py".into(),
                agent: "python bindings account".into(),
            },
            meta_prompt: String::new(),
            comments: "(none)".into(),
            config,
        };
        let (response, trace) = pipeline
            .answer(&mut self.store, user_id, &dialogue, query, now)
            .map_err(py_err)?;
        let trace_json = serde_json::to_string(&trace)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((response, trace_json))
    }

    /// First-stage retrieval only: the top-r doc_ids for a query.
    #[pyo3(signature = (query, top_r = 3))]
    fn retrieve(&self, query: &str, top_r: usize) -> PyResult<Vec<String>> {
        Ok(self
            .kb
            .retrieve(query, &self.embedder, top_r)
            .map_err(py_err)?
            .into_iter()
            .map(|d| d.doc_id)
            .collect())
    }

    fn memory_len(&self) -> usize {
        self.store.len()
    }
}

#[pymodule]
fn himes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(lcs_length, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l_f1, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(hit, m)?)?;
    m.add_function(wrap_pyfunction!(sser, m)?)?;
    m.add_function(wrap_pyfunction!(group_relative_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(score_rollout, m)?)?;
    m.add_function(wrap_pyfunction!(repeated_asking_rate, m)?)?;
    m.add_class::<MemoryStore>()?;
    m.add_class::<Himes>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

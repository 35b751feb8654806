//! Evaluation harness: judge-based CA/QA/QR scoring, ablation grids over
//! pipeline configurations, the reward-fusion lambda sweep, and a
//! ground-truth retrieval hit rate that works without any judge.

use std::path::Path;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::clients::stub::KeyedChatClient;
use crate::clients::{ChatClient, ClassifierClient, EmbedderClient};
use crate::datagen::SampleTurn;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::pipeline::{
    AccountMeta, DialogueHistory, DialogueTurn, Pipeline, PipelineConfig, PipelineTrace, Role,
};
use crate::prompts;
use crate::reward::{score_rollout, RewardWeights, RolloutSample};
use crate::store::MemoryStore;
use crate::taxonomy::TopicTaxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ca,
    Qa,
    Qr,
}

/// Everything a judge template might need for one sample. Each metric uses a
/// subset; a missing required field is an error, not a silent zero.
#[derive(Debug, Clone, Default)]
pub struct JudgeContext<'a> {
    pub response: &'a str,
    pub context: Option<&'a str>,
    pub query: Option<&'a str>,
    pub rewritten_query: Option<&'a str>,
    pub history: Option<&'a str>,
}

fn require<'a>(field: Option<&'a str>, name: &str, metric: Metric) -> Result<&'a str> {
    field.ok_or_else(|| {
        Error::InvalidArgument(format!("judge context for {metric:?} is missing {name}"))
    })
}

/// Scores one sample with the judge client, clamped to [0, 100]. An
/// unparseable reply triggers one re-prompt with a format reminder; a second
/// failure marks the sample unscored (`None`).
pub fn judge_score(
    metric: Metric,
    context: &JudgeContext<'_>,
    judge: &dyn ChatClient,
) -> Result<Option<f64>> {
    let prompt = match metric {
        Metric::Ca => prompts::render_template(
            prompts::JUDGE_CA_TEMPLATE,
            &[
                ("context", require(context.context, "context", metric)?),
                ("response", context.response),
            ],
        )?,
        Metric::Qa => prompts::render_template(
            prompts::JUDGE_QA_TEMPLATE,
            &[
                ("query", require(context.query, "query", metric)?),
                ("response", context.response),
            ],
        )?,
        Metric::Qr => prompts::render_template(
            prompts::JUDGE_QR_TEMPLATE,
            &[
                ("history", require(context.history, "history", metric)?),
                ("query", require(context.query, "query", metric)?),
                (
                    "rewritten_query",
                    require(context.rewritten_query, "rewritten_query", metric)?,
                ),
            ],
        )?,
    };
    let reply = judge.generate(&prompt)?;
    if let Some(score) = prompts::parse_score(&reply) {
        return Ok(Some(score));
    }
    let reply = judge.generate(&format!("{prompt}{}", prompts::FORMAT_REMINDER))?;
    Ok(prompts::parse_score(&reply))
}

/// One test-set entry. `gold_doc_id` enables the hit-rate proxy,
/// `annotated_rewrite` the SSER component, `reference_answer` the HSER
/// components of the lambda sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSample {
    pub history: Vec<SampleTurn>,
    pub query: String,
    pub timestamp: chrono::DateTime<chrono::Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_doc_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_rewrite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
}

impl EvalSample {
    pub fn user_id(&self) -> &str {
        self.user_id.as_deref().unwrap_or("eval-user")
    }

    /// History turns with timestamps backfilled one minute apart, ending
    /// just before the sample timestamp.
    pub fn dialogue_history(&self) -> Result<DialogueHistory> {
        let mut history = DialogueHistory::new();
        let n = self.history.len() as i64;
        for (i, turn) in self.history.iter().enumerate() {
            let role = if turn.role == "user" { Role::User } else { Role::Assistant };
            let at = self.timestamp - Duration::minutes(n - i as i64);
            history.push(DialogueTurn::new(role, turn.text.clone(), at)?)?;
        }
        Ok(history)
    }

    pub fn rendered_history(&self) -> String {
        prompts::render_history(self.history.iter().map(|t| (t.role.as_str(), t.text.as_str())))
    }
}

/// Loads a JSONL test set.
pub fn load_test_set(path: impl AsRef<Path>) -> Result<Vec<EvalSample>> {
    let content = std::fs::read_to_string(path.as_ref())?;
    let mut samples = Vec::new();
    for (line_no, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: EvalSample = serde_json::from_str(line).map_err(|e| {
            Error::InvalidArgument(format!(
                "bad test-set record at {}:{}: {e}",
                path.as_ref().display(),
                line_no + 1
            ))
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// A deterministic stand-in for the trained rewriter: replies with the
/// sample's annotated rewrite whenever the prompt contains that sample's
/// query, and with an empty rewrite (pass-through) otherwise.
pub fn stub_rewriter_for(samples: &[EvalSample]) -> KeyedChatClient {
    let rules = samples
        .iter()
        .filter_map(|s| {
            s.annotated_rewrite.as_ref().map(|rewrite| {
                (
                    format!("User's current query: {}", s.query),
                    serde_json::json!({ "query_rewrited": rewrite }).to_string(),
                )
            })
        })
        .collect();
    KeyedChatClient::new(rules, r#"{"query_rewrited": ""}"#)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropTally {
    pub ca: usize,
    pub qa: usize,
    pub qr: usize,
}

/// Aggregated judge scores for one configuration. Means cover scored samples
/// only; dropped samples are tallied, never silently averaged in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub ca: f64,
    pub qa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qr: Option<f64>,
    pub n_samples: usize,
    pub dropped: DropTally,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub ca: Option<f64>,
    pub qa: Option<f64>,
    pub qr: Option<f64>,
}

/// One ablation grid row: the configuration snapshot, aggregate scores, the
/// per-sample scores they were computed from, and the hit-rate proxy when
/// gold document annotations exist.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub config: PipelineConfig,
    pub weights: RewardWeights,
    pub scores: Option<MetricScores>,
    pub per_sample: Vec<SampleScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    /// Published reference scores for orientation; contextual metadata, not
    /// an assertion target.
    pub reference_baselines: serde_json::Value,
    pub rows: Vec<AblationRow>,
}

/// Reference CA/QA scores reported for comparable configurations in the
/// original study of this architecture.
pub fn reference_baselines() -> serde_json::Value {
    serde_json::json!({
        "native_rag":              { "ca": 20.24, "qa": 70.52 },
        "native_rag_with_history": { "ca": 21.40, "qa": 69.00 },
        "stm_rag":                 { "ca": 43.12, "qa": 79.00 },
        "ltm_rag":                 { "ca": 21.84, "qa": 70.77 },
        "full":                    { "ca": 55.55, "qa": 90.93, "qr": 90.85 },
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "label",
                "ca",
                "qa",
                "qr",
                "retrieval_hit_rate",
                "n_samples",
                "dropped_ca",
                "dropped_qa",
                "dropped_qr",
                "stm",
                "ltm",
                "include_history",
                "alpha",
                "beta",
                "lambda",
                "error",
            ])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for row in &self.rows {
            let scores = row.scores.as_ref();
            let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
            writer
                .write_record([
                    row.label.clone(),
                    fmt(scores.map(|s| s.ca)),
                    fmt(scores.map(|s| s.qa)),
                    fmt(scores.and_then(|s| s.qr)),
                    fmt(row.retrieval_hit_rate),
                    scores.map(|s| s.n_samples.to_string()).unwrap_or_default(),
                    scores.map(|s| s.dropped.ca.to_string()).unwrap_or_default(),
                    scores.map(|s| s.dropped.qa.to_string()).unwrap_or_default(),
                    scores.map(|s| s.dropped.qr.to_string()).unwrap_or_default(),
                    row.config.stm_enabled.to_string(),
                    row.config.ltm_enabled.to_string(),
                    row.config.include_history_in_retrieval.to_string(),
                    format!("{}", row.weights.alpha),
                    format!("{}", row.weights.beta),
                    format!("{}", row.weights.lambda),
                    row.error.clone().unwrap_or_default(),
                ])
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// Shared clients and corpus for evaluation runs. Every row gets a fresh
/// in-memory store so earlier configurations cannot leak memory into later
/// ones.
pub struct EvalHarness<'a> {
    pub rewriter: &'a dyn ChatClient,
    pub responder: &'a dyn ChatClient,
    pub judge: &'a dyn ChatClient,
    pub embedder: &'a dyn EmbedderClient,
    pub classifier: &'a dyn ClassifierClient,
    pub kb: &'a KnowledgeBase,
    pub taxonomy: TopicTaxonomy,
    pub account: AccountMeta,
    pub meta_prompt: String,
    pub comments: String,
    pub seed: u64,
}

impl EvalHarness<'_> {
    fn pipeline(&self, config: PipelineConfig) -> Pipeline<'_> {
        Pipeline {
            rewriter: self.rewriter,
            responder: self.responder,
            embedder: self.embedder,
            classifier: self.classifier,
            kb: self.kb,
            account: self.account.clone(),
            meta_prompt: self.meta_prompt.clone(),
            comments: self.comments.clone(),
            config,
        }
    }

    fn fresh_store(&self) -> MemoryStore {
        MemoryStore::in_memory(self.taxonomy.clone(), self.embedder.dimension())
    }
}

/// (aggregate scores, per-sample scores, hit rate over gold-annotated
/// samples, traces) of one grid row.
type RowOutcome = (MetricScores, Vec<SampleScores>, Option<f64>, Vec<PipelineTrace>);

fn run_row(
    label: &str,
    config: &PipelineConfig,
    samples: &[EvalSample],
    harness: &EvalHarness<'_>,
) -> Result<RowOutcome> {
    let pipeline = harness.pipeline(config.clone());
    let mut store = harness.fresh_store();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    let mut gold_total = 0usize;
    let mut gold_hits = 0usize;

    for sample in samples {
        let history = sample.dialogue_history()?;
        let (response, trace) = pipeline.answer(
            &mut store,
            sample.user_id(),
            &history,
            &sample.query,
            sample.timestamp,
        )?;

        if let Some(gold) = &sample.gold_doc_id {
            gold_total += 1;
            if trace.golden_chunks.iter().any(|c| &c.doc_id == gold) {
                gold_hits += 1;
            }
        }

        let knowledge = prompts::extract_knowledge_section(&trace.assembled_prompt)
            .unwrap_or("")
            .to_string();
        let rendered_history = sample.rendered_history();
        let ca = judge_score(
            Metric::Ca,
            &JudgeContext {
                response: &response,
                context: Some(&knowledge),
                ..JudgeContext::default()
            },
            harness.judge,
        )?;
        let qa = judge_score(
            Metric::Qa,
            &JudgeContext {
                response: &response,
                query: Some(&sample.query),
                ..JudgeContext::default()
            },
            harness.judge,
        )?;
        let qr = match &trace.rewritten_query {
            Some(rewritten) => judge_score(
                Metric::Qr,
                &JudgeContext {
                    response: &response,
                    query: Some(&sample.query),
                    rewritten_query: Some(rewritten),
                    history: Some(&rendered_history),
                    ..JudgeContext::default()
                },
                harness.judge,
            )?,
            None => None,
        };
        per_sample.push(SampleScores { ca, qa, qr });
        traces.push(trace);
    }

    let mean = |pick: fn(&SampleScores) -> Option<f64>| -> (f64, usize, usize) {
        let values: Vec<f64> = per_sample.iter().filter_map(pick).collect();
        let scored = values.len();
        let mean = if scored == 0 {
            0.0
        } else {
            values.iter().sum::<f64>() / scored as f64
        };
        (mean, scored, per_sample.len() - scored)
    };
    let (ca, _, dropped_ca) = mean(|s| s.ca);
    let (qa, _, dropped_qa) = mean(|s| s.qa);
    let qr_values: Vec<f64> = per_sample.iter().filter_map(|s| s.qr).collect();
    let qr_requested = config.stm_enabled;
    let scores = MetricScores {
        ca,
        qa,
        qr: if qr_values.is_empty() {
            None
        } else {
            Some(qr_values.iter().sum::<f64>() / qr_values.len() as f64)
        },
        n_samples: samples.len(),
        dropped: DropTally {
            ca: dropped_ca,
            qa: dropped_qa,
            qr: if qr_requested {
                per_sample.iter().filter(|s| s.qr.is_none()).count()
            } else {
                0
            },
        },
    };
    let hit_rate = (gold_total > 0).then(|| gold_hits as f64 / gold_total as f64);
    let _ = label;
    Ok((scores, per_sample, hit_rate, traces))
}

/// Runs every labeled configuration over the same samples. A failing row is
/// recorded in place and the run continues. With `trace_dir` set, each row's
/// traces are archived to `<label>.traces.jsonl` there.
pub fn run_ablation(
    samples: &[EvalSample],
    grid: &[(String, PipelineConfig)],
    harness: &EvalHarness<'_>,
    trace_dir: Option<&Path>,
) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("ablation grid must be non-empty".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("test set must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (label, config) in grid {
        match run_row(label, config, samples, harness) {
            Ok((scores, per_sample, hit_rate, traces)) => {
                if let Some(dir) = trace_dir {
                    std::fs::create_dir_all(dir)?;
                    let mut lines = String::new();
                    for trace in &traces {
                        lines.push_str(&serde_json::to_string(trace)?);
                        lines.push('\n');
                    }
                    std::fs::write(dir.join(format!("{label}.traces.jsonl")), lines)?;
                }
                rows.push(AblationRow {
                    label: label.clone(),
                    config: config.clone(),
                    weights: config.reward_weights,
                    scores: Some(scores),
                    per_sample,
                    retrieval_hit_rate: hit_rate,
                    error: None,
                });
            }
            Err(e) => rows.push(AblationRow {
                label: label.clone(),
                config: config.clone(),
                weights: config.reward_weights,
                scores: None,
                per_sample: Vec::new(),
                retrieval_hit_rate: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(EvalReport {
        seed: harness.seed,
        reference_baselines: reference_baselines(),
        rows,
    })
}

/// One lambda sweep row: reward statistics of the fixed rollouts under that
/// fusion weight, plus the (lambda-independent) judge scores of the same
/// rollouts.
#[derive(Debug, Clone, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub mean_hser: f64,
    pub mean_sser: f64,
    pub mean_fused: f64,
    pub scores: MetricScores,
}

/// Generates rollouts once through the fixed pipeline configuration, then
/// scores the fused reward under each lambda. Samples must carry both
/// `reference_answer` (for the HSER components) and `annotated_rewrite`
/// (for SSER).
pub fn lambda_sweep(
    samples: &[EvalSample],
    lambdas: &[f64],
    config: &PipelineConfig,
    harness: &EvalHarness<'_>,
) -> Result<Vec<LambdaRow>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("lambda sweep needs at least one value".into()));
    }
    let mut seen = Vec::new();
    for lambda in lambdas {
        if !lambda.is_finite() || *lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid lambda {lambda}")));
        }
        if seen.contains(lambda) {
            return Err(Error::InvalidArgument(format!("duplicate lambda {lambda}")));
        }
        seen.push(*lambda);
    }

    let (scores, per_sample, _, traces) = run_row("lambda-sweep", config, samples, harness)?;
    let _ = per_sample;
    let mut rollouts = Vec::with_capacity(samples.len());
    for (sample, trace) in samples.iter().zip(&traces) {
        let reference_answer = sample.reference_answer.clone().ok_or_else(|| {
            Error::InvalidArgument("lambda sweep samples need reference_answer".into())
        })?;
        let annotated_rewrite = sample.annotated_rewrite.clone().ok_or_else(|| {
            Error::InvalidArgument("lambda sweep samples need annotated_rewrite".into())
        })?;
        let contents = prompts::extract_knowledge_section(&trace.assembled_prompt)
            .map(|s| vec![s.to_string()])
            .unwrap_or_default();
        rollouts.push(RolloutSample {
            rewritten_query: trace
                .rewritten_query
                .clone()
                .unwrap_or_else(|| sample.query.clone()),
            predicted_answer: trace.response.clone(),
            reference_answer,
            retrieved_contents: contents,
            annotated_rewrite: Some(annotated_rewrite),
        });
    }

    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let weights = RewardWeights {
            lambda,
            ..config.reward_weights
        };
        let mut sum_hser = 0.0;
        let mut sum_sser = 0.0;
        let mut sum_fused = 0.0;
        for rollout in &rollouts {
            let breakdown = score_rollout(rollout, &weights)?;
            sum_hser += breakdown.hser;
            sum_sser += breakdown.sser.unwrap_or(0.0);
            sum_fused += breakdown.fused;
        }
        let n = rollouts.len() as f64;
        rows.push(LambdaRow {
            lambda,
            mean_hser: sum_hser / n,
            mean_sser: sum_sser / n,
            mean_fused: sum_fused / n,
            scores: scores.clone(),
        });
    }
    Ok(rows)
}

/// Fraction of gold-annotated samples whose golden chunks include a chunk of
/// the gold document, under the given configuration. The hermetic stand-in
/// for judge-based retrieval quality.
pub fn retrieval_hit_rate(
    samples: &[EvalSample],
    config: &PipelineConfig,
    harness: &EvalHarness<'_>,
) -> Result<f64> {
    if !samples.iter().any(|s| s.gold_doc_id.is_some()) {
        return Err(Error::InvalidArgument(
            "retrieval_hit_rate needs gold_doc_id annotations".into(),
        ));
    }
    let (_, _, hit_rate, _) = run_row("hit-rate", config, samples, harness)?;
    hit_rate.ok_or_else(|| Error::InvalidArgument("no gold-annotated samples".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::stub::{
        HashedBagEmbedder, ScriptedChatClient, StubJudge, StubResponder,
        TaxonomyOverlapClassifier,
    };
    use crate::rerank::RetrievedDocument;
    use chrono::TimeZone;

    #[test]
    fn judge_parses_scores_and_drops_after_two_failures() {
        let judge = ScriptedChatClient::new(vec!["score: 85".into()]);
        let ctx = JudgeContext {
            response: "resp",
            query: Some("q"),
            ..JudgeContext::default()
        };
        assert_eq!(judge_score(Metric::Qa, &ctx, &judge).unwrap(), Some(85.0));

        let judge = ScriptedChatClient::new(vec!["ninety".into(), "ninety".into()]);
        assert_eq!(judge_score(Metric::Qa, &ctx, &judge).unwrap(), None);
        assert_eq!(judge.call_count(), 2);

        let judge = ScriptedChatClient::new(vec!["score: 300".into()]);
        assert_eq!(judge_score(Metric::Qa, &ctx, &judge).unwrap(), Some(100.0));

        // missing required field is an error
        let judge = ScriptedChatClient::new(vec!["score: 10".into()]);
        let bare = JudgeContext {
            response: "resp",
            ..JudgeContext::default()
        };
        assert!(judge_score(Metric::Qa, &bare, &judge).is_err());
    }

    #[test]
    fn scripted_batch_means_are_arithmetic() {
        let judge = ScriptedChatClient::new(vec![
            "score: 80".into(),
            "score: 90".into(),
            "score: 100".into(),
        ]);
        let ctx = JudgeContext {
            response: "r",
            query: Some("q"),
            ..JudgeContext::default()
        };
        let scores: Vec<f64> = (0..3)
            .map(|_| judge_score(Metric::Qa, &ctx, &judge).unwrap().unwrap())
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert_eq!(mean, 90.0);
    }

    fn sample(query: &str, history_text: &str, gold: Option<&str>, rewrite: Option<&str>) -> EvalSample {
        EvalSample {
            history: vec![
                SampleTurn { role: "user".into(), text: history_text.into() },
                SampleTurn { role: "assistant".into(), text: "noted".into() },
            ],
            query: query.into(),
            timestamp: chrono::Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
            gold_doc_id: gold.map(String::from),
            annotated_rewrite: rewrite.map(String::from),
            reference_answer: Some("a reference answer".into()),
            user_id: None,
        }
    }

    struct TestWorld {
        embedder: HashedBagEmbedder,
        responder: StubResponder,
        judge: StubJudge,
        classifier: TaxonomyOverlapClassifier,
        kb: KnowledgeBase,
    }

    impl TestWorld {
        fn new() -> Self {
            let embedder = HashedBagEmbedder::new(256);
            let kb = KnowledgeBase::from_documents(
                vec![
                    RetrievedDocument {
                        doc_id: "doc-a".into(),
                        title: "Croissants".into(),
                        body: "lamination butter folding technique pastry".into(),
                    },
                    RetrievedDocument {
                        doc_id: "doc-b".into(),
                        title: "Espresso".into(),
                        body: "grind size extraction pressure crema".into(),
                    },
                ],
                &embedder,
            )
            .unwrap();
            TestWorld {
                embedder,
                responder: StubResponder::new(9),
                judge: StubJudge::new(9),
                classifier: TaxonomyOverlapClassifier::new(&TopicTaxonomy::shipped_default()),
                kb,
            }
        }

        fn harness<'a>(&'a self, rewriter: &'a dyn ChatClient) -> EvalHarness<'a> {
            EvalHarness {
                rewriter,
                responder: &self.responder,
                judge: &self.judge,
                embedder: &self.embedder,
                classifier: &self.classifier,
                kb: &self.kb,
                taxonomy: TopicTaxonomy::shipped_default(),
                account: AccountMeta {
                    biz_id: "biz".into(),
                    agent: "Cafe Notes, baking and coffee".into(),
                },
                meta_prompt: "You are the cafe assistant. ".into(),
                comments: "(none)".into(),
                seed: 9,
            }
        }
    }

    fn fixture_samples() -> Vec<EvalSample> {
        vec![
            sample(
                "how do I laminate it",
                "I am practicing croissant pastry lamination",
                Some("doc-a"),
                Some("how do I laminate croissant pastry butter folding"),
            ),
            sample(
                "what grind should it use",
                "my espresso tastes sour lately",
                Some("doc-b"),
                Some("what grind size for sour espresso extraction"),
            ),
        ]
    }

    #[test]
    fn ablation_reports_are_deterministic_and_complete() {
        let world = TestWorld::new();
        let samples = fixture_samples();
        let rewriter = stub_rewriter_for(&samples);
        let harness = world.harness(&rewriter);
        let grid = vec![
            ("native".to_string(), PipelineConfig::native_rag()),
            ("stm".to_string(), PipelineConfig::stm_rag()),
        ];
        let report = run_ablation(&samples, &grid, &harness, None).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            let scores = row.scores.as_ref().unwrap();
            assert_eq!(scores.n_samples, 2);
            assert!(row.error.is_none());
        }
        // QR is only produced when the rewriter ran
        assert!(report.rows[0].scores.as_ref().unwrap().qr.is_none());
        assert!(report.rows[1].scores.as_ref().unwrap().qr.is_some());

        let rewriter2 = stub_rewriter_for(&samples);
        let harness2 = world.harness(&rewriter2);
        let report2 = run_ablation(&samples, &grid, &harness2, None).unwrap();
        assert_eq!(report.to_json().unwrap(), report2.to_json().unwrap());
        assert_eq!(report.to_csv().unwrap(), report2.to_csv().unwrap());
    }

    #[test]
    fn reported_means_match_archived_per_sample_scores() {
        let world = TestWorld::new();
        let samples = fixture_samples();
        let rewriter = stub_rewriter_for(&samples);
        let harness = world.harness(&rewriter);
        let grid = vec![("stm".to_string(), PipelineConfig::stm_rag())];
        let report = run_ablation(&samples, &grid, &harness, None).unwrap();
        let row = &report.rows[0];
        let scores = row.scores.as_ref().unwrap();
        let recompute = |pick: fn(&SampleScores) -> Option<f64>| -> f64 {
            let values: Vec<f64> = row.per_sample.iter().filter_map(pick).collect();
            values.iter().sum::<f64>() / values.len() as f64
        };
        assert!((scores.ca - recompute(|s| s.ca)).abs() <= 1e-9);
        assert!((scores.qa - recompute(|s| s.qa)).abs() <= 1e-9);
        assert!((scores.qr.unwrap() - recompute(|s| s.qr)).abs() <= 1e-9);
    }

    #[test]
    fn lambda_sweep_is_affine_and_matches_hser_at_zero() {
        let world = TestWorld::new();
        let samples = fixture_samples();
        let rewriter = stub_rewriter_for(&samples);
        let harness = world.harness(&rewriter);
        let rows = lambda_sweep(
            &samples,
            &[0.0, 0.25, 0.5, 1.0],
            &PipelineConfig::stm_rag(),
            &harness,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].mean_fused, rows[0].mean_hser);
        // sser > 0 for these fixtures, so fused strictly increases
        for pair in rows.windows(2) {
            assert!(pair[1].mean_fused > pair[0].mean_fused);
        }
        // identical rollouts: judge scores identical across lambdas
        assert_eq!(rows[0].scores, rows[3].scores);

        assert!(lambda_sweep(&samples, &[], &PipelineConfig::stm_rag(), &harness).is_err());
        assert!(lambda_sweep(&samples, &[0.1, 0.1], &PipelineConfig::stm_rag(), &harness).is_err());
    }

    #[test]
    fn hit_rate_requires_gold_annotations() {
        let world = TestWorld::new();
        let mut samples = fixture_samples();
        let rewriter = stub_rewriter_for(&samples);
        let harness = world.harness(&rewriter);
        let rate = retrieval_hit_rate(&samples, &PipelineConfig::stm_rag(), &harness).unwrap();
        assert!((0.0..=1.0).contains(&rate));

        for sample in &mut samples {
            sample.gold_doc_id = None;
        }
        assert!(retrieval_hit_rate(&samples, &PipelineConfig::stm_rag(), &harness).is_err());
    }
}

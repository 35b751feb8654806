//! Attention-inspired rerank: chunk pre-retrieved documents, score every
//! chunk by its mean cosine similarity to the user's recalled historical
//! queries, and keep the top-k "golden" chunks. A context budget then trims
//! the selection to a character limit.

use serde::{Deserialize, Serialize};

use crate::clients::EmbedderClient;
use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::store::MemoryRecord;

/// A document as returned by first-stage retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

/// A slice of one document. `embedding` stays unset until the rerank step
/// embeds the pooled chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredChunk {
    pub chunk: DocumentChunk,
    pub score: f64,
}

/// How chunk similarities against the recalled history are combined. The
/// mean matches the rerank definition; max is an experimental variant and is
/// never used unless explicitly configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    #[default]
    Mean,
    Max,
}

/// Chunking parameters. Split preference is paragraph break, then sentence
/// end, then a hard cut; overlap applies only to hard cuts since semantic
/// boundaries need no stitching. Sizes are in characters, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub max_chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        ChunkPolicy {
            max_chunk_chars: 512,
            overlap_chars: 64,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_chunk_chars == 0 {
            return Err(Error::InvalidConfig("max_chunk_chars must be positive".into()));
        }
        if self.overlap_chars >= self.max_chunk_chars {
            return Err(Error::InvalidConfig(format!(
                "overlap_chars ({}) must be smaller than max_chunk_chars ({})",
                self.overlap_chars, self.max_chunk_chars
            )));
        }
        Ok(())
    }
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？' | '\n')
}

/// Char-index spans of the chunks a body splits into.
fn chunk_spans(body: &str, policy: &ChunkPolicy) -> Result<Vec<(usize, usize)>> {
    policy.validate()?;
    let chars: Vec<char> = body.chars().collect();
    let total = chars.len();
    if total == 0 {
        return Ok(Vec::new());
    }
    let mut spans = Vec::new();
    let mut start = 0usize;
    loop {
        if total - start <= policy.max_chunk_chars {
            spans.push((start, total));
            break;
        }
        let window_end = start + policy.max_chunk_chars;
        // paragraph break: last "\n\n" whose tail still fits in the window
        let paragraph = (start..window_end.saturating_sub(1))
            .rev()
            .find(|&p| chars[p] == '\n' && chars[p + 1] == '\n')
            .map(|p| p + 2);
        let split = paragraph.or_else(|| {
            (start..window_end)
                .rev()
                .find(|&p| is_sentence_end(chars[p]))
                .map(|p| p + 1)
        });
        let (split_end, next_start) = match split {
            Some(end) => (end, end),
            None => (window_end, window_end - policy.overlap_chars),
        };
        spans.push((start, split_end));
        start = next_start;
    }
    Ok(spans)
}

/// Splits a document body into chunks of at most `max_chunk_chars`
/// characters, every body character landing in at least one chunk.
/// Deterministic: identical inputs produce byte-identical chunk lists.
pub fn chunk_document(doc: &RetrievedDocument, policy: &ChunkPolicy) -> Result<Vec<DocumentChunk>> {
    let byte_offsets: Vec<usize> = doc.body.char_indices().map(|(offset, _)| offset).collect();
    let byte_at = |char_pos: usize| -> usize {
        byte_offsets.get(char_pos).copied().unwrap_or(doc.body.len())
    };
    Ok(chunk_spans(&doc.body, policy)?
        .into_iter()
        .enumerate()
        .map(|(chunk_index, (from, to))| DocumentChunk {
            doc_id: doc.doc_id.clone(),
            chunk_index,
            text: doc.body[byte_at(from)..byte_at(to)].to_string(),
            embedding: None,
        })
        .collect())
}

/// Mean cosine similarity between one chunk embedding and the recalled
/// historical query embeddings. An empty history is an error: the caller
/// must take the no-memory fallback path instead of trusting a fake score.
pub fn attention_score(
    chunk_embedding: &EmbeddingVector,
    historical: &[EmbeddingVector],
) -> Result<f64> {
    aggregate_score(chunk_embedding, historical, ScoreAggregation::Mean)
}

fn aggregate_score(
    chunk_embedding: &EmbeddingVector,
    historical: &[EmbeddingVector],
    aggregation: ScoreAggregation,
) -> Result<f64> {
    if historical.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut sum = 0.0f64;
    let mut max = f64::NEG_INFINITY;
    for h in historical {
        let sim = cosine_similarity(chunk_embedding, h)?;
        sum += sim;
        max = max.max(sim);
    }
    Ok(match aggregation {
        ScoreAggregation::Mean => sum / historical.len() as f64,
        ScoreAggregation::Max => max,
    })
}

/// Result of a rerank pass. `no_memory_fallback` marks the new-user path in
/// which no historical queries existed: chunks are then passed through in
/// original (doc order, chunk order) with zero scores.
#[derive(Debug, Clone, Serialize)]
pub struct RerankOutput {
    pub chunks: Vec<ScoredChunk>,
    pub no_memory_fallback: bool,
}

/// Pools the chunks of all documents, embeds and scores them against the
/// historical queries, and returns the top-k by score (ties: lower doc_id,
/// then lower chunk_index). Asking for more chunks than exist returns them
/// all.
pub fn rerank_top_k(
    docs: &[RetrievedDocument],
    historical: &[MemoryRecord],
    k: usize,
    policy: &ChunkPolicy,
    embedder: &dyn EmbedderClient,
    aggregation: ScoreAggregation,
) -> Result<RerankOutput> {
    if k == 0 {
        return Err(Error::InvalidArgument("rerank requires k >= 1".into()));
    }
    let mut pooled = Vec::new();
    for doc in docs {
        pooled.extend(chunk_document(doc, policy)?);
    }

    if historical.is_empty() {
        pooled.truncate(k);
        return Ok(RerankOutput {
            chunks: pooled
                .into_iter()
                .map(|chunk| ScoredChunk { chunk, score: 0.0 })
                .collect(),
            no_memory_fallback: true,
        });
    }

    let history_embeddings: Vec<EmbeddingVector> =
        historical.iter().map(|r| r.embedding.clone()).collect();
    let texts: Vec<String> = pooled.iter().map(|c| c.text.clone()).collect();
    let embeddings = embedder.embed_batch(&texts)?;

    let mut scored = Vec::with_capacity(pooled.len());
    for (mut chunk, embedding) in pooled.into_iter().zip(embeddings) {
        let score = aggregate_score(&embedding, &history_embeddings, aggregation)?;
        chunk.embedding = Some(embedding);
        scored.push(ScoredChunk { chunk, score });
    }
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.chunk.doc_id.cmp(&b.chunk.doc_id))
            .then(a.chunk.chunk_index.cmp(&b.chunk.chunk_index))
    });
    scored.truncate(k);
    Ok(RerankOutput {
        chunks: scored,
        no_memory_fallback: false,
    })
}

/// Marker appended to a chunk cut down by the context budget.
pub const TRUNCATION_MARKER: char = '…';

/// Keeps the longest score-ordered prefix whose total text length fits in
/// `max_chars` characters. When even the top chunk does not fit, that single
/// chunk is truncated and marked with an ellipsis so the caller always has
/// some context to assemble.
pub fn context_budget(golden: &[ScoredChunk], max_chars: usize) -> Vec<ScoredChunk> {
    let mut kept = Vec::new();
    let mut used = 0usize;
    for item in golden {
        let len = item.chunk.text.chars().count();
        if used + len > max_chars {
            break;
        }
        used += len;
        kept.push(item.clone());
    }
    if kept.is_empty() {
        if let Some(top) = golden.first() {
            let mut truncated = top.clone();
            truncated.chunk.text = top
                .chunk
                .text
                .chars()
                .take(max_chars.saturating_sub(1))
                .chain(std::iter::once(TRUNCATION_MARKER))
                .collect();
            kept.push(truncated);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::stub::FixedEmbedder;
    use crate::taxonomy::PartitionKey;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn doc(id: &str, body: &str) -> RetrievedDocument {
        RetrievedDocument {
            doc_id: id.to_string(),
            title: format!("title-{id}"),
            body: body.to_string(),
        }
    }

    fn policy(max: usize, overlap: usize) -> ChunkPolicy {
        ChunkPolicy {
            max_chunk_chars: max,
            overlap_chars: overlap,
        }
    }

    fn record(id: u64, embedding: EmbeddingVector) -> MemoryRecord {
        MemoryRecord {
            record_id: id,
            user_id: "u1".into(),
            query_text: format!("q{id}"),
            partition: PartitionKey::fallback(),
            embedding,
            timestamp: chrono::Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
        }
    }

    fn random_unit(rng: &mut StdRng, dim: usize) -> EmbeddingVector {
        EmbeddingVector::normalized((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn short_body_is_one_chunk() {
        let body = "a".repeat(100);
        let chunks = chunk_document(&doc("d", &body), &policy(512, 64)).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, body);
        assert_eq!(chunks[0].chunk_index, 0);
    }

    #[test]
    fn hard_cut_uses_stride_of_max_minus_overlap() {
        let body = "a".repeat(1000);
        let chunks = chunk_document(&doc("d", &body), &policy(512, 64)).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].text.len(), 512);
        assert_eq!(chunks[1].text.len(), 512);
        // chunk 2 starts 448 chars after chunk 1's start
        assert_eq!(&body[448..960], chunks[1].text);
        assert_eq!(&body[896..1000], chunks[2].text);
    }

    #[test]
    fn paragraph_break_is_preferred_over_hard_cut() {
        let body = format!("{}\n\n{}", "a".repeat(300), "b".repeat(298));
        let chunks = chunk_document(&doc("d", &body), &policy(512, 64)).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].text, format!("{}\n\n", "a".repeat(300)));
        assert_eq!(chunks[1].text, "b".repeat(298));
    }

    #[test]
    fn sentence_end_is_preferred_over_hard_cut() {
        let body = format!("{}. {}", "a".repeat(299), "b".repeat(300));
        let chunks = chunk_document(&doc("d", &body), &policy(512, 64)).unwrap();
        assert_eq!(chunks[0].text, format!("{}.", "a".repeat(299)));
        assert!(chunks[1].text.starts_with(' '));
    }

    #[test]
    fn invalid_policy_is_rejected() {
        assert!(chunk_document(&doc("d", "x"), &policy(64, 64)).is_err());
        assert!(chunk_document(&doc("d", "x"), &policy(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn chunking_covers_every_character_within_limits(
            body in "[a-c \\n。]{1,400}",
            max in 8usize..64,
            overlap in 0usize..8
        ) {
            let policy = policy(max, overlap.min(max.saturating_sub(1)));
            let document = doc("d", &body);
            let chunks = chunk_document(&document, &policy).unwrap();
            let again = chunk_document(&document, &policy).unwrap();
            prop_assert_eq!(&chunks, &again);
            for chunk in &chunks {
                prop_assert!(chunk.text.chars().count() <= policy.max_chunk_chars);
            }
            // spans cover [0, len) contiguously (or with overlap): each span
            // starts at or before the previous end, and the last span ends
            // at the body end
            let spans = chunk_spans(&body, &policy).unwrap();
            prop_assert_eq!(spans.len(), chunks.len());
            let mut covered_to = 0usize;
            for (from, to) in &spans {
                prop_assert!(*from <= covered_to, "gap before {from}");
                prop_assert!(to > from);
                covered_to = covered_to.max(*to);
            }
            prop_assert_eq!(covered_to, body.chars().count());
            // span text matches the emitted chunk text
            let chars: Vec<char> = body.chars().collect();
            for ((from, to), chunk) in spans.iter().zip(&chunks) {
                let expect: String = chars[*from..*to].iter().collect();
                prop_assert_eq!(expect, chunk.text.clone());
            }
        }
    }

    #[test]
    fn attention_score_means_similarities() {
        let chunk = EmbeddingVector::unit(vec![1.0, 0.0]).unwrap();
        let identical = vec![chunk.clone()];
        assert!((attention_score(&chunk, &identical).unwrap() - 1.0).abs() <= 1e-12);

        let historical = vec![
            EmbeddingVector::unit(vec![0.2, (1.0f64 - 0.04).sqrt()]).unwrap(),
            EmbeddingVector::unit(vec![0.8, 0.6]).unwrap(),
        ];
        let score = attention_score(&chunk, &historical).unwrap();
        assert!((score - 0.5).abs() <= 1e-12, "score = {score}");

        assert!(matches!(
            attention_score(&chunk, &[]),
            Err(Error::EmptyHistory)
        ));
    }

    #[test]
    fn attention_score_matches_direct_summation() {
        let mut rng = StdRng::seed_from_u64(3);
        let chunk = random_unit(&mut rng, 16);
        let historical: Vec<EmbeddingVector> =
            (0..5).map(|_| random_unit(&mut rng, 16)).collect();
        let expected: f64 = historical
            .iter()
            .map(|h| {
                h.values()
                    .iter()
                    .zip(chunk.values())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / historical.len() as f64;
        let got = attention_score(&chunk, &historical).unwrap();
        assert!((got - expected).abs() <= 1e-12);
    }

    #[test]
    fn single_chunk_is_returned_for_any_k() {
        let mut rng = StdRng::seed_from_u64(4);
        let body = "only one chunk";
        let chunk_vec = random_unit(&mut rng, 8);
        let embedder = FixedEmbedder::new(vec![(body.to_string(), chunk_vec)], 8);
        let history = vec![record(1, random_unit(&mut rng, 8))];
        let out = rerank_top_k(
            &[doc("d", body)],
            &history,
            7,
            &policy(512, 64),
            &embedder,
            ScoreAggregation::Mean,
        )
        .unwrap();
        assert_eq!(out.chunks.len(), 1);
        assert!(!out.no_memory_fallback);
        assert_eq!(out.chunks[0].chunk.text, body);
    }

    #[test]
    fn empty_history_falls_back_to_document_order() {
        let docs = vec![doc("a", "first body"), doc("b", "second body")];
        let embedder = FixedEmbedder::new(vec![], 8);
        let out = rerank_top_k(
            &docs,
            &[],
            2,
            &policy(512, 64),
            &embedder,
            ScoreAggregation::Mean,
        )
        .unwrap();
        assert!(out.no_memory_fallback);
        assert_eq!(out.chunks.len(), 2);
        assert_eq!(out.chunks[0].chunk.doc_id, "a");
        assert_eq!(out.chunks[1].chunk.doc_id, "b");
    }

    /// Brute-force oracle: raw dot products, mean, full sort with tie-break.
    fn rerank_oracle(
        chunk_vectors: &[(String, usize, EmbeddingVector)],
        history: &[EmbeddingVector],
        k: usize,
    ) -> Vec<(String, usize)> {
        let mut scored: Vec<(f64, String, usize)> = chunk_vectors
            .iter()
            .map(|(doc_id, index, v)| {
                let mean = history
                    .iter()
                    .map(|h| {
                        h.values()
                            .iter()
                            .zip(v.values())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            .clamp(-1.0, 1.0)
                    })
                    .sum::<f64>()
                    / history.len() as f64;
                (mean, doc_id.clone(), *index)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        scored.into_iter().take(k).map(|(_, d, i)| (d, i)).collect()
    }

    #[test]
    fn rerank_matches_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..25 {
            let n_docs = rng.random_range(1..4usize);
            let mut docs = Vec::new();
            let mut table = Vec::new();
            let mut chunk_vectors = Vec::new();
            for d in 0..n_docs {
                // several short sentences so chunking yields a few chunks each
                let n_sentences = rng.random_range(1..4usize);
                let body: String = (0..n_sentences)
                    .map(|s| format!("{}.", format!("doc{d}sent{s}x").repeat(3)))
                    .collect::<Vec<_>>()
                    .join(" ");
                let document = doc(&format!("doc-{d}"), &body);
                for chunk in chunk_document(&document, &policy(40, 8)).unwrap() {
                    let v = random_unit(&mut rng, 8);
                    table.push((chunk.text.clone(), v.clone()));
                    chunk_vectors.push((chunk.doc_id.clone(), chunk.chunk_index, v));
                }
                docs.push(document);
            }
            let history: Vec<MemoryRecord> = (0..rng.random_range(1..6usize))
                .map(|i| record(i as u64 + 1, random_unit(&mut rng, 8)))
                .collect();
            let history_vecs: Vec<EmbeddingVector> =
                history.iter().map(|r| r.embedding.clone()).collect();
            let k = rng.random_range(1..6usize);

            let embedder = FixedEmbedder::new(table, 8);
            let out = rerank_top_k(
                &docs,
                &history,
                k,
                &policy(40, 8),
                &embedder,
                ScoreAggregation::Mean,
            )
            .unwrap();
            let got: Vec<(String, usize)> = out
                .chunks
                .iter()
                .map(|s| (s.chunk.doc_id.clone(), s.chunk.chunk_index))
                .collect();
            assert_eq!(got, rerank_oracle(&chunk_vectors, &history_vecs, k));
            // scores non-increasing
            for pair in out.chunks.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
        }
    }

    #[test]
    fn scaling_history_preserves_chunk_order() {
        let mut rng = StdRng::seed_from_u64(6);
        let body = "alpha beta. gamma delta. epsilon zeta. eta theta.";
        let document = doc("d", body);
        let chunks = chunk_document(&document, &policy(18, 4)).unwrap();
        let table: Vec<(String, EmbeddingVector)> = chunks
            .iter()
            .map(|c| (c.text.clone(), random_unit(&mut rng, 8)))
            .collect();
        let embedder = FixedEmbedder::new(table, 8);

        let history: Vec<MemoryRecord> = (0..3)
            .map(|i| record(i + 1, random_unit(&mut rng, 8)))
            .collect();
        let scaled: Vec<MemoryRecord> = history
            .iter()
            .cloned()
            .map(|mut r| {
                let values = r.embedding.values().iter().map(|v| v * 3.5).collect();
                r.embedding = EmbeddingVector::raw(values);
                r
            })
            .collect();

        let docs = std::slice::from_ref(&document);
        let base = rerank_top_k(docs, &history, 10, &policy(18, 4), &embedder, ScoreAggregation::Mean).unwrap();
        let after = rerank_top_k(docs, &scaled, 10, &policy(18, 4), &embedder, ScoreAggregation::Mean).unwrap();
        let order = |out: &RerankOutput| -> Vec<usize> {
            out.chunks.iter().map(|s| s.chunk.chunk_index).collect()
        };
        assert_eq!(order(&base), order(&after));
    }

    #[test]
    fn max_aggregation_takes_the_best_similarity() {
        let chunk = EmbeddingVector::unit(vec![1.0, 0.0]).unwrap();
        let historical = vec![
            EmbeddingVector::unit(vec![0.2, (1.0f64 - 0.04).sqrt()]).unwrap(),
            EmbeddingVector::unit(vec![0.8, 0.6]).unwrap(),
        ];
        let score = aggregate_score(&chunk, &historical, ScoreAggregation::Max).unwrap();
        assert!((score - 0.8).abs() <= 1e-12);
    }

    fn scored(texts: &[&str]) -> Vec<ScoredChunk> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| ScoredChunk {
                chunk: DocumentChunk {
                    doc_id: "d".into(),
                    chunk_index: i,
                    text: t.to_string(),
                    embedding: None,
                },
                score: 1.0 - i as f64 * 0.1,
            })
            .collect()
    }

    #[test]
    fn budget_keeps_everything_that_fits() {
        let golden = scored(&["aaaa", "bbbb"]);
        let kept = context_budget(&golden, 100);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn budget_cuts_after_exact_prefix() {
        // lengths 4,4,4,4,4; budget 8 fits exactly the top two
        let golden = scored(&["aaaa", "bbbb", "cccc", "dddd", "eeee"]);
        let kept = context_budget(&golden, 8);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[1].chunk.text, "bbbb");
    }

    #[test]
    fn budget_smaller_than_top_chunk_truncates_it() {
        let golden = scored(&["abcdefghij"]);
        let kept = context_budget(&golden, 5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].chunk.text, "abcd…");
        assert!(context_budget(&[], 5).is_empty());
    }
}

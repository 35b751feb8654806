//! Deterministic stub clients. Every stub is a pure function of its inputs
//! (and, where applicable, a construction-time seed), so pipelines built on
//! them are byte-reproducible across runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::clients::{ChatClient, ClassifierClient, EmbedderClient};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::taxonomy::{PartitionKey, TopicTaxonomy};
use crate::text::tokenize;

/// FNV-1a 64-bit. Used instead of the std hasher because the stubs must
/// produce identical output across processes and platforms.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed bag-of-tokens embedder: each token increments one of `dim` buckets
/// chosen by FNV hash, and the result is L2-normalized. Similarity between
/// two texts then reflects their token overlap, which keeps test fixtures
/// hand-checkable. Texts with no tokens map to the first basis vector.
pub struct HashedBagEmbedder {
    dim: usize,
}

impl HashedBagEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedder dimension must be positive");
        HashedBagEmbedder { dim }
    }
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        HashedBagEmbedder::new(256)
    }
}

impl EmbedderClient for HashedBagEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut values = vec![0.0f64; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            values[0] = 1.0;
            return EmbeddingVector::unit(values);
        }
        for token in tokens.tokens() {
            let bucket = (fnv1a_64(token.as_bytes()) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        EmbeddingVector::normalized(values)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("stub-hashed-bag-{}", self.dim)
    }
}

/// Embedder with a fixed text-to-vector table, for fixtures that need exact
/// control over every similarity. Unknown texts are an error.
pub struct FixedEmbedder {
    map: std::collections::HashMap<String, EmbeddingVector>,
    dim: usize,
}

impl FixedEmbedder {
    pub fn new(entries: Vec<(String, EmbeddingVector)>, dim: usize) -> Self {
        FixedEmbedder {
            map: entries.into_iter().collect(),
            dim,
        }
    }
}

impl EmbedderClient for FixedEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.map.get(text).cloned().ok_or_else(|| Error::InvalidArgument(
            format!("fixed embedder has no vector for {text:?}"),
        ))
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("stub-fixed-{}", self.dim)
    }
}

/// Replays a fixed list of replies in order. `repeating` repeats the final
/// reply once the script is exhausted; otherwise exhaustion is a transport
/// error. Records call count and prompts for test assertions.
pub struct ScriptedChatClient {
    replies: Vec<String>,
    repeat_last: bool,
    cursor: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedChatClient {
    pub fn new(replies: Vec<String>) -> Self {
        ScriptedChatClient {
            replies,
            repeat_last: false,
            cursor: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn repeating(replies: Vec<String>) -> Self {
        assert!(!replies.is_empty(), "repeating script needs at least one reply");
        ScriptedChatClient {
            replies,
            repeat_last: true,
            cursor: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedChatClient {
    fn generate(&self, prompt: &str) -> Result<String> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        let index = self.cursor.fetch_add(1, Ordering::SeqCst);
        if index < self.replies.len() {
            Ok(self.replies[index].clone())
        } else if self.repeat_last {
            Ok(self.replies.last().expect("non-empty script").clone())
        } else {
            Err(Error::Transport {
                message: format!("scripted client exhausted after {} replies", self.replies.len()),
                retryable: false,
            })
        }
    }

    fn model_name(&self) -> &str {
        "stub-scripted"
    }
}

/// Replies with the value of the first rule whose key is contained in the
/// prompt; otherwise with the default reply. Order-independent, so the same
/// client serves any number of interleaved pipelines.
pub struct KeyedChatClient {
    rules: Vec<(String, String)>,
    default_reply: String,
    calls: AtomicUsize,
}

impl KeyedChatClient {
    pub fn new(rules: Vec<(String, String)>, default_reply: impl Into<String>) -> Self {
        KeyedChatClient {
            rules,
            default_reply: default_reply.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for KeyedChatClient {
    fn generate(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        for (key, reply) in &self.rules {
            if prompt.contains(key.as_str()) {
                return Ok(reply.clone());
            }
        }
        Ok(self.default_reply.clone())
    }

    fn model_name(&self) -> &str {
        "stub-keyed"
    }
}

/// Identity rewriter: extracts the current query from the rewrite prompt and
/// returns it unchanged in the documented reply format. The neutral stub for
/// runs that exercise the rewrite stage without a trained rewriter.
pub struct EchoRewriter;

impl ChatClient for EchoRewriter {
    fn generate(&self, prompt: &str) -> Result<String> {
        let query = prompt
            .lines()
            .find_map(|line| line.strip_prefix("User's current query: "))
            .unwrap_or("");
        Ok(serde_json::json!({ "query_rewrited": query }).to_string())
    }

    fn model_name(&self) -> &str {
        "stub-echo-rewriter"
    }
}

/// Deterministic stand-in for the black-box responder: replies with a short
/// message derived from the user question found in the prompt plus a stable
/// hash tag of the full prompt.
pub struct StubResponder {
    seed: u64,
}

impl StubResponder {
    pub fn new(seed: u64) -> Self {
        StubResponder { seed }
    }

    fn question_of(prompt: &str) -> &str {
        match prompt.rfind(crate::prompts::QUESTION_MARKER) {
            Some(pos) => prompt[pos + crate::prompts::QUESTION_MARKER.len()..].trim(),
            None => "",
        }
    }
}

impl ChatClient for StubResponder {
    fn generate(&self, prompt: &str) -> Result<String> {
        let tag = fnv1a_64(prompt.as_bytes()) ^ self.seed;
        let question = Self::question_of(prompt);
        Ok(format!("From the referenced articles, regarding '{question}': [{tag:016x}]"))
    }

    fn model_name(&self) -> &str {
        "stub-responder"
    }
}

/// Deterministic judge: emits "score: N" with N in 0..=100 derived from the
/// prompt hash and a seed.
pub struct StubJudge {
    seed: u64,
}

impl StubJudge {
    pub fn new(seed: u64) -> Self {
        StubJudge { seed }
    }
}

impl ChatClient for StubJudge {
    fn generate(&self, prompt: &str) -> Result<String> {
        let n = (fnv1a_64(prompt.as_bytes()) ^ self.seed) % 101;
        Ok(format!("score: {n}"))
    }

    fn model_name(&self) -> &str {
        "stub-judge"
    }
}

/// Simulated end user for dialogue generation: asks follow-up questions and
/// flags `is_solved` on the configured call number (1-based).
pub struct SimUserClient {
    solve_on_call: Option<usize>,
    calls: AtomicUsize,
}

impl SimUserClient {
    pub fn new(solve_on_call: Option<usize>) -> Self {
        SimUserClient {
            solve_on_call,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatClient for SimUserClient {
    fn generate(&self, prompt: &str) -> Result<String> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let solved = self.solve_on_call.is_some_and(|k| call >= k);
        let tag = fnv1a_64(prompt.as_bytes()) % 1000;
        let answer = if solved {
            format!("Thanks, that answers my question. [u{tag:03}]")
        } else {
            format!("Could you go into more detail on that? [u{tag:03}]")
        };
        Ok(format!(
            "{{\"is_solved\": {solved}, \"user_answer\": \"{answer}\"}}"
        ))
    }

    fn model_name(&self) -> &str {
        "stub-sim-user"
    }
}

/// Simulated account agent for dialogue generation: answers and flags
/// `is_last_turn` on the configured call number (1-based).
pub struct SimAgentClient {
    last_turn_on_call: Option<usize>,
    calls: AtomicUsize,
}

impl SimAgentClient {
    pub fn new(last_turn_on_call: Option<usize>) -> Self {
        SimAgentClient {
            last_turn_on_call,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatClient for SimAgentClient {
    fn generate(&self, prompt: &str) -> Result<String> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let last = self.last_turn_on_call.is_some_and(|k| call >= k);
        let tag = fnv1a_64(prompt.as_bytes()) % 1000;
        Ok(format!(
            "{{\"is_last_turn\": {last}, \"biz_answer\": \"Here is what I can share on that point. [a{tag:03}]\"}}"
        ))
    }

    fn model_name(&self) -> &str {
        "stub-sim-agent"
    }
}

/// Keyword-table classifier: the first rule whose keyword appears in the
/// normalized query wins. Unmatched queries return the raw fallback label,
/// which callers remap to the fallback partition.
pub struct KeywordClassifier {
    rules: Vec<(String, (String, String))>,
}

impl KeywordClassifier {
    pub fn new(rules: Vec<(String, (String, String))>) -> Self {
        KeywordClassifier { rules }
    }
}

impl ClassifierClient for KeywordClassifier {
    fn classify(&self, query: &str) -> Result<(String, String)> {
        let normalized = crate::text::normalize_text(query);
        for (keyword, label) in &self.rules {
            if normalized.contains(keyword.as_str()) {
                return Ok(label.clone());
            }
        }
        Ok((String::new(), String::new()))
    }
}

/// Taxonomy-driven classifier: picks the (category, subtopic) pair whose
/// names share the most tokens with the query; ties resolve to the earliest
/// pair in taxonomy order. Queries with no overlap return an out-of-taxonomy
/// label so they land in the fallback partition.
pub struct TaxonomyOverlapClassifier {
    pairs: Vec<(PartitionKey, Vec<String>)>,
}

impl TaxonomyOverlapClassifier {
    pub fn new(taxonomy: &TopicTaxonomy) -> Self {
        let pairs = taxonomy
            .pairs()
            .map(|key| {
                let tokens = tokenize(&format!("{} {}", key.topic, key.subtopic))
                    .tokens()
                    .to_vec();
                (key, tokens)
            })
            .collect();
        TaxonomyOverlapClassifier { pairs }
    }
}

impl ClassifierClient for TaxonomyOverlapClassifier {
    fn classify(&self, query: &str) -> Result<(String, String)> {
        let query_tokens = tokenize(query);
        let mut best: Option<(usize, &PartitionKey)> = None;
        for (key, tokens) in &self.pairs {
            let overlap = tokens
                .iter()
                .filter(|t| query_tokens.tokens().contains(t))
                .count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, key));
            }
        }
        match best {
            Some((_, key)) => Ok((key.topic.clone(), key.subtopic.clone())),
            None => Ok((String::new(), String::new())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;

    #[test]
    fn hashed_bag_embedder_is_deterministic_and_unit_norm() {
        let embedder = HashedBagEmbedder::new(64);
        let a = embedder.embed("the weather in tokyo").unwrap();
        let b = embedder.embed("the weather in tokyo").unwrap();
        assert_eq!(a, b);
        assert!((a.l2_norm() - 1.0).abs() <= 1e-9);
        assert!(a.is_unit_norm());
    }

    #[test]
    fn identical_texts_embed_to_similarity_one() {
        let embedder = HashedBagEmbedder::default();
        let a = embedder.embed("boundary setting with coworkers").unwrap();
        let b = embedder.embed("Boundary setting, with coworkers!").unwrap();
        let sim = cosine_similarity(&a, &b).unwrap();
        assert!((sim - 1.0).abs() <= 1e-9, "normalization-equal texts, sim = {sim}");
    }

    #[test]
    fn empty_text_embeds_to_basis_vector() {
        let embedder = HashedBagEmbedder::new(8);
        let v = embedder.embed("  !! ").unwrap();
        assert_eq!(v.values()[0], 1.0);
    }

    #[test]
    fn scripted_client_replays_and_errors_on_exhaustion() {
        let client = ScriptedChatClient::new(vec!["one".into(), "two".into()]);
        assert_eq!(client.generate("p1").unwrap(), "one");
        assert_eq!(client.generate("p2").unwrap(), "two");
        assert!(client.generate("p3").is_err());
        assert_eq!(client.call_count(), 3);
        assert_eq!(client.prompts(), vec!["p1", "p2", "p3"]);
    }

    #[test]
    fn keyed_client_matches_first_rule() {
        let client = KeyedChatClient::new(
            vec![
                ("alpha".into(), "A".into()),
                ("beta".into(), "B".into()),
            ],
            "D",
        );
        assert_eq!(client.generate("has beta inside").unwrap(), "B");
        assert_eq!(client.generate("nothing").unwrap(), "D");
    }

    #[test]
    fn keyword_classifier_uses_its_table() {
        let classifier = KeywordClassifier::new(vec![(
            "station".into(),
            ("Directions & Navigation".into(), "Landmark orientation".into()),
        )]);
        let label = classifier.classify("how do I get to the station").unwrap();
        assert_eq!(label.0, "Directions & Navigation");
        assert_eq!(label.1, "Landmark orientation");
        assert_eq!(classifier.classify("unrelated").unwrap().0, "");
    }

    #[test]
    fn overlap_classifier_matches_taxonomy_words() {
        let taxonomy = TopicTaxonomy::shipped_default();
        let classifier = TaxonomyOverlapClassifier::new(&taxonomy);
        let (topic, _) = classifier.classify("what payment methods do you accept").unwrap();
        assert_eq!(topic, "Shopping");
        assert_eq!(classifier.classify("zzz qqq").unwrap().0, "");
    }
}

//! Knowledge base: the account's document corpus for first-stage retrieval.
//!
//! Documents come from a JSONL file of `{doc_id, title, body}` objects.
//! Whole-document embeddings are computed at load time and can be cached in
//! a sidecar file keyed by embedder identity and content hash, so re-ingests
//! only embed changed documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::EmbedderClient;
use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::rerank::RetrievedDocument;

#[derive(Serialize, Deserialize)]
struct SidecarCache {
    embedder: String,
    dim: usize,
    /// content hash (hex) -> embedding values
    vectors: BTreeMap<String, Vec<f64>>,
}

fn content_hash(doc: &RetrievedDocument) -> String {
    let digest = Sha256::digest(format!("{}\u{1f}{}", doc.title, doc.body).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct KnowledgeBase {
    docs: Vec<RetrievedDocument>,
    embeddings: Vec<EmbeddingVector>,
    embedder_identity: String,
}

impl KnowledgeBase {
    /// Builds a knowledge base from in-memory documents.
    pub fn from_documents(
        docs: Vec<RetrievedDocument>,
        embedder: &dyn EmbedderClient,
    ) -> Result<Self> {
        Self::build(docs, embedder, None)
    }

    /// Loads a JSONL corpus, embedding every document. With `use_cache`, a
    /// `<path>.embcache.json` sidecar is consulted and refreshed.
    pub fn load(
        path: impl AsRef<Path>,
        embedder: &dyn EmbedderClient,
        use_cache: bool,
    ) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path)?;
        let mut docs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (line_no, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: RetrievedDocument = serde_json::from_str(line).map_err(|e| {
                Error::InvalidArgument(format!(
                    "bad knowledge-base record at {}:{}: {e}",
                    path.display(),
                    line_no + 1
                ))
            })?;
            if doc.body.trim().is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "document '{}' has an empty body",
                    doc.doc_id
                )));
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate doc_id '{}'",
                    doc.doc_id
                )));
            }
            docs.push(doc);
        }
        let cache_path = use_cache.then(|| sidecar_path(path));
        Self::build(docs, embedder, cache_path)
    }

    fn build(
        docs: Vec<RetrievedDocument>,
        embedder: &dyn EmbedderClient,
        cache_path: Option<PathBuf>,
    ) -> Result<Self> {
        let identity = embedder.identity();
        let mut cached: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        if let Some(path) = &cache_path {
            if let Ok(content) = std::fs::read_to_string(path) {
                if let Ok(sidecar) = serde_json::from_str::<SidecarCache>(&content) {
                    if sidecar.embedder == identity && sidecar.dim == embedder.dimension() {
                        cached = sidecar.vectors;
                    }
                }
            }
        }

        let mut embeddings = Vec::with_capacity(docs.len());
        let mut fresh = false;
        for doc in &docs {
            let hash = content_hash(doc);
            let embedding = match cached.get(&hash) {
                Some(values) => EmbeddingVector::unit(values.clone())?,
                None => {
                    let embedding = embedder.embed(&format!("{}\n{}", doc.title, doc.body))?;
                    cached.insert(hash, embedding.values().to_vec());
                    fresh = true;
                    embedding
                }
            };
            embeddings.push(embedding);
        }

        if let Some(path) = &cache_path {
            if fresh {
                let sidecar = SidecarCache {
                    embedder: identity.clone(),
                    dim: embedder.dimension(),
                    vectors: cached,
                };
                std::fs::write(path, serde_json::to_string_pretty(&sidecar)?)?;
            }
        }

        Ok(KnowledgeBase {
            docs,
            embeddings,
            embedder_identity: identity,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[RetrievedDocument] {
        &self.docs
    }

    pub fn embedder_identity(&self) -> &str {
        &self.embedder_identity
    }

    /// Top-r documents by cosine similarity between the query embedding and
    /// the whole-document embeddings. Deterministic: ties resolve to the
    /// lower doc_id. An empty knowledge base returns an empty list.
    pub fn retrieve(
        &self,
        query: &str,
        embedder: &dyn EmbedderClient,
        top_r: usize,
    ) -> Result<Vec<RetrievedDocument>> {
        if self.docs.is_empty() || top_r == 0 {
            return Ok(Vec::new());
        }
        let query_embedding = embedder.embed(query)?;
        let mut scored: Vec<(f64, &RetrievedDocument)> = self
            .docs
            .iter()
            .zip(&self.embeddings)
            .map(|(doc, embedding)| {
                cosine_similarity(embedding, &query_embedding).map(|sim| (sim, doc))
            })
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(top_r)
            .map(|(_, doc)| doc.clone())
            .collect())
    }
}

fn sidecar_path(kb_path: &Path) -> PathBuf {
    let mut name = kb_path.file_name().unwrap_or_default().to_os_string();
    name.push(".embcache.json");
    kb_path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::stub::HashedBagEmbedder;
    use std::io::Write;

    fn doc(id: &str, title: &str, body: &str) -> RetrievedDocument {
        RetrievedDocument {
            doc_id: id.into(),
            title: title.into(),
            body: body.into(),
        }
    }

    #[test]
    fn single_document_kb_returns_it() {
        let embedder = HashedBagEmbedder::new(64);
        let kb =
            KnowledgeBase::from_documents(vec![doc("d1", "t", "the only document")], &embedder)
                .unwrap();
        let hits = kb.retrieve("anything", &embedder, 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "d1");
    }

    #[test]
    fn query_matching_a_document_ranks_it_first() {
        let embedder = HashedBagEmbedder::new(256);
        let kb = KnowledgeBase::from_documents(
            vec![
                doc("a", "cats", "feline care and grooming habits"),
                doc("b", "bikes", "bicycle chain maintenance and repair"),
            ],
            &embedder,
        )
        .unwrap();
        let hits = kb
            .retrieve("bikes bicycle chain maintenance and repair", &embedder, 2)
            .unwrap();
        assert_eq!(hits[0].doc_id, "b");
    }

    #[test]
    fn retrieval_matches_brute_force_scan() {
        let embedder = HashedBagEmbedder::new(128);
        let docs: Vec<RetrievedDocument> = (0..20)
            .map(|i| {
                doc(
                    &format!("doc-{i:02}"),
                    &format!("title {i}"),
                    &format!("subject{} content word{} extra{}", i % 7, i % 5, i),
                )
            })
            .collect();
        let kb = KnowledgeBase::from_documents(docs.clone(), &embedder).unwrap();
        let query = "subject3 content word2";
        let query_embedding = embedder.embed(query).unwrap();
        let mut expected: Vec<(f64, String)> = docs
            .iter()
            .map(|d| {
                let e = embedder.embed(&format!("{}\n{}", d.title, d.body)).unwrap();
                let dot: f64 = e
                    .values()
                    .iter()
                    .zip(query_embedding.values())
                    .map(|(a, b)| a * b)
                    .sum();
                (dot, d.doc_id.clone())
            })
            .collect();
        expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let expected_ids: Vec<String> = expected.into_iter().take(5).map(|(_, id)| id).collect();

        let got: Vec<String> = kb
            .retrieve(query, &embedder, 5)
            .unwrap()
            .into_iter()
            .map(|d| d.doc_id)
            .collect();
        assert_eq!(got, expected_ids);
    }

    #[test]
    fn jsonl_load_validates_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let mut file = std::fs::File::create(&path).unwrap();
        writeln!(file, r#"{{"doc_id":"a","title":"t1","body":"first body"}}"#).unwrap();
        writeln!(file, r#"{{"doc_id":"b","title":"t2","body":"second body"}}"#).unwrap();
        drop(file);

        let embedder = HashedBagEmbedder::new(32);
        let kb = KnowledgeBase::load(&path, &embedder, true).unwrap();
        assert_eq!(kb.len(), 2);
        let sidecar = sidecar_path(&path);
        assert!(sidecar.exists());

        // second load hits the cache and produces the same embeddings
        let kb2 = KnowledgeBase::load(&path, &embedder, true).unwrap();
        assert_eq!(kb.embeddings, kb2.embeddings);

        // a different embedder identity invalidates the cache
        let other = HashedBagEmbedder::new(16);
        let kb3 = KnowledgeBase::load(&path, &other, true).unwrap();
        assert_eq!(kb3.embeddings[0].dimension(), 16);
    }

    #[test]
    fn duplicate_ids_and_empty_bodies_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"doc_id":"a","title":"t","body":"x"}"#,
                "\n",
                r#"{"doc_id":"a","title":"t","body":"y"}"#,
                "\n"
            ),
        )
        .unwrap();
        let embedder = HashedBagEmbedder::new(32);
        assert!(KnowledgeBase::load(&path, &embedder, false).is_err());

        std::fs::write(&path, r#"{"doc_id":"a","title":"t","body":"  "}"#).unwrap();
        assert!(KnowledgeBase::load(&path, &embedder, false).is_err());
    }

    #[test]
    fn empty_kb_retrieval_is_empty() {
        let embedder = HashedBagEmbedder::new(32);
        let kb = KnowledgeBase::from_documents(vec![], &embedder).unwrap();
        assert!(kb.retrieve("q", &embedder, 5).unwrap().is_empty());
    }
}

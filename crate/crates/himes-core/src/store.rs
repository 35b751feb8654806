//! Partitioned long-term memory over users' historical queries.
//!
//! Each stored query is classified into a (topic, subtopic) partition of the
//! active taxonomy and kept with its unit-norm embedding. Recall scans either
//! one partition or the whole store for a single user and ranks by cosine
//! similarity. Persistence is an append-only JSONL log per partition with the
//! in-memory index rebuilt on open.
//!
//! Concurrency contract: `&mut self` methods are the single writer, `&self`
//! methods are the readers; wrap the store in an `RwLock` to share it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::{ClassifierClient, EmbedderClient};
use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::taxonomy::{PartitionKey, TopicTaxonomy};

/// One stored historical query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub record_id: u64,
    pub user_id: String,
    pub query_text: String,
    pub partition: PartitionKey,
    pub embedding: EmbeddingVector,
    pub timestamp: DateTime<Utc>,
}

/// One recall hit. Lists returned by a recall call are sorted by similarity
/// descending, ties broken by newer timestamp first, then record id.
#[derive(Debug, Clone, Serialize)]
pub struct RecallResult {
    pub record: MemoryRecord,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecallScope {
    Global,
    Partition(PartitionKey),
}

/// Outcome of classifying a query against the taxonomy.
#[derive(Debug, Clone)]
pub struct Classification {
    pub partition: PartitionKey,
    pub warning: Option<String>,
}

/// Classifies a query into the taxonomy via the given client. Labels outside
/// the taxonomy (including the client's "don't know" answers) are remapped to
/// the reserved fallback partition with a warning. Empty queries skip the
/// client entirely.
pub fn classify_query(
    query: &str,
    taxonomy: &TopicTaxonomy,
    classifier: &dyn ClassifierClient,
) -> Result<Classification> {
    if crate::text::normalize_text(query).is_empty() {
        return Ok(Classification {
            partition: PartitionKey::fallback(),
            warning: Some("empty query routed to fallback partition".to_string()),
        });
    }
    let (topic, subtopic) = classifier.classify(query)?;
    let (partition, warning) = taxonomy.resolve_label(&topic, &subtopic);
    Ok(Classification { partition, warning })
}

pub struct MemoryStore {
    taxonomy: TopicTaxonomy,
    dim: usize,
    next_id: u64,
    partitions: BTreeMap<PartitionKey, Vec<MemoryRecord>>,
    dir: Option<PathBuf>,
}

impl MemoryStore {
    /// A store with no backing log.
    pub fn in_memory(taxonomy: TopicTaxonomy, dim: usize) -> Self {
        MemoryStore {
            taxonomy,
            dim,
            next_id: 1,
            partitions: BTreeMap::new(),
            dir: None,
        }
    }

    /// Opens (or creates) a store directory, replaying every partition log.
    pub fn open(dir: impl AsRef<Path>, taxonomy: TopicTaxonomy, dim: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut store = MemoryStore {
            taxonomy,
            dim,
            next_id: 1,
            partitions: BTreeMap::new(),
            dir: None,
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let content = std::fs::read_to_string(&path)?;
            for (line_no, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: MemoryRecord = serde_json::from_str(line).map_err(|e| {
                    Error::StoreUnavailable(format!(
                        "corrupt record at {}:{}: {e}",
                        path.display(),
                        line_no + 1
                    ))
                })?;
                store.validate_record(&record)?;
                store.next_id = store.next_id.max(record.record_id + 1);
                store
                    .partitions
                    .entry(record.partition.clone())
                    .or_default()
                    .push(record);
            }
        }
        store.dir = Some(dir);
        Ok(store)
    }

    pub fn taxonomy(&self) -> &TopicTaxonomy {
        &self.taxonomy
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &MemoryRecord> {
        self.partitions.values().flatten()
    }

    fn validate_record(&self, record: &MemoryRecord) -> Result<()> {
        if record.query_text.trim().is_empty() {
            return Err(Error::InvalidArgument("query_text must be non-empty".into()));
        }
        if record.embedding.dimension() != self.dim {
            return Err(Error::DimensionMismatch {
                left: record.embedding.dimension(),
                right: self.dim,
            });
        }
        if !record.embedding.is_unit_norm() {
            return Err(Error::NotUnitNorm {
                norm: record.embedding.l2_norm(),
            });
        }
        if !self.taxonomy.contains(&record.partition) {
            return Err(Error::UnknownPartition {
                topic: record.partition.topic.clone(),
                subtopic: record.partition.subtopic.clone(),
            });
        }
        Ok(())
    }

    /// Appends one query to its partition. Record ids are unique and
    /// monotonically increasing per store, starting at 1.
    pub fn store_query(
        &mut self,
        user_id: &str,
        query_text: &str,
        partition: PartitionKey,
        embedding: EmbeddingVector,
        timestamp: DateTime<Utc>,
    ) -> Result<u64> {
        let record = MemoryRecord {
            record_id: self.next_id,
            user_id: user_id.to_string(),
            query_text: query_text.to_string(),
            partition,
            embedding,
            timestamp,
        };
        self.validate_record(&record)?;
        if let Some(dir) = &self.dir {
            let path = dir.join(partition_file_name(&record.partition));
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            serde_json::to_writer(&mut file, &record)?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        let id = record.record_id;
        self.partitions
            .entry(record.partition.clone())
            .or_default()
            .push(record);
        self.next_id += 1;
        Ok(id)
    }

    fn scan(&self, scope: &RecallScope) -> Box<dyn Iterator<Item = &MemoryRecord> + '_> {
        match scope {
            RecallScope::Global => Box::new(self.partitions.values().flatten()),
            RecallScope::Partition(key) => {
                Box::new(self.partitions.get(key).into_iter().flatten())
            }
        }
    }

    /// Number of records the given scope would scan (all users).
    pub fn candidate_set_size(&self, scope: &RecallScope) -> usize {
        self.scan(scope).count()
    }

    /// Top-n most similar stored queries of `user_id` within `scope`.
    pub fn recall_top_n(
        &self,
        user_id: &str,
        query_embedding: &EmbeddingVector,
        n: usize,
        scope: &RecallScope,
    ) -> Result<Vec<RecallResult>> {
        if n == 0 {
            return Err(Error::InvalidArgument("recall requires n >= 1".into()));
        }
        let mut results = Vec::new();
        for record in self.scan(scope) {
            if record.user_id != user_id {
                continue;
            }
            let similarity = cosine_similarity(&record.embedding, query_embedding)?;
            results.push(RecallResult {
                record: record.clone(),
                similarity,
            });
        }
        results.sort_by(compare_recall);
        results.truncate(n);
        Ok(results)
    }

    /// Partition-scoped recall that falls back to a global scan to fill up
    /// to `n` results when the partition is sparse.
    pub fn recall_partition_first(
        &self,
        user_id: &str,
        query_embedding: &EmbeddingVector,
        n: usize,
        partition: &PartitionKey,
    ) -> Result<Vec<RecallResult>> {
        let mut results = self.recall_top_n(
            user_id,
            query_embedding,
            n,
            &RecallScope::Partition(partition.clone()),
        )?;
        if results.len() < n {
            let seen: HashSet<u64> = results.iter().map(|r| r.record.record_id).collect();
            for hit in self.recall_top_n(user_id, query_embedding, n, &RecallScope::Global)? {
                if results.len() == n {
                    break;
                }
                if !seen.contains(&hit.record.record_id) {
                    results.push(hit);
                }
            }
        }
        Ok(results)
    }
}

fn compare_recall(a: &RecallResult, b: &RecallResult) -> std::cmp::Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(b.record.timestamp.cmp(&a.record.timestamp))
        .then(a.record.record_id.cmp(&b.record.record_id))
}

/// Stable log file name for one partition: readable slug plus a hash of the
/// exact (topic, subtopic) pair to rule out slug collisions.
fn partition_file_name(key: &PartitionKey) -> String {
    fn slug(s: &str) -> String {
        s.chars()
            .map(|c| {
                if c.is_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '-'
                }
            })
            .collect()
    }
    let digest = Sha256::digest(format!("{}\u{1f}{}", key.topic, key.subtopic).as_bytes());
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}--{}-{}.jsonl", slug(&key.topic), slug(&key.subtopic), tag)
}

/// Repeated Asking Rate: the fraction of all queries whose embedding matches
/// (cosine >= `tau`) any query the same user asked in an earlier session.
/// Queries within the same session never count as repeats. `sessions` holds
/// one (user_id, queries) entry per session, in chronological order per user.
pub fn repeated_asking_rate(
    sessions: &[(String, Vec<String>)],
    embedder: &dyn EmbedderClient,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be in (0, 1], got {tau}"
        )));
    }
    let mut prior: HashMap<&str, Vec<EmbeddingVector>> = HashMap::new();
    let mut total = 0usize;
    let mut repeats = 0usize;
    for (user_id, queries) in sessions {
        let mut current = Vec::with_capacity(queries.len());
        let seen = prior.entry(user_id.as_str()).or_default();
        for query in queries {
            let embedding = embedder.embed(query)?;
            total += 1;
            let mut is_repeat = false;
            for earlier in seen.iter() {
                if cosine_similarity(&embedding, earlier)? >= tau {
                    is_repeat = true;
                    break;
                }
            }
            if is_repeat {
                repeats += 1;
            }
            current.push(embedding);
        }
        seen.extend(current);
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(repeats as f64 / total as f64)
}

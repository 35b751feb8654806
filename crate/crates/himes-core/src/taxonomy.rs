//! Two-level topic taxonomy used to partition the long-term memory store.
//!
//! The shipped default covers 16 social-interaction categories with four
//! subtopics each. A reserved `_unclassified` pseudo-partition (never part of
//! the category list) catches classifier outputs that fall outside the
//! taxonomy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved name for the fallback pseudo-partition.
pub const FALLBACK_LABEL: &str = "_unclassified";

const DEFAULT_TAXONOMY_JSON: &str = include_str!("../data/taxonomy.json");

/// A (topic, subtopic) pair addressing one memory partition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartitionKey {
    pub topic: String,
    pub subtopic: String,
}

impl PartitionKey {
    pub fn new(topic: impl Into<String>, subtopic: impl Into<String>) -> Self {
        PartitionKey {
            topic: topic.into(),
            subtopic: subtopic.into(),
        }
    }

    /// The reserved fallback partition.
    pub fn fallback() -> Self {
        PartitionKey::new(FALLBACK_LABEL, FALLBACK_LABEL)
    }

    pub fn is_fallback(&self) -> bool {
        self.topic == FALLBACK_LABEL
    }
}

impl std::fmt::Display for PartitionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} / {}", self.topic, self.subtopic)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicCategory {
    pub name: String,
    pub subtopics: Vec<String>,
}

/// An ordered list of categories, each with at least one subtopic. All
/// (category, subtopic) pairs are unique and non-empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicTaxonomy {
    categories: Vec<TopicCategory>,
}

impl TopicTaxonomy {
    /// Parses and validates a taxonomy document. Validation failures list
    /// every offending entry.
    pub fn from_json(doc: &str) -> Result<Self> {
        let taxonomy: TopicTaxonomy =
            serde_json::from_str(doc).map_err(|e| Error::InvalidTaxonomy(e.to_string()))?;
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let doc = std::fs::read_to_string(path)?;
        Self::from_json(&doc)
    }

    /// The shipped 16-category default.
    pub fn shipped_default() -> Self {
        Self::from_json(DEFAULT_TAXONOMY_JSON).expect("shipped taxonomy is valid")
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.categories.is_empty() {
            problems.push("no categories".to_string());
        }
        let mut seen_categories = std::collections::HashSet::new();
        let mut seen_pairs = std::collections::HashSet::new();
        for category in &self.categories {
            if category.name.trim().is_empty() {
                problems.push("empty category name".to_string());
            }
            if category.name == FALLBACK_LABEL {
                problems.push(format!("category name '{FALLBACK_LABEL}' is reserved"));
            }
            if !seen_categories.insert(&category.name) {
                problems.push(format!("duplicate category '{}'", category.name));
            }
            if category.subtopics.is_empty() {
                problems.push(format!("category '{}' has no subtopics", category.name));
            }
            for subtopic in &category.subtopics {
                if subtopic.trim().is_empty() {
                    problems.push(format!("empty subtopic in '{}'", category.name));
                }
                if !seen_pairs.insert((&category.name, subtopic)) {
                    problems.push(format!(
                        "duplicate pair '{}' / '{}'",
                        category.name, subtopic
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTaxonomy(problems.join("; ")))
        }
    }

    pub fn categories(&self) -> &[TopicCategory] {
        &self.categories
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    /// Number of (category, subtopic) pairs, excluding the fallback.
    pub fn pair_count(&self) -> usize {
        self.categories.iter().map(|c| c.subtopics.len()).sum()
    }

    /// All partition keys in document order, excluding the fallback.
    pub fn pairs(&self) -> impl Iterator<Item = PartitionKey> + '_ {
        self.categories.iter().flat_map(|c| {
            c.subtopics
                .iter()
                .map(move |s| PartitionKey::new(c.name.clone(), s.clone()))
        })
    }

    /// True for every real pair and for the reserved fallback.
    pub fn contains(&self, key: &PartitionKey) -> bool {
        if key.is_fallback() && key.subtopic == FALLBACK_LABEL {
            return true;
        }
        self.categories
            .iter()
            .any(|c| c.name == key.topic && c.subtopics.contains(&key.subtopic))
    }

    /// Maps a classifier label onto a valid key, remapping anything outside
    /// the taxonomy to the fallback and reporting it as a warning.
    pub fn resolve_label(&self, topic: &str, subtopic: &str) -> (PartitionKey, Option<String>) {
        let key = PartitionKey::new(topic, subtopic);
        if self.contains(&key) && !key.is_fallback() {
            (key, None)
        } else {
            let warning = format!("label '{topic}' / '{subtopic}' not in taxonomy; remapped to fallback");
            (PartitionKey::fallback(), Some(warning))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_has_16_categories_and_64_pairs() {
        let taxonomy = TopicTaxonomy::shipped_default();
        assert_eq!(taxonomy.category_count(), 16);
        assert_eq!(taxonomy.pair_count(), 64);
        assert!(taxonomy.contains(&PartitionKey::new(
            "Directions & Navigation",
            "Landmark orientation"
        )));
    }

    #[test]
    fn duplicate_category_is_rejected() {
        let doc = r#"{"categories":[
            {"name":"Travel","subtopics":["Itinerary planning"]},
            {"name":"Travel","subtopics":["Transportation methods"]}
        ]}"#;
        let err = TopicTaxonomy::from_json(doc).unwrap_err();
        assert!(err.to_string().contains("duplicate category 'Travel'"));
    }

    #[test]
    fn empty_category_is_rejected() {
        let doc = r#"{"categories":[{"name":"Travel","subtopics":[]}]}"#;
        let err = TopicTaxonomy::from_json(doc).unwrap_err();
        assert!(err.to_string().contains("no subtopics"));
    }

    #[test]
    fn single_category_document_is_valid() {
        let doc = r#"{"categories":[{"name":"Travel","subtopics":["Itinerary planning"]}]}"#;
        let taxonomy = TopicTaxonomy::from_json(doc).unwrap();
        assert_eq!(taxonomy.category_count(), 1);
        assert_eq!(taxonomy.pair_count(), 1);
    }

    #[test]
    fn unknown_labels_remap_to_fallback_with_warning() {
        let taxonomy = TopicTaxonomy::shipped_default();
        let (key, warning) = taxonomy.resolve_label("NotARealTopic", "Nope");
        assert_eq!(key, PartitionKey::fallback());
        assert!(warning.is_some());

        let (key, warning) = taxonomy.resolve_label("Travel", "Itinerary planning");
        assert_eq!(key, PartitionKey::new("Travel", "Itinerary planning"));
        assert!(warning.is_none());
    }

    #[test]
    fn fallback_is_always_contained_and_reserved() {
        let taxonomy = TopicTaxonomy::shipped_default();
        assert!(taxonomy.contains(&PartitionKey::fallback()));
        let doc = format!(r#"{{"categories":[{{"name":"{FALLBACK_LABEL}","subtopics":["x"]}}]}}"#);
        assert!(TopicTaxonomy::from_json(&doc).is_err());
    }
}

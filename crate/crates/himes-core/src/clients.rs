//! Black-box client interfaces for the LLMs, embedder, and query classifier,
//! plus deterministic stub implementations for hermetic runs and JSON-over-HTTP
//! implementations for production endpoints.

pub mod http;
pub mod stub;

use crate::embedding::EmbeddingVector;
use crate::error::Result;

/// A text-in/text-out generation model.
pub trait ChatClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String>;

    /// Identity metadata, e.g. a model name.
    fn model_name(&self) -> &str;
}

/// A text embedding model producing unit-norm vectors of a fixed dimension.
pub trait EmbedderClient: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn dimension(&self) -> usize;

    /// Stable identity string used to key embedding caches.
    fn identity(&self) -> String;
}

/// Assigns a query a (topic, subtopic) label. The label is free-form; callers
/// remap anything outside the active taxonomy to the fallback partition.
pub trait ClassifierClient: Send + Sync {
    fn classify(&self, query: &str) -> Result<(String, String)>;
}

impl<T: ChatClient + ?Sized> ChatClient for std::sync::Arc<T> {
    fn generate(&self, prompt: &str) -> Result<String> {
        (**self).generate(prompt)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

impl<T: EmbedderClient + ?Sized> EmbedderClient for std::sync::Arc<T> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }

    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<T: ClassifierClient + ?Sized> ClassifierClient for std::sync::Arc<T> {
    fn classify(&self, query: &str) -> Result<(String, String)> {
        (**self).classify(query)
    }
}

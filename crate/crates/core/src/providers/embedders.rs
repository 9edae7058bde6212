use std::collections::HashMap;

use super::{CallError, Capability, ModelProvider, Request};
use crate::text::audit_tokens;

fn not_generative() -> CallError {
    CallError::Fatal("embedding-only provider".into())
}

/// Bag-of-tokens embedder over a fixed vocabulary: each vocabulary token is
/// one basis vector, so cosines are hand-computable. Tokens outside the
/// vocabulary are ignored.
pub struct BasisEmbedder {
    id: String,
    index: HashMap<String, usize>,
}

impl BasisEmbedder {
    pub fn new(id: &str, vocabulary: &[&str]) -> Self {
        let mut index = HashMap::new();
        for tok in vocabulary {
            for t in audit_tokens(tok) {
                let next = index.len();
                index.entry(t).or_insert(next);
            }
        }
        Self {
            id: id.into(),
            index,
        }
    }
}

impl ModelProvider for BasisEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Embed]
    }
    fn complete(&self, _: &Request) -> Result<String, CallError> {
        Err(not_generative())
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, CallError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.index.len()];
                for tok in audit_tokens(t) {
                    if let Some(&i) = self.index.get(&tok) {
                        v[i] += 1.0;
                    }
                }
                v
            })
            .collect())
    }
}

/// Bag-of-tokens embedder hashing tokens into a fixed number of buckets.
pub struct HashedEmbedder {
    id: String,
    dims: usize,
}

impl HashedEmbedder {
    pub fn new(id: &str, dims: usize) -> Self {
        Self {
            id: id.into(),
            dims: dims.max(1),
        }
    }

    fn bucket(&self, token: &str) -> usize {
        // FNV-1a: stable across platforms and releases
        let mut h: u64 = 0xcbf29ce484222325;
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        (h % self.dims as u64) as usize
    }
}

impl ModelProvider for HashedEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Embed]
    }
    fn complete(&self, _: &Request) -> Result<String, CallError> {
        Err(not_generative())
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, CallError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dims];
                for tok in audit_tokens(t) {
                    v[self.bucket(&tok)] += 1.0;
                }
                v
            })
            .collect())
    }
}

/// One-hot per distinct text within a batch: identical texts get cosine 1,
/// different texts cosine 0. Vectors are only comparable within one call.
pub struct ExactTextEmbedder {
    id: String,
}

impl ExactTextEmbedder {
    pub fn new(id: &str) -> Self {
        Self { id: id.into() }
    }
}

impl ModelProvider for ExactTextEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Embed]
    }
    fn complete(&self, _: &Request) -> Result<String, CallError> {
        Err(not_generative())
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, CallError> {
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            let next = slot.len();
            slot.entry(t.as_str()).or_insert(next);
        }
        let dims = slot.len();
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; dims];
                v[slot[t.as_str()]] = 1.0;
                v
            })
            .collect())
    }
}

/// Fixed text → vector table; unknown texts are a fatal error.
pub struct TableEmbedder {
    id: String,
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new(id: &str, table: HashMap<String, Vec<f64>>) -> Self {
        Self {
            id: id.into(),
            table,
        }
    }
}

impl ModelProvider for TableEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }
    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Embed]
    }
    fn complete(&self, _: &Request) -> Result<String, CallError> {
        Err(not_generative())
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, CallError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| CallError::Fatal(format!("no vector for {t:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::EmbeddingVector;

    #[test]
    fn basis_cosines_are_closed_form() {
        let e = BasisEmbedder::new("b", &["honest", "work", "quiet"]);
        let v = e
            .embed_batch(&["honest work".into(), "honest quiet".into(), "loud".into()])
            .unwrap();
        let a = EmbeddingVector::new(v[0].clone(), true);
        let b = EmbeddingVector::new(v[1].clone(), true);
        // (1,1,0)·(1,0,1) / 2 = 0.5
        assert!((a.cosine(&b) - 0.5).abs() < 1e-12);
        assert!(v[2].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn exact_text_embedder_is_one_hot() {
        let e = ExactTextEmbedder::new("x");
        let v = e
            .embed_batch(&["a".into(), "b".into(), "a".into()])
            .unwrap();
        assert_eq!(v[0], v[2]);
        assert_eq!(v[0].iter().zip(&v[1]).map(|(a, b)| a * b).sum::<f64>(), 0.0);
    }
}

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::format::read_header;

pub const MANIFEST_VERSION: u32 = 1;

/// One document of the corpus: a half-open token span `[start, end)` of the
/// shared token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub start: u64,
    pub end: u64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Path to the raw text, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_path: Option<String>,
    /// Character offset of each token's start within `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_char_offsets: Option<Vec<u32>>,
}

impl Document {
    pub fn n_tokens(&self) -> u64 {
        self.end - self.start
    }
}

/// Sidecar JSON describing a pair of token-aligned shard sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_a: String,
    pub model_b: String,
    pub layer: u32,
    pub tokenizer: String,
    /// Where in the layer the activations were captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_point: Option<String>,
    pub shards_a: Vec<String>,
    pub shards_b: Vec<String>,
    pub documents: Vec<Document>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(model_a: impl Into<String>, model_b: impl Into<String>, layer: u32, tokenizer: impl Into<String>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            model_a: model_a.into(),
            model_b: model_b.into(),
            layer,
            tokenizer: tokenizer.into(),
            capture_point: None,
            shards_a: Vec::new(),
            shards_b: Vec::new(),
            documents: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.format_version
            )));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(Error::io(path))
    }

    /// Directory that relative shard and text paths resolve against.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn shard_pairs(&self) -> impl Iterator<Item = (PathBuf, PathBuf)> + '_ {
        self.shards_a
            .iter()
            .zip(&self.shards_b)
            .map(|(a, b)| (self.resolve(a), self.resolve(b)))
    }

    /// Checks shard headers and the document table. Returns `(d_model, total tokens)`.
    pub fn validate(&self) -> Result<(usize, u64)> {
        if self.shards_a.len() != self.shards_b.len() {
            return Err(Error::Pairing(format!(
                "model A lists {} shards, model B lists {}",
                self.shards_a.len(),
                self.shards_b.len()
            )));
        }
        let mut d_model = None;
        let mut total = 0u64;
        for (i, (pa, pb)) in self.shard_pairs().enumerate() {
            let ha = read_header(&pa)?;
            let hb = read_header(&pb)?;
            if ha.n_tokens != hb.n_tokens {
                return Err(Error::Pairing(format!(
                    "shard pair {i}: {} has {} tokens, {} has {}",
                    pa.display(),
                    ha.n_tokens,
                    pb.display(),
                    hb.n_tokens
                )));
            }
            for h in [ha, hb] {
                match d_model {
                    None => d_model = Some(h.d_model),
                    Some(d) if d != h.d_model => {
                        return Err(Error::Pairing(format!(
                            "shard pair {i}: d_model {} differs from {d}",
                            h.d_model
                        )))
                    }
                    _ => {}
                }
            }
            total += ha.n_tokens;
        }
        self.validate_documents(total)?;
        Ok((d_model.unwrap_or(0) as usize, total))
    }

    fn validate_documents(&self, total: u64) -> Result<()> {
        let mut ids = HashSet::new();
        let mut prev_end = 0u64;
        for d in &self.documents {
            if !ids.insert(d.doc_id) {
                return Err(Error::Format(format!("duplicate doc_id {}", d.doc_id)));
            }
            if d.start > d.end || d.start < prev_end {
                return Err(Error::Format(format!(
                    "document {} span [{}, {}) overlaps or is out of order",
                    d.doc_id, d.start, d.end
                )));
            }
            if d.end > total {
                return Err(Error::Format(format!(
                    "document {} ends at token {} past the {total} available",
                    d.doc_id, d.end
                )));
            }
            if let Some(off) = &d.token_char_offsets {
                if off.len() as u64 != d.n_tokens() {
                    return Err(Error::Format(format!(
                        "document {} has {} char offsets for {} tokens",
                        d.doc_id,
                        off.len(),
                        d.n_tokens()
                    )));
                }
            }
            prev_end = d.end;
        }
        Ok(())
    }

    pub fn document(&self, doc_id: u64) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Raw text of a document, read from `text_path` when not inline.
    pub fn document_text(&self, doc: &Document) -> Option<String> {
        if let Some(t) = &doc.text {
            return Some(t.clone());
        }
        let rel = doc.text_path.as_ref()?;
        std::fs::read_to_string(self.resolve(rel)).ok()
    }
}

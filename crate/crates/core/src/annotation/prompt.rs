use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exemplars::ExemplarRecord;

/// Interpretation prompt up to the document list.
pub const INTERPRETATION_HEAD: &str = "You are an expert in neural network interpretability. I will show you several \n\
text examples that highly activate a specific latent (neuron/feature) in a large \n\
language model.\n\
\n\
Here are the top activating documents for this latent:\n";

/// Interpretation prompt after the document list.
pub const INTERPRETATION_TAIL: &str = "\n\
Based on these examples, please:\n\
1. Identify the common patterns, themes, concepts, or linguistic features shared\n   \
across these documents\n\
2. Provide a concise name/label for this latent (1-5 words)\n\
3. Write a detailed description of what this latent appears to detect or represent\n   \
(2-3 sentences)\n\
4. Estimate your confidence in this interpretation (low/medium/high) and explain \n   \
why\n\
\n\
Your goal is to accurately interpret what feature of language or content this \n\
latent is detecting.";

/// Hex SHA-256 of the prompt bytes.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Fills the interpretation template with one `Document i: snippet` line per
/// record, best first. Line breaks inside snippets become spaces.
pub fn build_interpretation_prompt(records: &[ExemplarRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Input("cannot build a prompt from an empty exemplar set".into()));
    }
    let mut sorted: Vec<&ExemplarRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
    let mut out = String::from(INTERPRETATION_HEAD);
    for (i, r) in sorted.iter().enumerate() {
        let flat: String = r.snippet.split(['\n', '\r']).collect::<Vec<_>>().join(" ");
        out.push_str(&format!("Document {i}: {flat}\n"));
    }
    out.push_str(INTERPRETATION_TAIL);
    Ok(out)
}

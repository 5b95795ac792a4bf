use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::client::LlmClient;
use super::parse::AnnotationResult;
use super::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    pub latent: usize,
    pub code: String,
    /// The backend's reply, kept for audit.
    pub rationale: String,
}

/// Final state of one latent: exactly one of assigned or unassigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum LatentOutcome {
    Assigned(CategoryAssignment),
    Unassigned { latent: usize, error: String },
}

impl LatentOutcome {
    pub fn latent(&self) -> usize {
        match self {
            LatentOutcome::Assigned(a) => a.latent,
            LatentOutcome::Unassigned { latent, .. } => *latent,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            LatentOutcome::Assigned(a) => Some(&a.code),
            LatentOutcome::Unassigned { .. } => None,
        }
    }
}

/// Categorization prompt: the taxonomy, the latent's label and description,
/// and a request for one code.
pub fn build_categorization_prompt(annotation: &AnnotationResult, taxonomy: &Taxonomy) -> String {
    let mut p = String::from(
        "You are grouping interpreted latents of a language model into a fixed taxonomy of capability categories.\n\nCategories:\n",
    );
    for class in &taxonomy.classes {
        p.push_str(&format!("{}. {}\n", class.letter, class.name));
        for c in taxonomy.categories.iter().filter(|c| c.class == class.letter) {
            p.push_str(&format!("  {} {}: {}\n", c.code, c.name, c.description));
        }
    }
    p.push_str(&format!(
        "\nLatent label: {}\nLatent description: {}\n\nRespond with exactly one category code (for example A.1) that best fits this latent.",
        annotation.label, annotation.description
    ));
    p
}

fn code_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\.(\d{1,2})\b").unwrap())
}

/// Validates the first code-shaped token of `response` against `taxonomy`.
pub fn parse_category(response: &str, latent: usize, taxonomy: &Taxonomy) -> Result<CategoryAssignment> {
    let c = code_re().captures(response).ok_or_else(|| Error::Assignment {
        latent,
        reason: format!("no category code in response {:?}", response.trim()),
    })?;
    let code = format!("{}.{}", &c[1], c[2].trim_start_matches('0'));
    if !taxonomy.contains(&code) {
        return Err(Error::Assignment {
            latent,
            reason: format!("code {code} is not in the taxonomy"),
        });
    }
    Ok(CategoryAssignment {
        latent,
        code,
        rationale: response.trim().to_string(),
    })
}

/// Asks the backend for one category per annotation. Failures leave the
/// latent unassigned with the error recorded.
pub fn categorize(annotations: &[AnnotationResult], taxonomy: &Taxonomy, client: &LlmClient) -> Vec<LatentOutcome> {
    super::bounded_map(annotations, client.config.concurrency, |a| {
        let prompt = build_categorization_prompt(a, taxonomy);
        match client.call_llm(&prompt).and_then(|r| parse_category(&r, a.latent, taxonomy)) {
            Ok(c) => LatentOutcome::Assigned(c),
            Err(e) => LatentOutcome::Unassigned {
                latent: a.latent,
                error: e.to_string(),
            },
        }
    })
}

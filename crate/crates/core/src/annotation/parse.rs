use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl Confidence {
    pub fn as_str(self) -> &'static str {
        match self {
            Confidence::Low => "low",
            Confidence::Medium => "medium",
            Confidence::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub latent: usize,
    /// One to five words.
    pub label: String,
    pub description: String,
    /// Section 1 of the response, if present.
    pub patterns: String,
    pub confidence: Confidence,
    pub raw: String,
    pub model: String,
    pub prompt_hash: String,
}

fn section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:#+\s*)?(?:\*\*)?\s*([1-4])\s*[.):]\s*(?:\*\*)?\s*(.*)$").unwrap())
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(?:\*\*)?\s*(?:common patterns?|patterns?|(?:concise\s+)?(?:name|label)(?:\s*/\s*label)?|(?:detailed\s+)?description|confidence)\s*(?:\*\*)?\s*:\s*(?:\*\*)?\s*").unwrap()
    })
}

fn confidence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(low|medium|high)\b").unwrap())
}

/// Splits a response into its numbered sections 1 to 4. Text before the
/// first marker is dropped; a repeated number keeps its first occurrence.
fn sections(raw: &str) -> [Option<String>; 4] {
    let mut out: [Option<String>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        if let Some(c) = section_re().captures(line) {
            let n: usize = c[1].parse().unwrap();
            if out[n - 1].is_none() {
                current = Some(n - 1);
                out[n - 1] = Some(c[2].to_string());
                continue;
            }
        }
        if let Some(i) = current {
            let s = out[i].as_mut().unwrap();
            if !s.is_empty() {
                s.push('\n');
            }
            s.push_str(line.trim());
        }
    }
    out
}

fn clean(s: &str) -> String {
    let s = heading_re().replace(s.trim(), "");
    s.trim().to_string()
}

fn strip_label(s: &str) -> String {
    let first = s.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let first = heading_re().replace(first, "");
    first
        .trim()
        .trim_matches(|c: char| c == '*' || c == '"' || c == '\'' || c == '`' || c == '_')
        .trim()
        .to_string()
}

/// Extracts label, description and confidence from a response laid out in
/// the four numbered sections the interpretation prompt asks for.
pub fn parse_annotation(raw: &str, latent: usize) -> Result<AnnotationResult> {
    let fail = |reason: &str| Error::Parse {
        latent,
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    if raw.trim().is_empty() {
        return Err(fail("empty response"));
    }
    let [patterns, label, description, confidence] = sections(raw);
    let label = label.map(|l| strip_label(&l)).filter(|l| !l.is_empty()).ok_or_else(|| fail("missing label (item 2)"))?;
    let words = label.split_whitespace().count();
    if !(1..=5).contains(&words) {
        return Err(fail(&format!("label has {words} words, expected 1-5")));
    }
    let conf_text = confidence.ok_or_else(|| fail("missing confidence (item 4)"))?;
    let confidence = match confidence_re().captures(&conf_text).map(|c| c[1].to_ascii_lowercase()) {
        Some(c) if c == "low" => Confidence::Low,
        Some(c) if c == "medium" => Confidence::Medium,
        Some(c) if c == "high" => Confidence::High,
        _ => return Err(fail("confidence is not low/medium/high")),
    };
    Ok(AnnotationResult {
        latent,
        label,
        description: description.map(|d| clean(&d)).unwrap_or_default(),
        patterns: patterns.map(|p| clean(&p)).unwrap_or_default(),
        confidence,
        raw: raw.to_string(),
        model: String::new(),
        prompt_hash: String::new(),
    })
}

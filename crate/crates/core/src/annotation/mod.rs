//! Latent interpretation through an LLM backend and assignment to the fixed
//! capability taxonomy.

mod categorize;
mod client;
mod parse;
mod prompt;
mod taxonomy;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exemplars::ExemplarRecord;

pub use categorize::{build_categorization_prompt, categorize, parse_category, CategoryAssignment, LatentOutcome};
pub use client::{BackendConfig, LlmClient, Provider, ResponseCache};
pub use parse::{parse_annotation, AnnotationResult, Confidence};
pub use prompt::{build_interpretation_prompt, prompt_hash, INTERPRETATION_HEAD, INTERPRETATION_TAIL};
pub use taxonomy::{Category, Taxonomy, TaxonomyClass};

/// Applies `f` to every item with at most `limit` worker threads; results
/// keep input order.
pub(crate) fn bounded_map<I: Sync, O: Send>(items: &[I], limit: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StoreRecord {
    Prompt { prompt_hash: String, text: String },
    Annotation(AnnotationResult),
    Outcome(LatentOutcome),
}

/// Append-only JSONL audit log of prompts, parsed annotations and outcomes.
pub struct AnnotationStore {
    path: PathBuf,
}

impl AnnotationStore {
    pub fn open(path: &Path) -> Self {
        Self { path: path.to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[StoreRecord]) -> Result<()> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).map_err(|e| Error::Format(e.to_string()))?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(Error::io(&self.path))?;
        f.write_all(&buf).map_err(Error::io(&self.path))
    }

    pub fn read(&self) -> Result<Vec<StoreRecord>> {
        let text = fs::read_to_string(&self.path).map_err(Error::io(&self.path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", self.path.display(), i + 1)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationRun {
    pub annotations: Vec<AnnotationResult>,
    /// One per input latent, in latent order.
    pub outcomes: Vec<LatentOutcome>,
}

impl AnnotationRun {
    pub fn assignments(&self) -> Vec<CategoryAssignment> {
        self.outcomes
            .iter()
            .filter_map(|o| match o {
                LatentOutcome::Assigned(a) => Some(a.clone()),
                LatentOutcome::Unassigned { .. } => None,
            })
            .collect()
    }
}

/// Interprets every latent from its exemplars, then categorizes the parsed
/// annotations. Each latent ends either assigned or unassigned with the
/// error recorded; the store, if given, receives the full audit trail.
pub fn annotate_latents(
    exemplars: &BTreeMap<usize, Vec<ExemplarRecord>>,
    taxonomy: &Taxonomy,
    client: &LlmClient,
    store: Option<&AnnotationStore>,
) -> Result<AnnotationRun> {
    annotate_latents_with(exemplars, taxonomy, client, client, store)
}

/// Like [`annotate_latents`] with separate backends for interpretation and
/// categorization.
pub fn annotate_latents_with(
    exemplars: &BTreeMap<usize, Vec<ExemplarRecord>>,
    taxonomy: &Taxonomy,
    client: &LlmClient,
    categorizer: &LlmClient,
    store: Option<&AnnotationStore>,
) -> Result<AnnotationRun> {
    let latents: Vec<(usize, &Vec<ExemplarRecord>)> = exemplars.iter().map(|(&j, r)| (j, r)).collect();
    let prompts: Vec<Result<String>> = latents.iter().map(|(_, r)| build_interpretation_prompt(r)).collect();
    let jobs: Vec<(usize, &Result<String>)> = latents.iter().map(|(j, _)| *j).zip(&prompts).collect();
    let parsed = bounded_map(&jobs, client.config.concurrency, |(j, p)| -> Result<AnnotationResult> {
        let prompt = p.as_ref().map_err(|e| Error::Input(e.to_string()))?;
        let raw = client.call_llm(prompt)?;
        let mut a = parse_annotation(&raw, *j)?;
        a.model = client.config.model.clone();
        a.prompt_hash = prompt_hash(prompt);
        Ok(a)
    });

    let mut log = Vec::new();
    let mut run = AnnotationRun::default();
    let mut failed = BTreeMap::new();
    for ((j, prompt), result) in jobs.iter().zip(parsed) {
        if let Ok(p) = prompt {
            log.push(StoreRecord::Prompt {
                prompt_hash: prompt_hash(p),
                text: p.clone(),
            });
        }
        match result {
            Ok(a) => {
                log.push(StoreRecord::Annotation(a.clone()));
                run.annotations.push(a);
            }
            Err(e) => {
                if matches!(e, Error::Config(_)) {
                    return Err(e);
                }
                failed.insert(*j, e.to_string());
            }
        }
    }
    let assigned = categorize(&run.annotations, taxonomy, categorizer);
    let mut outcomes: BTreeMap<usize, LatentOutcome> = assigned.into_iter().map(|o| (o.latent(), o)).collect();
    for (latent, error) in failed {
        outcomes.insert(latent, LatentOutcome::Unassigned { latent, error });
    }
    run.outcomes = outcomes.into_values().collect();
    log.extend(run.outcomes.iter().cloned().map(StoreRecord::Outcome));
    if let Some(s) = store {
        s.append(&log)?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        for limit in [0, 1, 3, 8, 100] {
            assert_eq!(bounded_map(&items, limit, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        assert!(bounded_map(&Vec::<u8>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(&dir.path().join("a.jsonl"));
        let recs = vec![
            StoreRecord::Prompt { prompt_hash: "h".into(), text: "t".into() },
            StoreRecord::Outcome(LatentOutcome::Unassigned { latent: 1, error: "e".into() }),
        ];
        store.append(&recs[..1]).unwrap();
        store.append(&recs[1..]).unwrap();
        assert_eq!(store.read().unwrap(), recs);
    }
}

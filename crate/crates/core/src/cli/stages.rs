use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::annotation::{annotate_latents_with, AnnotationStore, LatentOutcome, LlmClient, ResponseCache, Taxonomy};
use crate::crosscoder::{load_checkpoint, save_checkpoint, train, CrosscoderParams, TrainLog};
use crate::diffing::{compute_diffs, latent_scaling, read_diff_table, select_unique, write_diff_table, ModelSide, ScalingResult, UniqueSets};
use crate::error::{Error, Result};
use crate::exemplars::{export_exemplars, read_exemplars, scan};
use crate::report::{aggregate, diff_table, emit_plot_data, render_rows, Format, Level};
use crate::shards::{generate_synthetic, read_pair, Manifest};

use super::config::PipelineConfig;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Train,
    Diff,
    Scale,
    Exemplars,
    Annotate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Train,
        Stage::Diff,
        Stage::Scale,
        Stage::Exemplars,
        Stage::Annotate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Diff => "diff",
            Stage::Scale => "scale",
            Stage::Exemplars => "exemplars",
            Stage::Annotate => "annotate",
            Stage::Report => "report",
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.xdck";
pub const DIFF_TABLE_FILE: &str = "diff_table.tsv";
pub const EXEMPLARS_FILE: &str = "exemplars.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "output directory {} is locked by another run (remove {} if none is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path)(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub tool_version: String,
    /// Hash of `key`; the stage directory is named after it.
    pub key_hash: String,
    /// Everything the stage output depends on, including upstream hashes.
    pub key: Value,
    pub config: Value,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(Error::io(path))?))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

struct Done {
    dir: PathBuf,
    hash: String,
}

pub struct Runner {
    cfg: PipelineConfig,
    out: PathBuf,
    force_all: bool,
    force: Option<Stage>,
    done: BTreeMap<Stage, Done>,
    manifest_path: Option<PathBuf>,
}

/// Paths produced by a run, by stage.
pub type Outputs = BTreeMap<Stage, PathBuf>;

impl Runner {
    /// `force` reruns `target` (or every stage when `force_all`) even if
    /// its outputs exist.
    pub fn new(cfg: PipelineConfig, force: bool, target: Stage, force_all: bool) -> Self {
        let out = cfg.paths.output.clone();
        Self {
            cfg,
            out,
            force_all: force && force_all,
            force: force.then_some(target),
            done: BTreeMap::new(),
            manifest_path: None,
        }
    }

    /// Runs every stage up to and including `target`.
    pub fn run_until(&mut self, target: Stage) -> Result<Outputs> {
        let _lock = OutputLock::acquire(&self.out)?;
        for s in Stage::ALL.into_iter().filter(|&s| s <= target) {
            match s {
                Stage::Synth => self.synth()?,
                Stage::Train => self.train()?,
                Stage::Diff => self.diff()?,
                Stage::Scale => self.scale()?,
                Stage::Exemplars => self.exemplars()?,
                Stage::Annotate => self.annotate()?,
                Stage::Report => self.report()?,
            }
        }
        Ok(self.done.iter().map(|(s, d)| (*s, d.dir.clone())).collect())
    }

    fn forced(&self, s: Stage) -> bool {
        self.force_all || self.force == Some(s)
    }

    fn upstream(&self, s: Stage) -> &Done {
        &self.done[&s]
    }

    /// Runs `body` into a fresh directory named after the hash of `key`,
    /// unless a completed directory with that name exists.
    fn stage(&mut self, s: Stage, key: Value, body: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let key = json!({ "stage": s.name(), "inputs": key });
        let hash = sha256_hex(key.to_string().as_bytes());
        let dir = self.out.join(format!("{}-{}", s.name(), &hash[..12]));
        if dir.join(PROVENANCE_FILE).is_file() && !self.forced(s) {
            info!("{}: up-to-date ({})", s.name(), dir.display());
            self.done.insert(s, Done { dir, hash });
            return Ok(());
        }
        info!("{}: running into {}", s.name(), dir.display());
        let tmp = self.out.join(format!(".{}-{}.partial", s.name(), &hash[..12]));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(Error::io(&tmp))?;
        body(&tmp)?;
        let mut outputs = BTreeMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&tmp)
            .map_err(Error::io(&tmp))?
            .map(|e| e.map(|e| e.path()).map_err(Error::io(&tmp)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries.iter().filter(|p| p.is_file()) {
            outputs.insert(p.file_name().unwrap().to_string_lossy().into_owned(), file_hash(p)?);
        }
        let prov = Provenance {
            stage: s.name().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            key_hash: hash.clone(),
            key,
            config: serde_json::to_value(&self.cfg).map_err(|e| Error::Format(e.to_string()))?,
            outputs,
        };
        write_json(&tmp.join(PROVENANCE_FILE), &prov)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(Error::io(&dir))?;
        }
        fs::rename(&tmp, &dir).map_err(Error::io(&dir))?;
        self.done.insert(s, Done { dir, hash });
        Ok(())
    }

    fn manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path.as_ref().expect("synth stage ran");
        Manifest::load(path)
    }

    fn synth(&mut self) -> Result<()> {
        if let Some(p) = self.cfg.paths.manifest.clone() {
            info!("synth: using manifest {}", p.display());
            let hash = file_hash(&p)?;
            self.manifest_path = Some(p.clone());
            self.done.insert(Stage::Synth, Done { dir: p.parent().unwrap_or(Path::new("")).to_path_buf(), hash });
            return Ok(());
        }
        let synth = self.cfg.synth.clone();
        let key = serde_json::to_value(&synth).expect("config serializes");
        self.stage(Stage::Synth, key, |dir| {
            let mut corpus = generate_synthetic(&synth)?;
            corpus.write(dir, synth.shard_tokens)?;
            Ok(())
        })?;
        self.manifest_path = Some(self.upstream(Stage::Synth).dir.join("manifest.json"));
        Ok(())
    }

    fn checkpoint_path(&self) -> PathBuf {
        match &self.cfg.paths.checkpoint {
            Some(p) => p.clone(),
            None => self.upstream(Stage::Train).dir.join(CHECKPOINT_FILE),
        }
    }

    fn train(&mut self) -> Result<()> {
        if let Some(p) = self.cfg.paths.checkpoint.clone() {
            info!("train: using checkpoint {}", p.display());
            let hash = file_hash(&p)?;
            self.done.insert(Stage::Train, Done { dir: p.parent().unwrap_or(Path::new("")).to_path_buf(), hash });
            return Ok(());
        }
        let manifest = self.manifest()?;
        let cfg = self.cfg.train.clone();
        let key = json!({ "data": self.upstream(Stage::Synth).hash, "train": cfg });
        self.stage(Stage::Train, key, |dir| {
            manifest.validate()?;
            let mut reader = read_pair(&manifest, cfg.batch_size)?;
            let (params, log): (CrosscoderParams<f32>, TrainLog) = train(&cfg, &mut reader)?;
            if let Some(l) = log.final_loss() {
                info!("train: final loss {l:.6}, threshold {:?}", log.threshold);
            }
            save_checkpoint(&params, &dir.join(CHECKPOINT_FILE))?;
            write_train_log(&log, &dir.join("train_log.tsv"))
        })
    }

    fn diff(&mut self) -> Result<()> {
        let ckpt = self.checkpoint_path();
        let key = json!({ "checkpoint": self.upstream(Stage::Train).hash });
        self.stage(Stage::Diff, key, |dir| {
            let params: CrosscoderParams<f32> = load_checkpoint(&ckpt)?;
            let diffs = compute_diffs(&params);
            write_diff_table(&diffs.latents, &dir.join("delta_norm.tsv"))?;
            write_json(&dir.join("histogram.json"), &diffs.histogram)
        })
    }

    fn scale(&mut self) -> Result<()> {
        let ckpt = self.checkpoint_path();
        let manifest = self.manifest()?;
        let cfg = self.cfg.scaling.clone();
        let batch = self.cfg.exemplars.batch_size;
        let key = json!({
            "data": self.upstream(Stage::Synth).hash,
            "checkpoint": self.upstream(Stage::Train).hash,
            "scaling": cfg,
        });
        self.stage(Stage::Scale, key, |dir| {
            let params: CrosscoderParams<f32> = load_checkpoint(&ckpt)?;
            let mut diffs = compute_diffs(&params).latents;
            let (fa, fb) = cfg.flagged(&diffs);
            info!("scale: {} latents flagged for A, {} for B", fa.len(), fb.len());
            let mut results: Vec<ScalingResult> = Vec::new();
            for (set, side) in [(fa, ModelSide::A), (fb, ModelSide::B)] {
                let mut reader = read_pair(&manifest, batch)?;
                results.extend(latent_scaling(&params, &mut reader, &set, side, cfg.token_budget)?);
            }
            let sets = select_unique(&mut diffs, &results, &cfg)?;
            info!("scale: {} unique to A, {} unique to B", sets.unique_a.len(), sets.unique_b.len());
            write_diff_table(&diffs, &dir.join(DIFF_TABLE_FILE))?;
            write_json(&dir.join("scaling.json"), &results)?;
            write_json(&dir.join("unique.json"), &sets)
        })
    }

    fn unique_sets(&self) -> Result<UniqueSets> {
        read_json(&self.upstream(Stage::Scale).dir.join("unique.json"))
    }

    fn exemplars(&mut self) -> Result<()> {
        let ckpt = self.checkpoint_path();
        let (manifest, data) = match &self.cfg.paths.exemplar_manifest {
            Some(p) => (Manifest::load(p)?, file_hash(p)?),
            None => (self.manifest()?, self.upstream(Stage::Synth).hash.clone()),
        };
        let opts = self.cfg.exemplars.clone();
        let sets = self.unique_sets()?;
        let key = json!({
            "data": data,
            "scale": self.upstream(Stage::Scale).hash,
            "exemplars": opts,
        });
        self.stage(Stage::Exemplars, key, |dir| {
            let path = dir.join(EXEMPLARS_FILE);
            let latents: Vec<usize> = sets.unique_a.iter().chain(&sets.unique_b).copied().collect();
            if latents.is_empty() {
                warn!("exemplars: no unique latents selected");
                return fs::write(&path, "").map_err(Error::io(&path));
            }
            let params: CrosscoderParams<f32> = load_checkpoint(&ckpt)?;
            let found = scan(&manifest, &params, &latents, opts.n, opts.pooling, opts.batch_size)?;
            export_exemplars(&found, &manifest, &path)
        })
    }

    fn annotate(&mut self) -> Result<()> {
        let backend = self.cfg.annotation.clone();
        let categorizer = self.cfg.categorization.clone().unwrap_or_else(|| backend.clone());
        let exemplars_path = self.upstream(Stage::Exemplars).dir.join(EXEMPLARS_FILE);
        let cache_path = self.cfg.paths.annotation_cache.clone().unwrap_or_else(|| self.out.join("annotation_cache.jsonl"));
        let key = json!({
            "exemplars": self.upstream(Stage::Exemplars).hash,
            "provider": backend.provider,
            "model": backend.model,
            "max_tokens": backend.max_tokens,
            "categorization": [categorizer.provider, &categorizer.model, categorizer.max_tokens],
        });
        self.stage(Stage::Annotate, key, |dir| {
            let exemplars = read_exemplars(&exemplars_path)?;
            let outcomes = if exemplars.is_empty() {
                Vec::new()
            } else {
                let client = LlmClient::new(backend, ResponseCache::open(&cache_path)?);
                let categorize_client = LlmClient::new(categorizer, ResponseCache::open(&cache_path)?);
                let store = AnnotationStore::open(&dir.join("annotations.jsonl"));
                let run = annotate_latents_with(&exemplars, &Taxonomy::standard(), &client, &categorize_client, Some(&store))?;
                info!("annotate: {} requests sent, {} cached responses", client.requests_sent(), client.cache().len());
                if run.annotations.is_empty() {
                    let first = run.outcomes.iter().find_map(|o| match o {
                        LatentOutcome::Unassigned { error, .. } => Some(error.clone()),
                        LatentOutcome::Assigned(_) => None,
                    });
                    return Err(Error::State(format!(
                        "no latent could be annotated; first error: {}",
                        first.unwrap_or_default()
                    )));
                }
                let failed = run.outcomes.len() - run.assignments().len();
                if failed > 0 {
                    warn!("annotate: {failed} latent(s) left unassigned; rerun with --force to retry them");
                }
                run.outcomes
            };
            write_json(&dir.join(OUTCOMES_FILE), &outcomes)
        })
    }

    fn report(&mut self) -> Result<()> {
        let opts = self.cfg.report.clone();
        let manifest = self.manifest()?;
        let sets = self.unique_sets()?;
        let scale_dir = self.upstream(Stage::Scale).dir.clone();
        let outcomes_path = self.upstream(Stage::Annotate).dir.join(OUTCOMES_FILE);
        let key = json!({
            "scale": self.upstream(Stage::Scale).hash,
            "annotate": self.upstream(Stage::Annotate).hash,
            "report": opts,
            "models": [manifest.model_a, manifest.model_b],
        });
        self.stage(Stage::Report, key, |dir| {
            let outcomes: Vec<LatentOutcome> = read_json(&outcomes_path)?;
            let diffs = read_diff_table(&scale_dir.join(DIFF_TABLE_FILE))?;
            emit_plot_data(&diffs, opts.bins, &dir.join("delta_histogram.tsv"), &dir.join("nu_scatter.tsv"))?;
            let text = build_report(&manifest, &sets, &outcomes, opts.format)?;
            let name = match opts.format {
                Format::Markdown => "report.md",
                Format::Csv => "report.csv",
            };
            fs::write(dir.join(name), text).map_err(Error::io(dir.join(name)))
        })
    }
}

fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut s = String::from("step\tloss\taux_loss\tdead\tnnz\ttokens\n");
    for r in &log.steps {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.step, r.loss, r.aux_loss, r.dead, r.nnz, r.tokens));
    }
    if let Some(t) = log.threshold {
        s.push_str(&format!("# threshold\t{t}\n"));
    }
    fs::write(path, s).map_err(Error::io(path))
}

/// Category frequencies of A-unique latents (base) against B-unique latents
/// (target), at class and category level.
fn build_report(manifest: &Manifest, sets: &UniqueSets, outcomes: &[LatentOutcome], format: Format) -> Result<String> {
    let taxonomy = Taxonomy::standard();
    let (name_a, name_b) = (manifest.model_a.as_str(), manifest.model_b.as_str());
    let split = |ids: &[usize]| {
        let mine: Vec<&LatentOutcome> = outcomes.iter().filter(|o| ids.contains(&o.latent())).collect();
        let assigned: Vec<_> = mine
            .iter()
            .filter_map(|o| match o {
                LatentOutcome::Assigned(a) => Some(a.clone()),
                LatentOutcome::Unassigned { .. } => None,
            })
            .collect();
        let unassigned = mine.len() - assigned.len();
        (assigned, unassigned)
    };
    let (assigned_a, unassigned_a) = split(&sets.unique_a);
    let (assigned_b, unassigned_b) = split(&sets.unique_b);

    let mut out = String::new();
    if format == Format::Markdown {
        out.push_str(&format!("# Capability shift: {name_a} vs {name_b}\n\n"));
        out.push_str("| Model | Unique latents | Assigned | Unassigned |\n| --- | ---: | ---: | ---: |\n");
        out.push_str(&format!(
            "| {name_a} | {} | {} | {unassigned_a} |\n| {name_b} | {} | {} | {unassigned_b} |\n\n",
            sets.unique_a.len(),
            assigned_a.len(),
            sets.unique_b.len(),
            assigned_b.len()
        ));
    }
    if assigned_a.is_empty() || assigned_b.is_empty() {
        warn!("report: a model has no categorized unique latents; frequency tables omitted");
        if format == Format::Markdown {
            out.push_str("No frequency tables: at least one model has no categorized unique latents.\n");
        }
        return Ok(out);
    }
    let fa = aggregate(name_a, &assigned_a, unassigned_a, &taxonomy)?;
    let fb = aggregate(name_b, &assigned_b, unassigned_b, &taxonomy)?;
    for (level, title) in [(Level::Class, "Classes"), (Level::Category, "Categories")] {
        let rows = diff_table(&fa, &fb, level, &taxonomy)?;
        match format {
            Format::Markdown => {
                out.push_str(&format!("## {title}\n\n"));
                out.push_str(&render_rows(&rows, format, name_a, name_b)?);
                out.push('\n');
            }
            Format::Csv => {
                let body = render_rows(&rows, format, name_a, name_b)?;
                let lines: Vec<&str> = body.lines().collect();
                if out.is_empty() {
                    out.push_str(&format!("level,{}\n", lines[0]));
                }
                for l in &lines[1..] {
                    out.push_str(&format!("{},{l}\n", title.to_lowercase()));
                }
            }
        }
    }
    Ok(out)
}

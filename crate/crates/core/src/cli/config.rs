use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::BackendConfig;
use crate::crosscoder::TrainConfig;
use crate::diffing::{Histogram, ScalingConfig};
use crate::error::{Error, Result};
use crate::exemplars::{Pooling, DEFAULT_EXEMPLARS};
use crate::report::Format;
use crate::shards::SynthConfig;

/// Input and output locations. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output: PathBuf,
    /// Existing activation manifest; when unset the synth stage generates one.
    pub manifest: Option<PathBuf>,
    /// Existing checkpoint; when set the train stage is not run.
    pub checkpoint: Option<PathBuf>,
    /// Manifest scanned for exemplars; defaults to the training manifest.
    pub exemplar_manifest: Option<PathBuf>,
    /// Annotation response cache, shared across runs. Defaults to
    /// `annotation_cache.jsonl` under the output directory.
    pub annotation_cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            manifest: None,
            checkpoint: None,
            exemplar_manifest: None,
            annotation_cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExemplarOptions {
    /// Documents kept per latent.
    pub n: usize,
    pub pooling: Pooling,
    pub batch_size: usize,
}

impl Default for ExemplarOptions {
    fn default() -> Self {
        Self {
            n: DEFAULT_EXEMPLARS,
            pooling: Pooling::Max,
            batch_size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub format: Format,
    /// Histogram bins for the Δ_norm plot data.
    pub bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            format: Format::Markdown,
            bins: Histogram::BINS,
        }
    }
}

/// Everything a pipeline run needs, read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub scaling: ScalingConfig,
    pub exemplars: ExemplarOptions,
    pub annotation: BackendConfig,
    /// Backend for category assignment; the annotation backend when unset.
    pub categorization: Option<BackendConfig>,
    pub report: ReportOptions,
}

impl PipelineConfig {
    /// Reads `path`, applies `key=value` overrides, resolves relative paths
    /// and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.manifest.is_none() {
            self.synth.validate()?;
        }
        self.train.validate()?;
        self.scaling.validate()?;
        for p in [&self.paths.manifest, &self.paths.checkpoint, &self.paths.exemplar_manifest].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("input path {} does not exist", p.display())));
            }
        }
        if self.exemplars.n == 0 || self.exemplars.batch_size == 0 {
            return Err(Error::Config("exemplars.n and exemplars.batch_size must be positive".into()));
        }
        if self.annotation.concurrency == 0 || self.categorization.as_ref().is_some_and(|c| c.concurrency == 0) {
            return Err(Error::Config("annotation.concurrency must be at least 1".into()));
        }
        if self.report.bins == 0 {
            return Err(Error::Config("report.bins must be positive".into()));
        }
        Ok(())
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        for p in [&mut self.manifest, &mut self.checkpoint, &mut self.exemplar_manifest, &mut self.annotation_cache].into_iter().flatten() {
            fix(p);
        }
    }
}

/// Sets a dotted key such as `train.lr=0.001`. The value is read as a TOML
/// literal, falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_values() {
        let mut t: toml::Table = toml::from_str("[train]\nlr = 0.1\n").unwrap();
        apply_override(&mut t, "train.lr=0.002").unwrap();
        apply_override(&mut t, "train.steps=7").unwrap();
        apply_override(&mut t, "annotation.model=some/model").unwrap();
        apply_override(&mut t, "paths.output=\"x y\"").unwrap();
        let c: PipelineConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.annotation.model, "some/model");
        assert_eq!(c.paths.output, PathBuf::from("x y"));
    }

    #[test]
    fn bad_overrides() {
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        apply_override(&mut t, "a=1").unwrap();
        assert!(apply_override(&mut t, "a.b=1").is_err());
    }

    #[test]
    fn load_resolves_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[paths]\noutput = \"o\"\n").unwrap();
        let c = PipelineConfig::load(&p, &[]).unwrap();
        assert_eq!(c.paths.output, dir.path().join("o"));
        assert!(matches!(PipelineConfig::load(&p, &["train.k=0".into()]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::load(&p, &["train.bogus=1".into()]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::load(&p, &["paths.manifest=\"nope.json\"".into()]), Err(Error::Config(_))));
        let e = PipelineConfig::load(&dir.path().join("missing.toml"), &[]).unwrap_err();
        assert!(e.to_string().contains("missing.toml"));
    }
}

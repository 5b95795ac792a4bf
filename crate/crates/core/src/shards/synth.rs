use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

use super::{write_matrix_shard, Document, Manifest};

/// Two-model activation generator with a planted dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub d_model: usize,
    /// Planted dictionary size.
    pub latents: usize,
    pub unique_a: usize,
    pub unique_b: usize,
    /// Active planted latents per token.
    pub k: usize,
    pub tokens: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    pub doc_len: usize,
    /// Latents available to each document; tokens draw their active set from it.
    pub topic_size: usize,
    /// Tokens per shard file when written to disk.
    pub shard_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            latents: 128,
            unique_a: 8,
            unique_b: 8,
            k: 4,
            tokens: 200_000,
            noise_sigma: 0.01,
            seed: 0,
            doc_len: 200,
            topic_size: 16,
            shard_tokens: 65_536,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.latents == 0 {
            return bad("synthetic d_model and latents must be positive".into());
        }
        if self.unique_a + self.unique_b >= self.latents {
            return bad(format!(
                "unique_a + unique_b ({}) must be below latents ({})",
                self.unique_a + self.unique_b,
                self.latents
            ));
        }
        if self.k == 0 || self.k >= self.latents {
            return bad(format!("k ({}) must be in 1..{}", self.k, self.latents));
        }
        if self.topic_size < self.k || self.topic_size > self.latents {
            return bad(format!("topic_size ({}) must lie in k..=latents", self.topic_size));
        }
        if self.doc_len == 0 || self.shard_tokens == 0 {
            return bad("doc_len and shard_tokens must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Planted structure behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    /// `latents x d_model`; rows of B-unique latents are zero.
    pub dictionary_a: Matrix<f32>,
    /// `latents x d_model`; rows of A-unique latents are zero.
    pub dictionary_b: Matrix<f32>,
    pub shared: Vec<usize>,
    pub unique_a: Vec<usize>,
    pub unique_b: Vec<usize>,
    pub k_true: usize,
    pub noise_sigma: f32,
    /// Planted latents active at least once in each document, by document index.
    pub doc_latents: Vec<Vec<usize>>,
}

impl SynthGroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self).expect("truth serializes")).map_err(Error::io(path))
    }
}

pub struct SyntheticCorpus {
    pub a: Matrix<f32>,
    pub b: Matrix<f32>,
    /// Per-token planted codes as `(latent, magnitude)` pairs.
    pub codes: Vec<Vec<(usize, f32)>>,
    pub manifest: Manifest,
    pub truth: SynthGroundTruth,
}

impl SyntheticCorpus {
    /// Writes shards, `manifest.json`, and `truth.json` into `dir`; returns the manifest path.
    pub fn write(&mut self, dir: &Path, shard_tokens: usize) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.manifest.shards_a.clear();
        self.manifest.shards_b.clear();
        let n = self.a.rows();
        let mut start = 0;
        let mut i = 0;
        loop {
            let end = (start + shard_tokens).min(n);
            let (fa, fb) = (format!("a_{i:04}.xdsh"), format!("b_{i:04}.xdsh"));
            write_matrix_shard(&dir.join(&fa), &self.a.slice_rows(start, end))?;
            write_matrix_shard(&dir.join(&fb), &self.b.slice_rows(start, end))?;
            self.manifest.shards_a.push(fa);
            self.manifest.shards_b.push(fb);
            start = end;
            i += 1;
            if start >= n {
                break;
            }
        }
        self.manifest.set_base_dir(dir);
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        self.truth.save(&dir.join("truth.json"))?;
        Ok(path)
    }
}

fn token_word(active: &[(usize, f32)]) -> String {
    let ids: Vec<String> = active.iter().map(|(j, _)| format!("f{j}")).collect();
    format!("({})", ids.join(" "))
}

/// Generates `a(x) = G_a^T f(x) + noise` and `b(x) = G_b^T f(x) + noise'` with
/// `k` planted latents active per token.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let rng = RngState::new(config.seed);
    let (d, n_lat) = (config.d_model, config.latents);

    let mut dict_rng = rng.stream(0);
    let mut dictionary = Matrix::<f32>::zeros(n_lat, d);
    for j in 0..n_lat {
        let row = dictionary.row_mut(j);
        loop {
            row.iter_mut().for_each(|v| *v = dict_rng.sample::<f32, _>(StandardNormal));
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 1e-3 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }

    let mut perm: Vec<usize> = (0..n_lat).collect();
    perm.shuffle(&mut rng.stream(1));
    let mut unique_a = perm[..config.unique_a].to_vec();
    let mut unique_b = perm[config.unique_a..config.unique_a + config.unique_b].to_vec();
    let mut shared = perm[config.unique_a + config.unique_b..].to_vec();
    unique_a.sort_unstable();
    unique_b.sort_unstable();
    shared.sort_unstable();

    let mut dictionary_a = dictionary.clone();
    let mut dictionary_b = dictionary;
    for &j in &unique_b {
        dictionary_a.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
    }
    for &j in &unique_a {
        dictionary_b.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
    }

    let mut code_rng = rng.stream(2);
    let mut noise_rng = rng.stream(3);
    let mut a = Matrix::<f32>::zeros(config.tokens, d);
    let mut b = Matrix::<f32>::zeros(config.tokens, d);
    let mut codes = Vec::with_capacity(config.tokens);
    let mut manifest = Manifest::new("synthetic-a", "synthetic-b", 0, "synthetic-placeholder");
    manifest.capture_point = Some("synthetic".into());
    let mut doc_latents = Vec::new();

    let mut start = 0;
    while start < config.tokens {
        let end = (start + config.doc_len).min(config.tokens);
        let topic = sample(&mut code_rng, n_lat, config.topic_size).into_vec();
        let mut seen = vec![false; n_lat];
        let mut text = String::new();
        let mut offsets = Vec::with_capacity(end - start);
        for t in start..end {
            let mut active: Vec<(usize, f32)> = sample(&mut code_rng, config.topic_size, config.k)
                .into_iter()
                .map(|i| (topic[i], code_rng.random_range(0.5f32..1.5)))
                .collect();
            active.sort_unstable_by_key(|&(j, _)| j);
            for &(j, mag) in &active {
                seen[j] = true;
                for (o, &g) in a.row_mut(t).iter_mut().zip(dictionary_a.row(j)) {
                    *o += mag * g;
                }
                for (o, &g) in b.row_mut(t).iter_mut().zip(dictionary_b.row(j)) {
                    *o += mag * g;
                }
            }
            if config.noise_sigma > 0.0 {
                for v in a.row_mut(t).iter_mut().chain(b.row_mut(t).iter_mut()) {
                    *v += config.noise_sigma * noise_rng.sample::<f32, _>(StandardNormal);
                }
            }
            if !text.is_empty() {
                text.push(' ');
            }
            offsets.push(text.len() as u32);
            text.push_str(&token_word(&active));
            codes.push(active);
        }
        let doc_id = doc_latents.len() as u64;
        manifest.documents.push(Document {
            doc_id,
            start: start as u64,
            end: end as u64,
            source: if doc_id % 2 == 0 { "web" } else { "chat" }.into(),
            text: Some(text),
            text_path: None,
            token_char_offsets: Some(offsets),
        });
        doc_latents.push((0..n_lat).filter(|&j| seen[j]).collect());
        start = end;
    }

    Ok(SyntheticCorpus {
        a,
        b,
        codes,
        manifest,
        truth: SynthGroundTruth {
            dictionary_a,
            dictionary_b,
            shared,
            unique_a,
            unique_b,
            k_true: config.k,
            noise_sigma: config.noise_sigma,
            doc_latents,
        },
    })
}

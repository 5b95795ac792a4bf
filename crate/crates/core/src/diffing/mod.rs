//! Decoder-norm comparison, latent scaling and selection of model-unique
//! latents.

mod scaling;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crosscoder::CrosscoderParams;
use crate::error::{Error, Result};
use crate::numerics::Real;

pub use scaling::{latent_scaling, scalar_least_squares, ModelSide, ScalingResult};

/// `½((‖d_b‖ − ‖d_a‖) / max(‖d_a‖, ‖d_b‖) + 1)`: 0 when the latent lives
/// only in model A, 1 when only in B, 0.5 for equal norms. Both norms zero
/// gives 0.5.
pub fn delta_norm(norm_a: f64, norm_b: f64) -> f64 {
    let m = norm_a.max(norm_b);
    if !(m > 0.0) {
        return 0.5;
    }
    (((norm_b - norm_a) / m + 1.0) * 0.5).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    UniqueToA,
    UniqueToB,
    Shared,
    ExcludedByScaling,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::UniqueToA => "unique-to-A",
            Classification::UniqueToB => "unique-to-B",
            Classification::Shared => "shared",
            Classification::ExcludedByScaling => "excluded-by-scaling",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::UniqueToA, Self::UniqueToB, Self::Shared, Self::ExcludedByScaling]
            .into_iter()
            .find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDiff {
    pub latent: usize,
    pub norm_a: f64,
    pub norm_b: f64,
    pub delta_norm: f64,
    pub nu_eps: Option<f64>,
    pub nu_r: Option<f64>,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub delta_low: f64,
    pub delta_high: f64,
    pub tau_eps: f64,
    pub tau_r: f64,
    /// Tokens streamed when estimating the scaling coefficients.
    pub token_budget: usize,
    pub nu_eps_denominator: EpsDenominator,
}

/// What `ν^ε` divides the other model's residual fit by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsDenominator {
    /// `β(r, target)`, the latent's own contribution in the target model.
    #[default]
    Ablated,
    /// `β(ε, target)`, the target model's full-reconstruction residual.
    Residual,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            delta_low: 0.1,
            delta_high: 0.9,
            tau_eps: 0.3,
            tau_r: 0.3,
            token_budget: 100_000,
            nu_eps_denominator: EpsDenominator::Ablated,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.delta_low && self.delta_low < self.delta_high && self.delta_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= delta_low < delta_high <= 1, got {} and {}",
                self.delta_low, self.delta_high
            )));
        }
        if self.tau_eps.is_nan() || self.tau_r.is_nan() {
            return Err(Error::Config("scaling thresholds must not be NaN".into()));
        }
        if self.token_budget == 0 {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        Ok(())
    }

    /// Latents whose norm difference marks them as candidates for A / B.
    pub fn flagged(&self, diffs: &[LatentDiff]) -> (Vec<usize>, Vec<usize>) {
        let a = diffs.iter().filter(|d| d.delta_norm < self.delta_low).map(|d| d.latent).collect();
        let b = diffs.iter().filter(|d| d.delta_norm > self.delta_high).map(|d| d.latent).collect();
        (a, b)
    }
}

/// Equal-width histogram of `delta_norm` over `[0, 1]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
}

impl Histogram {
    pub const BINS: usize = 50;

    pub fn of(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let n = counts.len();
        for v in values {
            let i = ((v * n as f64).floor() as usize).min(n - 1);
            counts[i] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `(lower, upper)` edges of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let n = self.counts.len() as f64;
        (i as f64 / n, (i + 1) as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diffs {
    pub latents: Vec<LatentDiff>,
    pub histogram: Histogram,
}

/// One [`LatentDiff`] per latent, tagged shared until [`select_unique`].
pub fn compute_diffs<T: Real>(params: &CrosscoderParams<T>) -> Diffs {
    let na = params.decoder_norms_a();
    let nb = params.decoder_norms_b();
    let latents: Vec<LatentDiff> = na
        .into_iter()
        .zip(nb)
        .enumerate()
        .map(|(j, (a, b))| {
            let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
            LatentDiff {
                latent: j,
                norm_a: a,
                norm_b: b,
                delta_norm: delta_norm(a, b),
                nu_eps: None,
                nu_r: None,
                classification: Classification::Shared,
            }
        })
        .collect();
    let histogram = Histogram::of(latents.iter().map(|d| d.delta_norm), Histogram::BINS);
    Diffs { latents, histogram }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueSets {
    pub unique_a: Vec<usize>,
    pub unique_b: Vec<usize>,
}

/// Tags every latent and returns the unique sets. Flagged latents need a
/// scaling result; latents whose coefficients are undefined are excluded.
pub fn select_unique(diffs: &mut [LatentDiff], scaling: &[ScalingResult], config: &ScalingConfig) -> Result<UniqueSets> {
    config.validate()?;
    let mut out = UniqueSets::default();
    for d in diffs.iter_mut() {
        let side = if d.delta_norm < config.delta_low {
            Some(ModelSide::A)
        } else if d.delta_norm > config.delta_high {
            Some(ModelSide::B)
        } else {
            None
        };
        let Some(side) = side else {
            d.classification = Classification::Shared;
            continue;
        };
        let s = scaling
            .iter()
            .find(|s| s.latent == d.latent && s.target == side)
            .ok_or_else(|| Error::State(format!("latent {} flagged for {side:?} has no scaling result", d.latent)))?;
        d.nu_eps = match config.nu_eps_denominator {
            EpsDenominator::Ablated => s.nu_eps,
            EpsDenominator::Residual => match (s.beta_eps[side.other() as usize], s.beta_eps[side as usize]) {
                (Some(o), Some(t)) if t != 0.0 => Some(o / t),
                _ => None,
            },
        };
        d.nu_r = s.nu_r;
        let keep = matches!((d.nu_eps, d.nu_r), (Some(e), Some(r)) if e < config.tau_eps && r < config.tau_r);
        d.classification = match (keep, side) {
            (false, _) => Classification::ExcludedByScaling,
            (true, ModelSide::A) => {
                out.unique_a.push(d.latent);
                Classification::UniqueToA
            }
            (true, ModelSide::B) => {
                out.unique_b.push(d.latent);
                Classification::UniqueToB
            }
        };
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Tab-separated table, one row per latent.
pub fn write_diff_table(diffs: &[LatentDiff], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["latent", "norm_a", "norm_b", "delta_norm", "nu_eps", "nu_r", "tag"]).map_err(fmt)?;
    for d in diffs {
        w.write_record([
            d.latent.to_string(),
            format!("{}", d.norm_a),
            format!("{}", d.norm_b),
            format!("{}", d.delta_norm),
            opt(d.nu_eps),
            opt(d.nu_r),
            d.classification.as_str().to_string(),
        ])
        .map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_diff_table(path: &Path) -> Result<Vec<LatentDiff>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 7 {
            return Err(bad("row width"));
        }
        let o = |s: &str, what: &str| if s.is_empty() { Ok(None) } else { num(s, what).map(Some) };
        out.push(LatentDiff {
            latent: rec[0].parse().map_err(|_| bad("latent id"))?,
            norm_a: num(&rec[1], "norm_a")?,
            norm_b: num(&rec[2], "norm_b")?,
            delta_norm: num(&rec[3], "delta_norm")?,
            nu_eps: o(&rec[4], "nu_eps")?,
            nu_r: o(&rec[5], "nu_r")?,
            classification: Classification::parse(&rec[6]).ok_or_else(|| bad("tag"))?,
        });
    }
    Ok(out)
}

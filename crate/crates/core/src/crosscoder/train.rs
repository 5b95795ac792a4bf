use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Matrix, Real, RngState};
use crate::shards::BatchSource;

use super::model::{backward, AuxSpec};
use super::params::{CrosscoderParams, ScoreMode};

/// Crosscoder training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latents: usize,
    /// Average active latents per token.
    pub k: usize,
    pub lr: f64,
    /// Trailing fraction of steps over which the learning rate decays
    /// linearly to zero; 0 keeps it constant.
    pub lr_decay_fraction: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub decoder_init_norm: f64,
    /// Steps without firing after which a latent counts as dead.
    pub dead_window: usize,
    /// Weight of the dead-latent auxiliary loss; 0 disables it.
    pub aux_coefficient: f64,
    /// Dead latents per token in the auxiliary loss; defaults to `d_model / 2`.
    pub aux_k: Option<usize>,
    pub score_mode: ScoreMode,
    /// Rescale each model so the mean activation norm is `sqrt(d_model)`.
    pub normalize: bool,
    /// Trailing fraction of steps averaged into the inference threshold.
    pub threshold_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latents: 256,
            k: 8,
            lr: 3e-3,
            lr_decay_fraction: 0.2,
            batch_size: 256,
            steps: 5000,
            seed: 0,
            decoder_init_norm: 0.1,
            dead_window: 1000,
            aux_coefficient: 0.0,
            aux_k: None,
            score_mode: ScoreMode::NormWeighted,
            normalize: false,
            threshold_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latents == 0 {
            return bad("latents must be positive".into());
        }
        if self.k == 0 || self.k > self.latents {
            return bad(format!("k must be in 1..={}, got {}", self.latents, self.k));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_fraction) {
            return bad("lr_decay_fraction must be in [0, 1]".into());
        }
        if !(self.decoder_init_norm > 0.0 && self.decoder_init_norm.is_finite()) {
            return bad("decoder_init_norm must be positive".into());
        }
        if !(self.aux_coefficient >= 0.0 && self.aux_coefficient.is_finite()) {
            return bad("aux_coefficient must be non-negative".into());
        }
        if self.dead_window == 0 {
            return bad("dead_window must be positive".into());
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return bad("threshold_fraction must be in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Main reconstruction loss.
    pub loss: f64,
    pub aux_loss: f64,
    /// Latents that have not fired within the dead window.
    pub dead: usize,
    /// Retained codes in the batch.
    pub nnz: usize,
    /// Tokens in the batch.
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub threshold: Option<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean main loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }
}

fn next_batch(source: &mut dyn BatchSource) -> Result<(Matrix<f32>, Matrix<f32>)> {
    if let Some(b) = source.next_batch()? {
        return Ok(b);
    }
    source.rewind()?;
    source
        .next_batch()?
        .ok_or_else(|| Error::Input("activation source yielded no tokens".into()))
}

fn mean_row_norm<T: Real>(m: &Matrix<T>) -> T {
    let n = m.rows().max(1);
    (0..m.rows()).map(|r| m.row_norm(r)).sum::<T>() / T::from_usize(n).unwrap()
}

/// Trains a crosscoder on batches from `source` with Adam, cycling epochs as
/// needed. With `steps == 0` the initialized parameters are returned.
pub fn train<T: Real>(config: &TrainConfig, source: &mut dyn BatchSource) -> Result<(CrosscoderParams<T>, TrainLog)> {
    config.validate()?;
    let (first_a, first_b) = next_batch(source)?;
    let d = first_a.cols();
    if d == 0 {
        return Err(Error::Input("activations have zero width".into()));
    }
    let mut params = CrosscoderParams::<T>::init_random(d, config.latents, config.decoder_init_norm, &RngState::new(config.seed));
    params.score_mode = config.score_mode;
    params.config = Some(config.clone());
    let (fa, fb) = (first_a.cast::<T>(), first_b.cast::<T>());
    if config.normalize {
        let target = T::from_usize(d).unwrap().sqrt();
        for (slot, m) in params.input_scale.iter_mut().zip([&fa, &fb]) {
            let norm = mean_row_norm(m);
            if norm > T::zero() {
                *slot = target / norm;
            }
        }
    }
    let (pa, pb) = params.prepare_inputs(&fa, &fb);
    params.dec_bias_a = Matrix::row_vector(pa.column_means());
    params.dec_bias_b = Matrix::row_vector(pb.column_means());

    let mut log = TrainLog::default();
    if config.steps == 0 {
        return Ok((params, log));
    }

    let mut adam: Vec<AdamState<T>> = params.tensors().iter().map(|t| AdamState::for_param(t)).collect();
    let decay_steps = (config.steps as f64 * config.lr_decay_fraction).round() as usize;
    let decay_start = config.steps - decay_steps;
    let aux_k = config.aux_k.unwrap_or(d / 2).max(1);
    let mut last_fired = vec![0usize; config.latents];
    let mut dead = vec![false; config.latents];
    let thr_start = config.steps - ((config.steps as f64 * config.threshold_fraction).ceil() as usize).clamp(1, config.steps);
    let mut thr_sum = 0.0f64;
    let mut thr_count = 0usize;

    let mut pending = Some((pa, pb));
    for step in 0..config.steps {
        let (a, b) = match pending.take() {
            Some(p) => p,
            None => {
                let (ra, rb) = next_batch(source)?;
                if ra.cols() != d || rb.cols() != d {
                    return Err(Error::shape("training batch", d, ra.cols().max(rb.cols())));
                }
                params.prepare_inputs(&ra.cast(), &rb.cast())
            }
        };
        let aux = AuxSpec {
            dead: &dead,
            k_aux: aux_k,
            coefficient: config.aux_coefficient,
        };
        let out = backward(&a, &b, &params, config.k, Some(&aux)).map_err(|e| match e {
            Error::Numeric(reason) => Error::Training { step, reason },
            other => other,
        })?;
        let total = out.loss.to_f64().unwrap_or(f64::NAN);
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {total}"),
            });
        }
        let lr = if step < decay_start {
            T::lit(config.lr)
        } else {
            T::lit(config.lr * (config.steps - step) as f64 / (decay_steps + 1) as f64)
        };
        for (state, (param, grad)) in adam.iter_mut().zip(params.tensors_mut().into_iter().zip(&out.grads.tensors)) {
            state.update(param, grad, lr).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
        }
        for (_, j, _) in out.forward.codes.iter() {
            last_fired[j] = step + 1;
        }
        for (flag, &last) in dead.iter_mut().zip(&last_fired) {
            *flag = step + 1 - last >= config.dead_window;
        }
        if step >= thr_start {
            if let Some(m) = out.forward.min_score {
                thr_sum += m.to_f64().unwrap();
                thr_count += 1;
            }
        }
        log.steps.push(StepRecord {
            step,
            loss: (out.loss - out.aux_loss).to_f64().unwrap(),
            aux_loss: out.aux_loss.to_f64().unwrap(),
            dead: dead.iter().filter(|&&x| x).count(),
            nnz: out.forward.codes.nnz(),
            tokens: a.rows(),
        });
    }
    let theta = if thr_count > 0 { thr_sum / thr_count as f64 } else { 0.0 };
    params.threshold = Some(T::lit(theta));
    log.threshold = Some(theta);
    Ok((params, log))
}

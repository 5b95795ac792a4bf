use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, RngState};

use super::train::TrainConfig;

/// How BatchTopK ranks candidate activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `z · (‖dec_a[j]‖ + ‖dec_b[j]‖)`.
    #[default]
    NormWeighted,
    /// Plain `z`, for ablations.
    Raw,
}

impl ScoreMode {
    pub fn code(self) -> u32 {
        match self {
            ScoreMode::NormWeighted => 0,
            ScoreMode::Raw => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ScoreMode::NormWeighted),
            1 => Some(ScoreMode::Raw),
            _ => None,
        }
    }
}

pub const TENSOR_NAMES: [&str; 7] = ["enc_a", "enc_b", "enc_bias", "dec_a", "dec_b", "dec_bias_a", "dec_bias_b"];

/// Learned crosscoder dictionary. Row `j` of `dec_a` / `dec_b` is latent
/// `j`'s decoder direction in model A / B.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderParams<T> {
    /// `d x D`
    pub enc_a: Matrix<T>,
    /// `d x D`
    pub enc_b: Matrix<T>,
    /// `1 x D`
    pub enc_bias: Matrix<T>,
    /// `D x d`
    pub dec_a: Matrix<T>,
    /// `D x d`
    pub dec_b: Matrix<T>,
    /// `1 x d`
    pub dec_bias_a: Matrix<T>,
    /// `1 x d`
    pub dec_bias_b: Matrix<T>,
    /// Inference threshold on the BatchTopK score; set by training.
    pub threshold: Option<T>,
    /// Multipliers applied to raw model A / B activations before encoding.
    pub input_scale: [T; 2],
    pub score_mode: ScoreMode,
    /// Training configuration echoed into checkpoints.
    pub config: Option<TrainConfig>,
}

impl<T: Real> CrosscoderParams<T> {
    pub fn zeros(d_model: usize, latents: usize) -> Self {
        Self {
            enc_a: Matrix::zeros(d_model, latents),
            enc_b: Matrix::zeros(d_model, latents),
            enc_bias: Matrix::zeros(1, latents),
            dec_a: Matrix::zeros(latents, d_model),
            dec_b: Matrix::zeros(latents, d_model),
            dec_bias_a: Matrix::zeros(1, d_model),
            dec_bias_b: Matrix::zeros(1, d_model),
            threshold: None,
            input_scale: [T::one(), T::one()],
            score_mode: ScoreMode::NormWeighted,
            config: None,
        }
    }

    /// Encoder entries uniform in `±1/sqrt(d)`, decoder rows the transposed
    /// encoder columns rescaled to norm `decoder_norm`, zero biases.
    pub fn init_random(d_model: usize, latents: usize, decoder_norm: f64, rng: &RngState) -> Self {
        let mut p = Self::zeros(d_model, latents);
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut r = rng.stream(100);
        for enc in [&mut p.enc_a, &mut p.enc_b] {
            enc.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = T::lit(r.random_range(-bound..bound)));
        }
        for (enc, dec) in [(&p.enc_a, &mut p.dec_a), (&p.enc_b, &mut p.dec_b)] {
            for j in 0..latents {
                let col: Vec<T> = (0..d_model).map(|i| enc.get(i, j)).collect();
                let norm = col.iter().map(|&v| v * v).sum::<T>().sqrt();
                let s = if norm > T::zero() { T::lit(decoder_norm) / norm } else { T::zero() };
                for (o, v) in dec.row_mut(j).iter_mut().zip(col) {
                    *o = v * s;
                }
            }
        }
        p
    }

    pub fn d_model(&self) -> usize {
        self.enc_a.rows()
    }

    pub fn latents(&self) -> usize {
        self.enc_a.cols()
    }

    pub fn tensors(&self) -> [&Matrix<T>; 7] {
        [
            &self.enc_a,
            &self.enc_b,
            &self.enc_bias,
            &self.dec_a,
            &self.dec_b,
            &self.dec_bias_a,
            &self.dec_bias_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 7] {
        [
            &mut self.enc_a,
            &mut self.enc_b,
            &mut self.enc_bias,
            &mut self.dec_a,
            &mut self.dec_b,
            &mut self.dec_bias_a,
            &mut self.dec_bias_b,
        ]
    }

    /// Rebuilds params from tensors in [`TENSOR_NAMES`] order, keeping the
    /// non-tensor fields of `self`.
    pub fn with_tensors(&self, tensors: &[Matrix<T>]) -> Result<Self> {
        if tensors.len() != 7 {
            return Err(Error::shape("with_tensors", 7, tensors.len()));
        }
        let mut p = self.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(tensors) {
            dst.same_shape(src, "with_tensors")?;
            *dst = src.clone();
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d_model(), self.latents());
        let expect = [(d, n), (d, n), (1, n), (n, d), (n, d), (1, d), (1, d)];
        for ((name, t), want) in TENSOR_NAMES.iter().zip(self.tensors()).zip(expect) {
            if t.shape() != want {
                return Err(Error::shape("crosscoder params", format!("{name} {want:?}"), format!("{:?}", t.shape())));
            }
            t.ensure_finite(name)?;
        }
        if let Some(th) = self.threshold {
            if !(th >= T::zero()) {
                return Err(Error::State(format!("negative inference threshold {th}")));
            }
        }
        Ok(())
    }

    pub fn decoder_norms_a(&self) -> Vec<T> {
        (0..self.latents()).map(|j| self.dec_a.row_norm(j)).collect()
    }

    pub fn decoder_norms_b(&self) -> Vec<T> {
        (0..self.latents()).map(|j| self.dec_b.row_norm(j)).collect()
    }

    /// Per-latent multiplier turning `z` into the BatchTopK score.
    pub fn score_weights(&self) -> Vec<T> {
        match self.score_mode {
            ScoreMode::Raw => vec![T::one(); self.latents()],
            ScoreMode::NormWeighted => self
                .decoder_norms_a()
                .into_iter()
                .zip(self.decoder_norms_b())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Applies `input_scale` to raw activations.
    pub fn prepare_inputs(&self, a: &Matrix<T>, b: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let [sa, sb] = self.input_scale;
        let scale = |m: &Matrix<T>, s: T| if s == T::one() { m.clone() } else { m.scale(s) };
        (scale(a, sa), scale(b, sb))
    }

    pub fn cast<U: Real>(&self) -> CrosscoderParams<U> {
        let c = |v: T| U::from_f64(v.to_f64().unwrap()).unwrap();
        CrosscoderParams {
            enc_a: self.enc_a.cast(),
            enc_b: self.enc_b.cast(),
            enc_bias: self.enc_bias.cast(),
            dec_a: self.dec_a.cast(),
            dec_b: self.dec_b.cast(),
            dec_bias_a: self.dec_bias_a.cast(),
            dec_bias_b: self.dec_bias_b.cast(),
            threshold: self.threshold.map(c),
            input_scale: self.input_scale.map(c),
            score_mode: self.score_mode,
            config: self.config.clone(),
        }
    }
}

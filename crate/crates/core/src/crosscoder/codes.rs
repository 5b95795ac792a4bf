use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Per-token sparse latent activations in CSR layout. Within a token,
/// entries are ordered by latent index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes<T> {
    latents: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Real> SparseCodes<T> {
    pub fn empty(tokens: usize, latents: usize) -> Self {
        Self {
            latents,
            offsets: vec![0; tokens + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds codes from `(token, latent, value)` triples in any order.
    pub fn from_triples(tokens: usize, latents: usize, mut triples: Vec<(usize, usize, T)>) -> Result<Self> {
        triples.sort_unstable_by_key(|&(t, j, _)| (t, j));
        let mut offsets = vec![0usize; tokens + 1];
        let mut indices = Vec::with_capacity(triples.len());
        let mut values = Vec::with_capacity(triples.len());
        for (n, &(t, j, v)) in triples.iter().enumerate() {
            if t >= tokens {
                return Err(Error::shape("SparseCodes", format!("token < {tokens}"), t));
            }
            if j >= latents {
                return Err(Error::Bounds { latent: j, size: latents });
            }
            if n > 0 && triples[n - 1].0 == t && triples[n - 1].1 == j {
                return Err(Error::Input(format!("duplicate code ({t}, {j})")));
            }
            offsets[t + 1] += 1;
            indices.push(j as u32);
            values.push(v);
        }
        for t in 0..tokens {
            offsets[t + 1] += offsets[t];
        }
        Ok(Self {
            latents,
            offsets,
            indices,
            values,
        })
    }

    /// Keeps the strictly positive entries of a dense `tokens x latents` matrix.
    pub fn from_dense(dense: &Matrix<T>) -> Self {
        let mut triples = Vec::new();
        for (t, row) in dense.row_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > T::zero() {
                    triples.push((t, j, v));
                }
            }
        }
        Self::from_triples(dense.rows(), dense.cols(), triples).expect("dense entries are in range")
    }

    pub fn tokens(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn latents(&self) -> usize {
        self.latents
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(latent, value)` pairs of one token.
    pub fn token(&self, t: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.offsets[t]..self.offsets[t + 1];
        self.indices[r.clone()].iter().map(|&j| j as usize).zip(self.values[r].iter().copied())
    }

    /// All `(token, latent, value)` triples in token-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.tokens()).flat_map(move |t| self.token(t).map(move |(j, v)| (t, j, v)))
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.tokens(), self.latents);
        for (t, j, v) in self.iter() {
            m.set(t, j, v);
        }
        m
    }

    /// Active-latent count per token.
    pub fn counts_per_token(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Result of BatchTopK selection on one batch.
#[derive(Debug, Clone)]
pub struct TopK<T> {
    pub codes: SparseCodes<T>,
    /// Smallest score among retained entries; `None` when nothing was retained.
    pub min_score: Option<T>,
}

/// Keeps the `k · B` highest-scoring positive activations across the batch.
///
/// Scores are `z[t, j] · weights[j]`; retained codes keep `z`. Ties break by
/// lower latent index, then lower token index. If fewer than `k · B` entries
/// have a positive score, all of them are kept.
pub fn batch_topk<T: Real>(z: &Matrix<T>, weights: &[T], k: usize) -> Result<TopK<T>> {
    let (tokens, latents) = z.shape();
    if weights.len() != latents {
        return Err(Error::shape("batch_topk weights", latents, weights.len()));
    }
    let budget = k
        .checked_mul(tokens)
        .filter(|&n| n <= tokens * latents)
        .ok_or_else(|| Error::shape("batch_topk", format!("k·B <= {}", tokens * latents), format!("k={k}")))?;

    let mut cand: Vec<(T, u32, u32)> = Vec::new();
    for (t, row) in z.row_iter().enumerate() {
        for (j, (&v, &w)) in row.iter().zip(weights).enumerate() {
            let s = v * w;
            if v > T::zero() && s > T::zero() {
                cand.push((s, j as u32, t as u32));
            }
        }
    }
    // Descending score; ascending latent, then token.
    let order = |x: &(T, u32, u32), y: &(T, u32, u32)| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(Ordering::Equal)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    };
    if cand.len() > budget {
        if budget == 0 {
            cand.clear();
        } else {
            cand.select_nth_unstable_by(budget - 1, order);
            cand.truncate(budget);
        }
    }
    let min_score = cand.iter().map(|c| c.0).reduce(|a, b| if b < a { b } else { a });
    let triples = cand
        .into_iter()
        .map(|(_, j, t)| (t as usize, j as usize, z.get(t as usize, j as usize)))
        .collect();
    Ok(TopK {
        codes: SparseCodes::from_triples(tokens, latents, triples)?,
        min_score,
    })
}

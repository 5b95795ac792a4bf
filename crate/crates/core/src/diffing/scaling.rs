use serde::{Deserialize, Serialize};

use crate::crosscoder::{decode, encode_inference, CrosscoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::shards::BatchSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSide {
    A,
    B,
}

impl ModelSide {
    pub fn other(self) -> Self {
        match self {
            ModelSide::A => ModelSide::B,
            ModelSide::B => ModelSide::A,
        }
    }
}

/// Scaling coefficients of one latent. `beta_*` are `[model A, model B]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub latent: usize,
    pub target: ModelSide,
    pub fired_tokens: usize,
    pub beta_eps: [Option<f64>; 2],
    pub beta_r: [Option<f64>; 2],
    pub nu_eps: Option<f64>,
    pub nu_r: Option<f64>,
}

impl ScalingResult {
    pub fn empty(latent: usize, target: ModelSide) -> Self {
        Self {
            latent,
            target,
            fired_tokens: 0,
            beta_eps: [None; 2],
            beta_r: [None; 2],
            nu_eps: None,
            nu_r: None,
        }
    }

    /// True when the latent never fired or its target direction is zero.
    pub fn is_undefined(&self) -> bool {
        self.nu_eps.is_none() || self.nu_r.is_none()
    }
}

/// `argmin_β Σ_x ‖t(x) − β f(x) u‖²` for unit `u`: `Σ f⟨t, u⟩ / Σ f²`.
/// `None` when every `f` is zero.
pub fn scalar_least_squares(f: &[f64], targets: &Matrix<f64>, u: &[f64]) -> Option<f64> {
    let ff: f64 = f.iter().map(|v| v * v).sum();
    if ff == 0.0 {
        return None;
    }
    let ft: f64 = f.iter().enumerate().map(|(x, &fx)| fx * dot(targets.row(x), u)).sum();
    Some(ft / ff)
}

fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

struct Acc {
    slot_of: Vec<Option<usize>>,
    unit: Vec<Vec<f64>>,
    ff: Vec<f64>,
    /// `Σ f ⟨ε_m, u⟩` per latent and model.
    fe: Vec<[f64; 2]>,
    fired: Vec<usize>,
}

/// Estimates `ν^ε` and `ν^r` for `latents`, all flagged as unique to
/// `target`, from at most `budget` tokens of `source`.
///
/// With `u` the unit target decoder direction and `ε_m` the full
/// reconstruction residual of model `m`, `β(ε, m) = Σ f⟨ε_m, u⟩ / Σ f²` and
/// `β(r, m)` uses the residual with the latent's own contribution ablated,
/// `ε_m + f d_m`. Then `ν^r = β(r, other) / β(r, target)` and
/// `ν^ε = β(ε, other) / β(r, target)`.
pub fn latent_scaling<T: Real>(
    params: &CrosscoderParams<T>,
    source: &mut dyn BatchSource,
    latents: &[usize],
    target: ModelSide,
    budget: usize,
) -> Result<Vec<ScalingResult>> {
    let n = params.latents();
    let mut acc = Acc {
        slot_of: vec![None; n],
        unit: Vec::with_capacity(latents.len()),
        ff: vec![0.0; latents.len()],
        fe: vec![[0.0; 2]; latents.len()],
        fired: vec![0; latents.len()],
    };
    let dec_t = match target {
        ModelSide::A => &params.dec_a,
        ModelSide::B => &params.dec_b,
    };
    for (slot, &j) in latents.iter().enumerate() {
        if j >= n {
            return Err(Error::Bounds { latent: j, size: n });
        }
        acc.slot_of[j] = Some(slot);
        let row: Vec<f64> = dec_t.row(j).iter().map(|v| v.to_f64().unwrap()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc.unit.push(if norm > 0.0 { row.iter().map(|v| v / norm).collect() } else { vec![0.0; row.len()] });
    }
    let mut seen = 0usize;
    if !latents.is_empty() {
        while seen < budget {
            let Some((ra, rb)) = source.next_batch()? else { break };
            let take = ra.rows().min(budget - seen);
            let (ra, rb) = (ra.slice_rows(0, take).cast::<T>(), rb.slice_rows(0, take).cast::<T>());
            seen += take;
            let codes = encode_inference(&ra, &rb, params)?;
            let (pa, pb) = params.prepare_inputs(&ra, &rb);
            let (xa, xb) = decode(&codes, params)?;
            let ea = pa.sub(&xa)?;
            let eb = pb.sub(&xb)?;
            for (t, j, f) in codes.iter() {
                let Some(s) = acc.slot_of[j] else { continue };
                let f = f.to_f64().unwrap();
                let u = &acc.unit[s];
                let proj = |e: &Matrix<T>| e.row(t).iter().zip(u).map(|(v, w)| v.to_f64().unwrap() * w).sum::<f64>();
                acc.ff[s] += f * f;
                acc.fe[s][0] += f * proj(&ea);
                acc.fe[s][1] += f * proj(&eb);
                acc.fired[s] += 1;
            }
        }
    }
    if !latents.is_empty() && seen < budget {
        log::warn!("latent scaling used {seen} tokens, fewer than the budget of {budget}");
    }

    let ti = target as usize;
    let oi = target.other() as usize;
    Ok(latents
        .iter()
        .enumerate()
        .map(|(s, &j)| {
            let mut r = ScalingResult::empty(j, target);
            r.fired_tokens = acc.fired[s];
            let u = &acc.unit[s];
            if acc.ff[s] == 0.0 || u.iter().all(|&v| v == 0.0) {
                return r;
            }
            for (m, dec) in [&params.dec_a, &params.dec_b].into_iter().enumerate() {
                let du: f64 = dec.row(j).iter().zip(u).map(|(v, w)| v.to_f64().unwrap() * w).sum();
                let be = acc.fe[s][m] / acc.ff[s];
                r.beta_eps[m] = Some(be);
                r.beta_r[m] = Some(be + du);
            }
            let denom = r.beta_r[ti].unwrap();
            if denom != 0.0 {
                r.nu_r = Some(r.beta_r[oi].unwrap() / denom);
                r.nu_eps = Some(r.beta_eps[oi].unwrap() / denom);
            }
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::shards::InMemoryPairs;
    use rand::Rng;

    /// Solves the one-column least-squares problem through the normal
    /// equations of the flattened design matrix.
    fn dense_solve(f: &[f64], targets: &Matrix<f64>, u: &[f64]) -> f64 {
        let d = u.len();
        let design = Matrix::from_vec(f.len() * d, 1, f.iter().flat_map(|&fx| u.iter().map(move |&w| fx * w)).collect()).unwrap();
        let y = Matrix::from_vec(f.len() * d, 1, targets.as_slice().to_vec()).unwrap();
        let xtx = design.transpose().matmul(&design).unwrap().get(0, 0);
        let xty = design.transpose().matmul(&y).unwrap().get(0, 0);
        xty / xtx
    }

    #[test]
    fn closed_form_matches_dense_solve() {
        let mut rng = RngState::new(11).stream(0);
        for _ in 0..100 {
            let (n, d) = (rng.random_range(1..30), rng.random_range(1..12));
            let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let t = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let closed = scalar_least_squares(&f, &t, &u).unwrap();
            let dense = dense_solve(&f, &t, &u);
            assert!((closed - dense).abs() <= 1e-6 * dense.abs().max(1e-12));
            // perturbing β never lowers the objective
            let obj = |b: f64| -> f64 {
                (0..n).map(|x| (0..d).map(|i| (t.get(x, i) - b * f[x] * u[i]).powi(2)).sum::<f64>()).sum()
            };
            assert!(obj(closed + 1e-3) >= obj(closed) && obj(closed - 1e-3) >= obj(closed));
        }
        assert_eq!(scalar_least_squares(&[0.0, 0.0], &Matrix::zeros(2, 3), &[1.0, 0.0, 0.0]), None);
    }

    /// Two orthogonal latents; latent 0 decodes to both models, latent 1 only
    /// to B. Data are generated exactly by the crosscoder.
    fn toy() -> (CrosscoderParams<f64>, Matrix<f32>, Matrix<f32>) {
        let mut p = CrosscoderParams::<f64>::zeros(3, 2);
        p.enc_a.set(0, 0, 1.0);
        p.enc_b.set(1, 1, 1.0);
        p.dec_a.set(0, 0, 1.0);
        p.dec_b.set(0, 0, 1.0);
        p.dec_b.set(1, 1, 1.0);
        p.threshold = Some(0.0);
        let mut rng = RngState::new(3).stream(0);
        let mut a = Matrix::zeros(40, 3);
        let mut b = Matrix::zeros(40, 3);
        for t in 0..40 {
            let (f0, f1) = (rng.random_range(0.5f32..1.5), rng.random_range(0.5f32..1.5));
            a.set(t, 0, f0);
            b.set(t, 0, f0);
            b.set(t, 1, f1);
        }
        (p, a, b)
    }

    #[test]
    fn unique_latent_scores_near_zero() {
        let (p, a, b) = toy();
        let mut src = InMemoryPairs::new(a, b, 16).unwrap();
        let r = latent_scaling(&p, &mut src, &[1], ModelSide::B, 1000).unwrap();
        assert_eq!(r[0].fired_tokens, 40);
        assert!(r[0].nu_eps.unwrap().abs() < 1e-6);
        assert!(r[0].nu_r.unwrap().abs() < 1e-6);
    }

    #[test]
    fn shrunk_shared_latent_scores_near_one() {
        let (mut p, a, b) = toy();
        p.dec_a.row_mut(0).fill(0.0);
        let mut src = InMemoryPairs::new(a, b, 16).unwrap();
        let r = latent_scaling(&p, &mut src, &[0], ModelSide::B, 1000).unwrap();
        assert!((r[0].nu_r.unwrap() - 1.0).abs() < 1e-6, "{:?}", r[0]);
    }

    #[test]
    fn silent_latents_and_bounds() {
        let (mut p, a, b) = toy();
        p.threshold = Some(f64::INFINITY);
        let mut src = InMemoryPairs::new(a, b, 16).unwrap();
        let r = latent_scaling(&p, &mut src, &[0, 1], ModelSide::B, 1000).unwrap();
        assert!(r.iter().all(ScalingResult::is_undefined));
        assert!(matches!(
            latent_scaling(&p, &mut src, &[5], ModelSide::A, 10),
            Err(Error::Bounds { latent: 5, size: 2 })
        ));
    }

    #[test]
    fn budget_limits_tokens() {
        let (p, a, b) = toy();
        let mut src = InMemoryPairs::new(a, b, 16).unwrap();
        let r = latent_scaling(&p, &mut src, &[1], ModelSide::B, 20).unwrap();
        assert_eq!(r[0].fired_tokens, 20);
    }
}

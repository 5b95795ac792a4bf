use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::Matrix;

/// Largest relative disagreement between `analytic` gradients and central
/// differences of `loss` over every coordinate of every tensor.
///
/// The relative error of a coordinate is
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_diff_check<F>(
    loss: F,
    params: &[Matrix<f64>],
    analytic: &[Matrix<f64>],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&[Matrix<f64>]) -> Result<f64>,
{
    let coords = params.iter().map(|p| (0..p.len()).collect()).collect();
    check_coords(loss, params, analytic, eps, coords)
}

/// Like [`finite_diff_check`] but probes at most `per_tensor` random
/// coordinates of each tensor.
pub fn finite_diff_check_sampled<F, R>(
    loss: F,
    params: &[Matrix<f64>],
    analytic: &[Matrix<f64>],
    eps: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&[Matrix<f64>]) -> Result<f64>,
    R: Rng,
{
    let coords = params
        .iter()
        .map(|p| {
            if p.len() <= per_tensor {
                (0..p.len()).collect()
            } else {
                let mut idx = sample(rng, p.len(), per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_coords(loss, params, analytic, eps, coords)
}

fn check_coords<F>(
    mut loss: F,
    params: &[Matrix<f64>],
    analytic: &[Matrix<f64>],
    eps: f64,
    coords: Vec<Vec<usize>>,
) -> Result<f64>
where
    F: FnMut(&[Matrix<f64>]) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape("finite_diff_check", params.len(), analytic.len()));
    }
    for (p, g) in params.iter().zip(analytic) {
        p.same_shape(g, "finite_diff_check")?;
    }

    let mut work: Vec<Matrix<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (t, idxs) in coords.iter().enumerate() {
        for &i in idxs {
            let orig = work[t].as_slice()[i];
            work[t].as_mut_slice()[i] = orig + eps;
            let plus = finite(loss(&work)?)?;
            work[t].as_mut_slice()[i] = orig - eps;
            let minus = finite(loss(&work)?)?;
            work[t].as_mut_slice()[i] = orig;

            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[t].as_slice()[i];
            let denom = a.abs().max(central.abs()).max(1e-12);
            worst = worst.max((a - central).abs() / denom);
        }
    }
    Ok(worst)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric("loss during finite-difference probe".into()))
    }
}

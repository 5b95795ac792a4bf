use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

use super::codes::{batch_topk, SparseCodes};
use super::params::CrosscoderParams;

fn check_batch<T: Real>(a: &Matrix<T>, b: &Matrix<T>, p: &CrosscoderParams<T>, op: &'static str) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::shape(op, format!("{} rows in both batches", a.rows()), b.rows()));
    }
    let d = p.d_model();
    for m in [a, b] {
        if m.cols() != d {
            return Err(Error::shape(op, format!("width {d}"), m.cols()));
        }
    }
    Ok(())
}

/// Pre-activations `relu(a · enc_a + b · enc_b + enc_bias)`, shape `B x D`.
pub fn encode<T: Real>(a: &Matrix<T>, b: &Matrix<T>, params: &CrosscoderParams<T>) -> Result<Matrix<T>> {
    check_batch(a, b, params, "encode")?;
    let n = params.latents();
    let mut z = Matrix::zeros(a.rows(), n);
    let mut zb = Matrix::zeros(a.rows(), n);
    a.matmul_into(&params.enc_a, &mut z);
    b.matmul_into(&params.enc_b, &mut zb);
    let bias = params.enc_bias.as_slice();
    for (row, row_b) in z.as_mut_slice().chunks_mut(n.max(1)).zip(zb.as_slice().chunks(n.max(1))) {
        for ((v, &w), &c) in row.iter_mut().zip(row_b).zip(bias) {
            let s = *v + w + c;
            *v = if s > T::zero() { s } else { T::zero() };
        }
    }
    z.ensure_finite("encoder pre-activations")?;
    Ok(z)
}

/// `codes · dec_m + dec_bias_m` for both models.
pub fn decode<T: Real>(codes: &SparseCodes<T>, params: &CrosscoderParams<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    if codes.latents() != params.latents() {
        return Err(Error::shape("decode", params.latents(), codes.latents()));
    }
    let d = params.d_model();
    let mut out = [Matrix::zeros(codes.tokens(), d), Matrix::zeros(codes.tokens(), d)];
    for (recon, (dec, bias)) in out
        .iter_mut()
        .zip([(&params.dec_a, &params.dec_bias_a), (&params.dec_b, &params.dec_bias_b)])
    {
        for t in 0..codes.tokens() {
            let row = recon.row_mut(t);
            row.copy_from_slice(bias.as_slice());
            for (j, f) in codes.token(t) {
                for (o, &w) in row.iter_mut().zip(dec.row(j)) {
                    *o += f * w;
                }
            }
        }
        recon.ensure_finite("reconstruction")?;
    }
    let [ra, rb] = out;
    Ok((ra, rb))
}

/// Dense counterpart of [`decode`]: `f · dec_m + dec_bias_m`.
pub fn decode_dense<T: Real>(f: &Matrix<T>, params: &CrosscoderParams<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut ra = f.matmul(&params.dec_a)?;
    let mut rb = f.matmul(&params.dec_b)?;
    ra.add_row_broadcast(params.dec_bias_a.as_slice())?;
    rb.add_row_broadcast(params.dec_bias_b.as_slice())?;
    Ok((ra, rb))
}

/// Everything a training step needs from the forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub z: Matrix<T>,
    pub codes: SparseCodes<T>,
    pub min_score: Option<T>,
    pub recon_a: Matrix<T>,
    pub recon_b: Matrix<T>,
}

impl<T: Real> Forward<T> {
    /// Normalized squared reconstruction error of the main objective.
    pub fn reconstruction_loss(&self, a: &Matrix<T>, b: &Matrix<T>) -> T {
        let denom = T::from_usize((a.rows() * a.cols()).max(1)).unwrap();
        let sq = |x: &Matrix<T>, r: &Matrix<T>| -> T {
            x.as_slice().iter().zip(r.as_slice()).map(|(&u, &v)| (u - v) * (u - v)).sum()
        };
        (sq(a, &self.recon_a) + sq(b, &self.recon_b)) / denom
    }
}

/// Encode, BatchTopK-select with `k` per token on average, and decode.
pub fn forward<T: Real>(a: &Matrix<T>, b: &Matrix<T>, params: &CrosscoderParams<T>, k: usize) -> Result<Forward<T>> {
    let z = encode(a, b, params)?;
    let top = batch_topk(&z, &params.score_weights(), k)?;
    let (recon_a, recon_b) = decode(&top.codes, params)?;
    Ok(Forward {
        z,
        codes: top.codes,
        min_score: top.min_score,
        recon_a,
        recon_b,
    })
}

/// `(‖a − â‖² + ‖b − b̂‖²) / (B · d)` under BatchTopK with budget `k`.
pub fn loss<T: Real>(a: &Matrix<T>, b: &Matrix<T>, params: &CrosscoderParams<T>, k: usize) -> Result<T> {
    let l = forward(a, b, params, k)?.reconstruction_loss(a, b);
    if !l.is_finite() {
        return Err(Error::Numeric("crosscoder loss".into()));
    }
    Ok(l)
}

/// Dead-latent auxiliary objective: the top `k_aux` dead latents of each
/// token reconstruct the (stop-gradient) main residual.
#[derive(Debug, Clone, Copy)]
pub struct AuxSpec<'a> {
    pub dead: &'a [bool],
    pub k_aux: usize,
    pub coefficient: f64,
}

/// Gradients in [`super::TENSOR_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: [Matrix<T>; 7],
}

impl<T: Real> Gradients<T> {
    fn zeros_like(p: &CrosscoderParams<T>) -> Self {
        Self {
            tensors: p.tensors().map(|t| Matrix::zeros(t.rows(), t.cols())),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.as_slice().iter().all(|&v| v == T::zero()))
    }
}

/// Accumulates `d loss / d recon` (`g_a`, `g_b`) for `codes` into decoder and
/// encoder gradients.
fn accumulate<T: Real>(
    grads: &mut Gradients<T>,
    params: &CrosscoderParams<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    codes: &SparseCodes<T>,
    g_a: &Matrix<T>,
    g_b: &Matrix<T>,
) {
    let n = params.latents();
    let [enc_a, enc_b, enc_bias, dec_a, dec_b, ..] = &mut grads.tensors;
    for (t, j, f) in codes.iter() {
        let (ga, gb) = (g_a.row(t), g_b.row(t));
        for (o, &g) in dec_a.row_mut(j).iter_mut().zip(ga) {
            *o += f * g;
        }
        for (o, &g) in dec_b.row_mut(j).iter_mut().zip(gb) {
            *o += f * g;
        }
        let dz = dot(ga, params.dec_a.row(j)) + dot(gb, params.dec_b.row(j));
        enc_bias.as_mut_slice()[j] += dz;
        let (ea, eb) = (enc_a.as_mut_slice(), enc_b.as_mut_slice());
        for (i, (&xa, &xb)) in a.row(t).iter().zip(b.row(t)).enumerate() {
            ea[i * n + j] += xa * dz;
            eb[i * n + j] += xb * dz;
        }
    }
}

fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&u, &v)| u * v).sum()
}

fn aux_codes<T: Real>(z: &Matrix<T>, dead: &[bool], k_aux: usize) -> Result<SparseCodes<T>> {
    let mut triples = Vec::new();
    let mut cand: Vec<(T, usize)> = Vec::new();
    for (t, row) in z.row_iter().enumerate() {
        cand.clear();
        cand.extend(
            row.iter()
                .enumerate()
                .filter(|&(j, &v)| dead[j] && v > T::zero())
                .map(|(j, &v)| (v, j)),
        );
        cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        triples.extend(cand.iter().take(k_aux).map(|&(v, j)| (t, j, v)));
    }
    SparseCodes::from_triples(z.rows(), z.cols(), triples)
}

/// Auxiliary loss and its gradients for a fixed residual. Exposed so the
/// stop-gradient contract can be checked against finite differences.
pub fn aux_loss_with_residual<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    params: &CrosscoderParams<T>,
    residual_a: &Matrix<T>,
    residual_b: &Matrix<T>,
    aux: &AuxSpec<'_>,
) -> Result<(T, Gradients<T>)> {
    check_batch(a, b, params, "aux loss")?;
    if aux.dead.len() != params.latents() {
        return Err(Error::shape("aux dead mask", params.latents(), aux.dead.len()));
    }
    let z = encode(a, b, params)?;
    let codes = aux_codes(&z, aux.dead, aux.k_aux)?;
    let mut grads = Gradients::zeros_like(params);
    if codes.nnz() == 0 {
        return Ok((T::zero(), grads));
    }
    let mut bias_free = params.clone();
    bias_free.dec_bias_a = Matrix::zeros(1, params.d_model());
    bias_free.dec_bias_b = Matrix::zeros(1, params.d_model());
    let (ea, eb) = decode(&codes, &bias_free)?;
    let denom = T::from_usize((a.rows() * a.cols()).max(1)).unwrap();
    let coef = T::lit(aux.coefficient);
    let diff_a = ea.sub(residual_a)?;
    let diff_b = eb.sub(residual_b)?;
    let value = coef * (diff_a.frobenius_sq() + diff_b.frobenius_sq()) / denom;
    let s = T::lit(2.0) * coef / denom;
    accumulate(&mut grads, params, a, b, &codes, &diff_a.scale(s), &diff_b.scale(s));
    Ok((value, grads))
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T> {
    /// Total objective, main plus auxiliary.
    pub loss: T,
    pub aux_loss: T,
    pub grads: Gradients<T>,
    pub forward: Forward<T>,
}

/// Exact gradients of the objective with the BatchTopK selection frozen.
pub fn backward<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    params: &CrosscoderParams<T>,
    k: usize,
    aux: Option<&AuxSpec<'_>>,
) -> Result<BackwardOutput<T>> {
    let fwd = forward(a, b, params, k)?;
    let main = fwd.reconstruction_loss(a, b);
    if !main.is_finite() {
        return Err(Error::Numeric("crosscoder loss".into()));
    }
    let denom = T::from_usize((a.rows() * a.cols()).max(1)).unwrap();
    let s = T::lit(2.0) / denom;
    // d loss / d recon = 2 (recon − x) / (B d)
    let g_a = fwd.recon_a.sub(a)?.scale(s);
    let g_b = fwd.recon_b.sub(b)?.scale(s);

    let mut grads = Gradients::zeros_like(params);
    accumulate(&mut grads, params, a, b, &fwd.codes, &g_a, &g_b);
    for (bias_grad, g) in [(5usize, &g_a), (6, &g_b)] {
        let out = grads.tensors[bias_grad].as_mut_slice();
        for row in g.row_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }

    let mut aux_loss = T::zero();
    if let Some(spec) = aux.filter(|s| s.coefficient > 0.0 && s.k_aux > 0) {
        let res_a = a.sub(&fwd.recon_a)?;
        let res_b = b.sub(&fwd.recon_b)?;
        let (value, g) = aux_loss_with_residual(a, b, params, &res_a, &res_b, spec)?;
        aux_loss = value;
        for (acc, extra) in grads.tensors.iter_mut().zip(&g.tensors) {
            for (o, &v) in acc.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *o += v;
            }
        }
    }
    for t in &grads.tensors {
        t.ensure_finite("crosscoder gradient")?;
    }
    Ok(BackwardOutput {
        loss: main + aux_loss,
        aux_loss,
        grads,
        forward: fwd,
    })
}

/// Batch-independent sparse codes: keep every entry whose BatchTopK score
/// exceeds the trained threshold. Takes raw (unscaled) activations.
pub fn encode_inference<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    params: &CrosscoderParams<T>,
) -> Result<SparseCodes<T>> {
    let threshold = params
        .threshold
        .ok_or_else(|| Error::State("crosscoder has no inference threshold; train it first".into()))?;
    let (a, b) = params.prepare_inputs(a, b);
    let z = encode(&a, &b, params)?;
    let w = params.score_weights();
    let mut triples = Vec::new();
    for (t, row) in z.row_iter().enumerate() {
        for (j, (&v, &wj)) in row.iter().zip(&w).enumerate() {
            if v > T::zero() && v * wj > threshold {
                triples.push((t, j, v));
            }
        }
    }
    SparseCodes::from_triples(z.rows(), z.cols(), triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::TENSOR_NAMES;
    use crate::numerics::{finite_diff_check, RngState};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_params(d: usize, n: usize, seed: u64) -> CrosscoderParams<f64> {
        let mut rng = RngState::new(seed).stream(9);
        let mut p = CrosscoderParams::<f64>::init_random(d, n, 0.5, &RngState::new(seed));
        p.enc_bias = random_matrix(1, n, 0.1, &mut rng);
        p.dec_bias_a = random_matrix(1, d, 0.1, &mut rng);
        p.dec_bias_b = random_matrix(1, d, 0.1, &mut rng);
        p
    }

    /// Independently coded objective: dense codes, explicit loops.
    fn reference_loss(a: &Matrix<f64>, b: &Matrix<f64>, p: &CrosscoderParams<f64>, k: usize) -> f64 {
        let (bsz, d, n) = (a.rows(), a.cols(), p.latents());
        let mut z = vec![vec![0.0; n]; bsz];
        for t in 0..bsz {
            for j in 0..n {
                let mut s = p.enc_bias.get(0, j);
                for i in 0..d {
                    s += a.get(t, i) * p.enc_a.get(i, j) + b.get(t, i) * p.enc_b.get(i, j);
                }
                z[t][j] = s.max(0.0);
            }
        }
        let w: Vec<f64> = (0..n).map(|j| p.dec_a.row_norm(j) + p.dec_b.row_norm(j)).collect();
        let mut scored: Vec<(f64, usize, usize)> = Vec::new();
        for t in 0..bsz {
            for j in 0..n {
                scored.push((z[t][j] * w[j], j, t));
            }
        }
        scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut f = vec![vec![0.0; n]; bsz];
        for &(s, j, t) in scored.iter().take(k * bsz) {
            if s > 0.0 {
                f[t][j] = z[t][j];
            }
        }
        let mut total = 0.0;
        for t in 0..bsz {
            for i in 0..d {
                let mut ra = p.dec_bias_a.get(0, i);
                let mut rb = p.dec_bias_b.get(0, i);
                for j in 0..n {
                    ra += f[t][j] * p.dec_a.get(j, i);
                    rb += f[t][j] * p.dec_b.get(j, i);
                }
                total += (a.get(t, i) - ra).powi(2) + (b.get(t, i) - rb).powi(2);
            }
        }
        total / (bsz * d) as f64
    }

    #[test]
    fn zero_inputs_zero_bias_give_zero_codes() {
        let p = random_params(4, 6, 1);
        let mut p = p;
        p.enc_bias = Matrix::zeros(1, 6);
        let z = encode(&Matrix::zeros(3, 4), &Matrix::zeros(3, 4), &p).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        p.enc_bias = Matrix::row_vector(vec![-1e6; 6]);
        let mut rng = RngState::new(2).stream(0);
        let z = encode(&random_matrix(3, 4, 1.0, &mut rng), &random_matrix(3, 4, 1.0, &mut rng), &p).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_encoder() {
        let mut p = CrosscoderParams::<f64>::zeros(2, 2);
        p.enc_a = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        p.enc_b = Matrix::from_rows(&[vec![0.5, 0.0], vec![-1.0, 1.0]]).unwrap();
        p.enc_bias = Matrix::row_vector(vec![0.1, -0.2]);
        let a = Matrix::row_vector(vec![1.0, 2.0]);
        let b = Matrix::row_vector(vec![3.0, 1.0]);
        // latent 0: 1·1 + 2·2 + 3·0.5 + 1·(−1) + 0.1 = 5.6
        // latent 1: −1 + 1 + 0 + 1 − 0.2 = 0.8
        let z = encode(&a, &b, &p).unwrap();
        assert!((z.get(0, 0) - 5.6).abs() < 1e-12);
        assert!((z.get(0, 1) - 0.8).abs() < 1e-12);
        assert!(encode(&a, &Matrix::zeros(2, 2), &p).is_err());
    }

    #[test]
    fn decode_edge_cases() {
        let p = random_params(5, 7, 3);
        let (ra, rb) = decode(&SparseCodes::empty(2, 7), &p).unwrap();
        for t in 0..2 {
            assert_eq!(ra.row(t), p.dec_bias_a.as_slice());
            assert_eq!(rb.row(t), p.dec_bias_b.as_slice());
        }
        let unit = SparseCodes::from_triples(1, 7, vec![(0, 4, 1.0)]).unwrap();
        let (ra, _) = decode(&unit, &p).unwrap();
        for i in 0..5 {
            assert_eq!(ra.get(0, i), p.dec_a.get(4, i) + p.dec_bias_a.get(0, i));
        }
    }

    #[test]
    fn sparse_decode_matches_dense_path() {
        let p = random_params(6, 10, 4);
        let mut rng = RngState::new(4).stream(1);
        let dense = Matrix::from_vec(
            5,
            10,
            (0..50).map(|_| if rng.random::<f64>() < 0.3 { rng.random_range(0.0..2.0) } else { 0.0 }).collect(),
        )
        .unwrap();
        let (sa, sb) = decode(&SparseCodes::from_dense(&dense), &p).unwrap();
        let (da, db) = decode_dense(&dense, &p).unwrap();
        for (x, y) in sa.as_slice().iter().chain(sb.as_slice()).zip(da.as_slice().iter().chain(db.as_slice())) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_edge_cases() {
        // Zero params, unit-norm rows: all energy of both models is lost.
        let p = CrosscoderParams::<f64>::zeros(4, 8);
        let mut rng = RngState::new(6).stream(0);
        let unit = |m: Matrix<f64>| {
            let mut m = m;
            for t in 0..m.rows() {
                let n = m.row_norm(t);
                m.row_mut(t).iter_mut().for_each(|v| *v /= n);
            }
            m
        };
        let a = unit(random_matrix(3, 4, 1.0, &mut rng));
        let b = unit(random_matrix(3, 4, 1.0, &mut rng));
        let l = loss(&a, &b, &p, 2).unwrap();
        // Each row contributes ‖a_t‖² + ‖b_t‖² = 2; normalized by B·d = 12 → 6/12.
        assert!((l - 2.0 * 3.0 / 12.0).abs() < 1e-12, "{l}");
        // Rows of norm sqrt(d), i.e. unit mean square: L = 2.
        let l = loss(&a.scale(2.0), &b.scale(2.0), &p, 2).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "{l}");

        // Perfect reconstruction: biases equal to a constant batch.
        let mut p = CrosscoderParams::<f64>::zeros(4, 8);
        p.dec_bias_a = Matrix::row_vector(a.row(0).to_vec());
        p.dec_bias_b = Matrix::row_vector(b.row(0).to_vec());
        let aa = Matrix::vstack(&[a.slice_rows(0, 1), a.slice_rows(0, 1)]).unwrap();
        let bb = Matrix::vstack(&[b.slice_rows(0, 1), b.slice_rows(0, 1)]).unwrap();
        assert_eq!(loss(&aa, &bb, &p, 2).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_reference_implementation() {
        for seed in 0..10 {
            let p = random_params(5, 12, seed);
            let mut rng = RngState::new(seed).stream(2);
            let a = random_matrix(6, 5, 1.0, &mut rng);
            let b = random_matrix(6, 5, 1.0, &mut rng);
            let fast = loss(&a, &b, &p, 3).unwrap();
            let slow = reference_loss(&a, &b, &p, 3);
            assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let mut p = CrosscoderParams::<f64>::zeros(3, 4);
        p.dec_bias_a = Matrix::row_vector(vec![0.5, -1.0, 2.0]);
        p.dec_bias_b = Matrix::row_vector(vec![1.0, 0.0, -0.5]);
        let a = Matrix::from_rows(&vec![p.dec_bias_a.as_slice().to_vec(); 2]).unwrap();
        let b = Matrix::from_rows(&vec![p.dec_bias_b.as_slice().to_vec(); 2]).unwrap();
        let out = backward(&a, &b, &p, 1, None).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.is_zero());
    }

    #[test]
    fn decoder_bias_gradient_is_twice_mean_residual() {
        let p = random_params(4, 8, 7);
        let mut rng = RngState::new(7).stream(3);
        let a = random_matrix(5, 4, 1.0, &mut rng);
        let b = random_matrix(5, 4, 1.0, &mut rng);
        let out = backward(&a, &b, &p, 2, None).unwrap();
        let resid = out.forward.recon_a.sub(&a).unwrap();
        for i in 0..4 {
            let sum: f64 = (0..5).map(|t| resid.get(t, i)).sum();
            let expected = 2.0 * sum / (5.0 * 4.0);
            assert!((out.grads.tensors[5].get(0, i) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let (d, n, bsz, k) = (8, 16, 4, 3);
        for seed in 0..3 {
            let p = random_params(d, n, seed);
            let mut rng = RngState::new(seed).stream(4);
            let a = random_matrix(bsz, d, 1.0, &mut rng);
            let b = random_matrix(bsz, d, 1.0, &mut rng);
            let out = backward(&a, &b, &p, k, None).unwrap();
            let params: Vec<Matrix<f64>> = p.tensors().map(Clone::clone).to_vec();
            let err = finite_diff_check(
                |ts| loss(&a, &b, &p.with_tensors(ts)?, k),
                &params,
                &out.grads.tensors,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
        assert_eq!(TENSOR_NAMES.len(), 7);
    }

    #[test]
    fn aux_gradients_match_central_differences() {
        let (d, n, bsz) = (6, 12, 5);
        let p = random_params(d, n, 21);
        let mut rng = RngState::new(21).stream(5);
        let a = random_matrix(bsz, d, 1.0, &mut rng);
        let b = random_matrix(bsz, d, 1.0, &mut rng);
        let ra = random_matrix(bsz, d, 0.5, &mut rng);
        let rb = random_matrix(bsz, d, 0.5, &mut rng);
        let dead: Vec<bool> = (0..n).map(|j| j % 3 != 0).collect();
        let spec = AuxSpec { dead: &dead, k_aux: 3, coefficient: 1.0 / 32.0 };
        let (value, g) = aux_loss_with_residual(&a, &b, &p, &ra, &rb, &spec).unwrap();
        assert!(value > 0.0);
        let params: Vec<Matrix<f64>> = p.tensors().map(Clone::clone).to_vec();
        let err = finite_diff_check(
            |ts| Ok(aux_loss_with_residual(&a, &b, &p.with_tensors(ts)?, &ra, &rb, &spec)?.0),
            &params,
            &g.tensors,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn inference_threshold_extremes() {
        let mut p = random_params(4, 8, 8);
        let mut rng = RngState::new(8).stream(6);
        let a = random_matrix(6, 4, 1.0, &mut rng);
        let b = random_matrix(6, 4, 1.0, &mut rng);
        assert!(matches!(encode_inference(&a, &b, &p), Err(Error::State(_))));
        p.threshold = Some(0.0);
        let all = encode_inference(&a, &b, &p).unwrap();
        let z = encode(&a, &b, &p).unwrap();
        assert_eq!(all.nnz(), z.as_slice().iter().filter(|&&v| v > 0.0).count());
        p.threshold = Some(f64::INFINITY);
        assert_eq!(encode_inference(&a, &b, &p).unwrap().nnz(), 0);
    }

    #[test]
    fn inference_is_independent_of_batch_composition() {
        let mut p = random_params(4, 8, 9);
        p.threshold = Some(0.05);
        let mut rng = RngState::new(9).stream(7);
        let a = random_matrix(6, 4, 1.0, &mut rng);
        let b = random_matrix(6, 4, 1.0, &mut rng);
        let whole = encode_inference(&a, &b, &p).unwrap();
        let first = encode_inference(&a.slice_rows(0, 2), &b.slice_rows(0, 2), &p).unwrap();
        let tail: Vec<_> = whole.iter().filter(|&(t, _, _)| t < 2).collect();
        assert_eq!(first.iter().collect::<Vec<_>>(), tail);
    }
}

use thiserror::Error;

use super::codebook::{Codebook, NO_CODE};
use crate::numerics::{softmax_xent, NumericsError, Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch has no valid positions")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How the codebook-entropy term enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyMode {
    /// Hard-assignment entropy, reported in the loss but with no gradient.
    #[default]
    Value,
    /// Entropy of mean soft assignments `softmax(-||z_e - e_k||^2)`,
    /// differentiated with respect to `z_e`.
    Soft,
}

impl std::str::FromStr for EntropyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "value" => Ok(EntropyMode::Value),
            "soft" => Ok(EntropyMode::Soft),
            _ => Err(format!("unknown entropy mode `{s}` (expected value|soft)")),
        }
    }
}

impl std::fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntropyMode::Value => "value",
            EntropyMode::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Commitment weight (beta).
    pub commitment: f64,
    /// Entropy bonus weight (lambda).
    pub entropy: f64,
    pub entropy_mode: EntropyMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { commitment: 0.1, entropy: 0.003, entropy_mode: EntropyMode::Value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `recon + commitment * commit - entropy_weight * entropy`.
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
    pub entropy: f64,
    /// Hard-assignment counts per code over the batch's valid positions.
    pub batch_usage: Vec<u64>,
}

/// Gradients produced alongside a [`LossBreakdown`].
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub dlogits: Tensor<T>,
    /// Commitment (and soft-entropy) gradient on `z_e`; zero at PAD rows.
    pub dz_e: Tensor<T>,
    /// Argmax correctness per scored row.
    pub correct: Vec<bool>,
}

pub fn usage_counts(assignments: &[u32], codes: usize) -> Vec<u64> {
    let mut usage = vec![0u64; codes];
    for &a in assignments.iter().filter(|&&a| a != NO_CODE) {
        usage[a as usize] += 1;
    }
    usage
}

/// Shannon entropy (nats) of the empirical distribution given by `counts`.
pub fn entropy_of_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Soft-assignment entropy and its gradient with respect to `z_e` (valid rows).
pub fn soft_entropy<T: Scalar>(z_e: &Tensor<T>, valid: &[bool], book: &Codebook<T>) -> (f64, Tensor<T>) {
    let k = book.size();
    let d = book.dim();
    let rows: Vec<usize> = (0..valid.len()).filter(|&r| valid[r]).collect();
    let n = rows.len() as f64;
    let mut soft = vec![0f64; rows.len() * k];
    let mut p = vec![0f64; k];
    for (i, &r) in rows.iter().enumerate() {
        let z = z_e.row(r);
        let s = &mut soft[i * k..(i + 1) * k];
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = -z
                .iter()
                .zip(book.vectors.row(j))
                .map(|(a, b)| {
                    let t = a.to_f64().unwrap() - b.to_f64().unwrap();
                    t * t
                })
                .sum::<f64>();
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in s.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for (v, pj) in s.iter_mut().zip(p.iter_mut()) {
            *v /= sum;
            *pj += *v / n;
        }
    }
    let h = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    // dH/dp_k = -(ln p_k + 1); p_k = mean_i s_ik
    let dp: Vec<f64> = p.iter().map(|&x| -(x.max(1e-300).ln() + 1.0) / n).collect();
    let mut grad = Tensor::zeros(z_e.shape());
    for (i, &r) in rows.iter().enumerate() {
        let s = &soft[i * k..(i + 1) * k];
        let mean: f64 = s.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let z: Vec<f64> = z_e.row(r).iter().map(|v| v.to_f64().unwrap()).collect();
        let mut g = vec![0f64; d];
        for j in 0..k {
            // dH/dlogit_ij, logit = -||z - e_j||^2
            let dl = s[j] * (dp[j] - mean);
            for (c, gc) in g.iter_mut().enumerate() {
                *gc += dl * -2.0 * (z[c] - book.vectors.row(j)[c].to_f64().unwrap());
            }
        }
        for (o, v) in grad.row_mut(r).iter_mut().zip(g) {
            *o = T::lit(v);
        }
    }
    (h, grad)
}

/// Reconstruction, commitment and entropy terms for one batch.
///
/// `logits` holds one row per scored position and `targets` the matching
/// true tokens. Commitment is the mean squared distance `||z_e - z_q||^2`
/// over valid rows, with `z_q` treated as a constant.
pub fn compute_loss<T: Scalar>(
    logits: Tensor<T>,
    targets: &[u32],
    z_e: &Tensor<T>,
    z_q: &Tensor<T>,
    valid: &[bool],
    assignments: &[u32],
    book: &Codebook<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGrads<T>), LossError> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(LossError::EmptyBatch);
    }
    let xent = softmax_xent(logits, targets)?;
    let mut dz_e = Tensor::zeros(z_e.shape());
    let mut commit = 0.0;
    let scale = T::lit(2.0 * weights.commitment / n_valid as f64);
    for r in (0..valid.len()).filter(|&r| valid[r]) {
        let (a, b) = (z_e.row(r), z_q.row(r));
        let g = dz_e.row_mut(r);
        for c in 0..a.len() {
            let diff = a[c] - b[c];
            commit += diff.to_f64().unwrap().powi(2);
            g[c] = scale * diff;
        }
    }
    commit /= n_valid as f64;

    let batch_usage = usage_counts(assignments, book.size());
    let entropy = match weights.entropy_mode {
        EntropyMode::Value => entropy_of_counts(&batch_usage),
        EntropyMode::Soft => {
            let (h, dh) = soft_entropy(z_e, valid, book);
            let lam = T::lit(weights.entropy);
            for (g, &d) in dz_e.data_mut().iter_mut().zip(dh.data()) {
                *g = *g - lam * d;
            }
            h
        }
    };
    let total = xent.loss + weights.commitment * commit - weights.entropy * entropy;
    Ok((
        LossBreakdown { total, recon: xent.loss, commit, entropy, batch_usage },
        LossGrads { dlogits: xent.dlogits, dz_e, correct: xent.correct },
    ))
}

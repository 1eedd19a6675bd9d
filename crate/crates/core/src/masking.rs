//! Masked reconstruction: valid tokens are replaced by MASK and the decoder is
//! scored only at the replaced positions, against the original tokens.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::numerics::Scalar;
use crate::rng::{keyed, Stream};
use crate::tokenizer::TokenSequence;
use crate::vqvae::{LossError, LossWeights, Objective, PackedBatch, StepOutput, VqVae};

#[derive(Debug, Error, PartialEq)]
pub enum MaskingError {
    #[error("no position in the batch is masked")]
    EmptyMaskSet,
    #[error("mask fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// One corrupted sequence and the positions that were replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub original: TokenSequence,
    pub corrupted: TokenSequence,
    /// Sorted, a subset of the valid positions.
    pub positions: Vec<usize>,
}

/// `round(p * n_valid)`, at least one when `p > 0` and anything is valid.
pub fn mask_count(p: f64, n_valid: usize) -> usize {
    if p <= 0.0 || n_valid == 0 {
        return 0;
    }
    ((p * n_valid as f64).round() as usize).clamp(1, n_valid)
}

/// Valid positions in a uniformly random order. Any prefix is a uniform
/// sample without replacement, so masks for growing fractions are nested.
pub fn mask_order<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..seq.len()).filter(|&i| seq.valid[i]).collect();
    order.shuffle(rng);
    order
}

fn corrupt(seq: &TokenSequence, order: &[usize], count: usize, mask_id: u32) -> MaskedSequence {
    let mut positions = order[..count].to_vec();
    positions.sort_unstable();
    let mut corrupted = seq.clone();
    for &i in &positions {
        corrupted.ids[i] = mask_id;
    }
    MaskedSequence { original: seq.clone(), corrupted, positions }
}

/// Replaces `round(p * n_valid)` uniformly chosen valid tokens with `mask_id`.
pub fn apply_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    p: f64,
    mask_id: u32,
    rng: &mut R,
) -> Result<MaskedSequence, MaskingError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MaskingError::Fraction(p));
    }
    let order = mask_order(seq, rng);
    let count = mask_count(p, order.len());
    Ok(corrupt(seq, &order, count, mask_id))
}

/// Mask stream for one sequence in one epoch.
pub fn epoch_mask<'a>(
    seqs: impl IntoIterator<Item = (u64, &'a TokenSequence)>,
    p: f64,
    mask_id: u32,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MaskedSequence>, MaskingError> {
    seqs.into_iter().map(|(idx, s)| apply_mask(s, p, mask_id, &mut keyed(seed, Stream::Mask, &[epoch, idx]))).collect()
}

/// Packs corrupted inputs and the matching masked-position objective.
pub fn masked_batch(items: &[MaskedSequence], seq_len: usize) -> Result<(PackedBatch, Objective), MaskingError> {
    let batch = PackedBatch::pack(items.iter().map(|m| &m.corrupted), seq_len);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in items.iter().enumerate() {
        for &i in &m.positions {
            rows.push(b * seq_len + i);
            targets.push(m.original.ids[i]);
        }
    }
    if rows.is_empty() {
        return Err(MaskingError::EmptyMaskSet);
    }
    Ok((batch, Objective { rows, targets }))
}

/// Forward pass on corrupted inputs; cross-entropy over masked positions,
/// commitment and entropy over all valid positions of the corrupted pass.
pub fn masked_loss<T: Scalar, R: Rng + ?Sized>(
    model: &mut VqVae<T>,
    items: &[MaskedSequence],
    weights: &LossWeights,
    train: bool,
    backward: bool,
    rng: &mut R,
) -> Result<StepOutput<T>, MaskingError> {
    let seq_len = items.first().map_or(0, |m| m.original.len());
    let (batch, objective) = masked_batch(items, seq_len)?;
    Ok(model.step(&batch, &objective, weights, train, backward, rng)?)
}

/// Accuracy at masked positions for one corruption level.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    /// Fraction of masked positions whose argmax equals the original token.
    pub accuracy: f64,
    /// Mean softmax probability assigned to the original token at masked positions.
    pub true_token_prob: f64,
    pub n_scored: usize,
}

/// Masked-position accuracy at each fraction. Fraction 0 scores every valid
/// position of the uncorrupted input. One random order per sequence is shared
/// by all fractions, so larger fractions mask supersets of smaller ones.
pub fn masked_accuracy_sweep<T: Scalar>(
    model: &VqVae<T>,
    seqs: &[TokenSequence],
    fractions: &[f64],
    mask_id: u32,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepPoint>, MaskingError> {
    if let Some(&p) = fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MaskingError::Fraction(p));
    }
    let orders: Vec<Vec<usize>> =
        seqs.iter().enumerate().map(|(i, s)| mask_order(s, &mut keyed(seed, Stream::Eval, &[i as u64]))).collect();
    let mut eval_rng = keyed(seed, Stream::Dropout, &[u64::MAX]);
    let mut out = Vec::with_capacity(fractions.len());
    for &p in fractions {
        let (mut hits, mut prob, mut scored) = (0usize, 0f64, 0usize);
        for (chunk, ords) in seqs.chunks(batch_size.max(1)).zip(orders.chunks(batch_size.max(1))) {
            let items: Vec<MaskedSequence> = chunk
                .iter()
                .zip(ords)
                .map(|(s, o)| {
                    if p == 0.0 {
                        let mut positions = o.clone();
                        positions.sort_unstable();
                        MaskedSequence { original: s.clone(), corrupted: s.clone(), positions }
                    } else {
                        corrupt(s, o, mask_count(p, o.len()), mask_id)
                    }
                })
                .collect();
            let seq_len = chunk[0].len();
            let (batch, objective) = match masked_batch(&items, seq_len) {
                Ok(x) => x,
                Err(MaskingError::EmptyMaskSet) => continue,
                Err(e) => return Err(e),
            };
            let (logits, _) = model.predict(&batch, Some(&objective.rows), &mut eval_rng)?;
            for (r, &t) in objective.targets.iter().enumerate() {
                let row = logits.row(r);
                let (arg, max) =
                    row.iter()
                        .enumerate()
                        .fold((0, T::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
                let sum: f64 = row.iter().map(|&v| (v - max).to_f64().unwrap().exp()).sum();
                prob += (row[t as usize] - max).to_f64().unwrap().exp() / sum;
                hits += usize::from(arg == t as usize);
            }
            scored += objective.targets.len();
        }
        let denom = scored.max(1) as f64;
        out.push(SweepPoint {
            fraction: p,
            accuracy: hits as f64 / denom,
            true_token_prob: prob / denom,
            n_scored: scored,
        });
    }
    Ok(out)
}

//! Contrastive fine-tuning of sequence embeddings.
//!
//! Each sequence yields two augmented views. The encoder output is mean-pooled
//! over valid positions, passed through a two-layer projection head and
//! normalized onto the unit sphere; InfoNCE pulls the two views of a sequence
//! together and pushes other sequences in the batch away.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::numerics::{
    adamw_step, relu_backward, relu_forward, AdamWConfig, Linear, NumericsError, ParamSlot, Scalar, Tensor,
};
use crate::rng::{keyed, Stream};
use crate::tokenizer::TokenSequence;
use crate::vqvae::{straight_through_backward, Encoder, EncoderCache, PackedBatch, VqVae};

#[derive(Debug, Error, PartialEq)]
pub enum ContrastiveError {
    #[error("embedding row {0} has zero norm")]
    ZeroNormEmbedding(usize),
    #[error("contrastive batch is empty")]
    EmptyBatch,
    #[error("expected an even number of views, got {0}")]
    OddViews(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub mask_prob: f64,
    /// Probability of zeroing a position's embedding row.
    pub dropout_prob: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { mask_prob: 0.15, dropout_prob: 0.10, temperature: 0.5, batch_size: 64 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, p) in [("mask_prob", self.mask_prob), ("dropout_prob", self.dropout_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size < 2 {
            return Err("contrastive batch size must be at least 2".into());
        }
        Ok(())
    }
}

/// One augmented view: MASK-substituted tokens plus rows whose embedding is zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub tokens: TokenSequence,
    pub zero_rows: Vec<bool>,
}

/// Independently per valid position: MASK with `mask_prob`, embedding
/// zeroing with `dropout_prob`. Zeroed rows are not rescaled.
pub fn augment<R: Rng + ?Sized>(seq: &TokenSequence, cfg: &AugmentConfig, mask_id: u32, rng: &mut R) -> AugmentedView {
    let mut tokens = seq.clone();
    let mut zero_rows = vec![false; seq.len()];
    for i in 0..seq.len() {
        if !seq.valid[i] {
            continue;
        }
        let (u_mask, u_drop): (f64, f64) = (rng.random(), rng.random());
        if u_mask < cfg.mask_prob {
            tokens.ids[i] = mask_id;
        }
        zero_rows[i] = u_drop < cfg.dropout_prob;
    }
    AugmentedView { tokens, zero_rows }
}

/// Linear D -> D', ReLU, Linear D' -> D'.
#[derive(Debug, Clone)]
pub struct ProjectionHead<T = f32> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let lin = |name: &str, i: usize, o: usize, rng: &mut R| {
            Linear::new(
                ParamSlot::xavier(format!("{name}.weight"), &[i, o], i, o, rng),
                ParamSlot::zeros(format!("{name}.bias"), &[o], false),
            )
        };
        ProjectionHead { l1: lin("head.l1", in_dim, out_dim, rng), l2: lin("head.l2", out_dim, out_dim, rng) }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.din()
    }

    pub fn out_dim(&self) -> usize {
        self.l2.dout()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let a1 = relu_forward(&self.l1.forward(x)?);
        let y = self.l2.forward(&a1)?;
        Ok((y, HeadCache { x: x.clone(), a1 }))
    }

    pub fn backward(&mut self, cache: &HeadCache<T>, dy: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let da1 = self.l2.backward(&cache.a1, dy, true).unwrap();
        let dh1 = relu_backward(&cache.a1, &da1);
        self.l1.backward(&cache.x, &dh1, input_grad)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        vec![&mut self.l1.weight, &mut self.l1.bias, &mut self.l2.weight, &mut self.l2.bias]
    }

    pub fn params(&self) -> Vec<&ParamSlot<T>> {
        vec![&self.l1.weight, &self.l1.bias, &self.l2.weight, &self.l2.bias]
    }
}

/// Scales each row to unit L2 norm; returns the original norms for the backward pass.
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n > T::zero()) {
            return Err(ContrastiveError::ZeroNormEmbedding(r));
        }
        y.row_mut(r).iter_mut().for_each(|v| *v = *v / n);
        norms.push(n);
    }
    Ok((y, norms))
}

/// `dx = (dy - y (y . dy)) / |x|` per row.
pub fn normalize_rows_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (r, &n) in norms.iter().enumerate() {
        let yr = y.row(r);
        let dot: T = yr.iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
            *d = (*d - yv * dot) / n;
        }
    }
    dx
}

/// InfoNCE over `2N` unit rows `[view1 of 1..N; view2 of 1..N]`; the positive
/// of row `i` is `(i + N) mod 2N`, the anchor itself is excluded from the
/// denominator, and the loss is averaged over all `2N` anchors.
pub fn info_nce<T: Scalar>(v: &Tensor<T>, temperature: f64) -> Result<(f64, Tensor<T>)> {
    let m = v.rows();
    if m == 0 {
        return Err(ContrastiveError::EmptyBatch);
    }
    if !m.is_multiple_of(2) {
        return Err(ContrastiveError::OddViews(m));
    }
    let n = m / 2;
    let d = v.cols();
    let vf: Vec<f64> = v.data().iter().map(|x| x.to_f64().unwrap()).collect();
    let row = |i: usize| &vf[i * d..(i + 1) * d];
    let mut s = vec![0f64; m * m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>() / temperature;
            s[i * m + j] = dot;
            s[j * m + i] = dot;
        }
    }
    let mut loss = 0.0;
    let mut ds = vec![0f64; m * m];
    let inv = 1.0 / m as f64;
    for i in 0..m {
        let pos = (i + n) % m;
        let si = &s[i * m..(i + 1) * m];
        let max = (0..m).filter(|&j| j != i).map(|j| si[j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..m).filter(|&j| j != i).map(|j| (si[j] - max).exp()).sum();
        loss += max + sum.ln() - si[pos];
        for j in (0..m).filter(|&j| j != i) {
            ds[i * m + j] = ((si[j] - max).exp() / sum) * inv;
        }
        ds[i * m + pos] -= inv;
    }
    // s_ij = v_i . v_j / tau, so dv_i = sum_j (ds_ij + ds_ji) v_j / tau
    let mut dv = Tensor::zeros(v.shape());
    for i in 0..m {
        let out = dv.row_mut(i);
        for j in 0..m {
            let c = (ds[i * m + j] + ds[j * m + i]) / temperature;
            if c != 0.0 {
                for (o, &x) in out.iter_mut().zip(row(j)) {
                    *o = *o + T::lit(c * x);
                }
            }
        }
    }
    Ok((loss * inv, dv))
}

/// Which latent is pooled into the sequence embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolSource {
    /// Continuous encoder output.
    #[default]
    Encoder,
    /// Quantized code vectors.
    Quantized,
}

impl std::str::FromStr for PoolSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "z_e" => Ok(PoolSource::Encoder),
            "z_q" => Ok(PoolSource::Quantized),
            _ => Err(format!("unknown pool source `{s}` (expected z_e|z_q)")),
        }
    }
}

impl std::fmt::Display for PoolSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolSource::Encoder => "z_e",
            PoolSource::Quantized => "z_q",
        })
    }
}

/// Mean of each sequence's rows over its valid positions: `[B x D]`.
pub fn pool_packed<T: Scalar>(z: &Tensor<T>, valid: &[bool], seq_len: usize) -> Result<Tensor<T>> {
    let b = valid.len() / seq_len.max(1);
    let d = z.cols();
    let mut out = Tensor::zeros(&[b, d]);
    for s in 0..b {
        let rows = (s * seq_len..(s + 1) * seq_len).filter(|&r| valid[r]);
        let mut count = 0usize;
        let acc = out.row_mut(s);
        for r in rows {
            count += 1;
            for (a, &v) in acc.iter_mut().zip(z.row(r)) {
                *a = *a + v;
            }
        }
        if count == 0 {
            return Err(NumericsError::EmptyPool.into());
        }
        let inv = T::one() / T::lit(count as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
    }
    Ok(out)
}

fn pool_packed_backward<T: Scalar>(dy: &Tensor<T>, valid: &[bool], seq_len: usize) -> Tensor<T> {
    let mut dz = Tensor::zeros(&[valid.len(), dy.cols()]);
    for s in 0..dy.rows() {
        let range = s * seq_len..(s + 1) * seq_len;
        let count = range.clone().filter(|&r| valid[r]).count().max(1);
        let inv = T::one() / T::lit(count as f64);
        for r in range.filter(|&r| valid[r]) {
            for (o, &g) in dz.row_mut(r).iter_mut().zip(dy.row(s)) {
                *o = g * inv;
            }
        }
    }
    dz
}

/// Pooled, projected and normalized embedding of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEmbedding {
    pub pooled: Vec<f32>,
    pub projected: Vec<f32>,
    pub normalized: Vec<f32>,
}

fn latents<T: Scalar, R: Rng + ?Sized>(
    model: &VqVae<T>,
    encoder: &Encoder<T>,
    batch: &PackedBatch,
    zero_rows: Option<&[bool]>,
    pool: PoolSource,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, EncoderCache<T>)> {
    let (z_e, cache) = encoder.forward(&batch.ids, batch.seq_len, zero_rows, train, rng)?;
    Ok(match pool {
        PoolSource::Encoder => (z_e, cache),
        PoolSource::Quantized => (model.codebook.quantize(&z_e, &batch.valid).z_q, cache),
    })
}

/// Eval-mode pooled latents for each sequence, without a head: `[n x D]`.
pub fn pool_sequences<T: Scalar>(
    model: &VqVae<T>,
    seqs: &[TokenSequence],
    pool: PoolSource,
    batch_size: usize,
) -> Result<Tensor<T>> {
    let d = model.params.config.code_dim;
    let mut out = Vec::with_capacity(seqs.len() * d);
    let mut rng = keyed(0, Stream::Eval, &[]);
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = PackedBatch::pack(chunk, chunk[0].len());
        let (z, _) = latents(model, &model.params.encoder, &batch, None, pool, false, &mut rng)?;
        out.extend_from_slice(pool_packed(&z, &batch.valid, batch.seq_len)?.data());
    }
    Ok(Tensor::from_vec(&[seqs.len(), d], out)?)
}

/// Eval-mode embeddings through `encoder` (frozen or fine-tuned) and `head`.
pub fn embed<T: Scalar>(
    model: &VqVae<T>,
    encoder: &Encoder<T>,
    head: &ProjectionHead<T>,
    seqs: &[TokenSequence],
    pool: PoolSource,
    batch_size: usize,
) -> Result<Vec<ContrastiveEmbedding>> {
    let mut rng = keyed(0, Stream::Eval, &[]);
    let mut out = Vec::with_capacity(seqs.len());
    let f = |t: &[T]| t.iter().map(|v| v.to_f32().unwrap()).collect::<Vec<f32>>();
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = PackedBatch::pack(chunk, chunk[0].len());
        let (z, _) = latents(model, encoder, &batch, None, pool, false, &mut rng)?;
        let pooled = pool_packed(&z, &batch.valid, batch.seq_len)?;
        let (proj, _) = head.forward(&pooled)?;
        let (unit, _) = normalize_rows(&proj)?;
        for r in 0..pooled.rows() {
            out.push(ContrastiveEmbedding {
                pooled: f(pooled.row(r)),
                projected: f(proj.row(r)),
                normalized: f(unit.row(r)),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub out_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub unfreeze_encoder: bool,
    pub pool: PoolSource,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            out_dim: 128,
            epochs: 10,
            lr: 1e-4,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
            unfreeze_encoder: false,
            pool: PoolSource::Encoder,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T = f32> {
    pub head: ProjectionHead<T>,
    /// The encoder after training (unchanged when frozen).
    pub encoder: Encoder<T>,
    /// Mean InfoNCE loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a projection head (and the encoder when unfrozen) with InfoNCE.
/// `on_batch(epoch, batch, loss)` observes every optimizer step.
pub fn finetune<T: Scalar>(
    model: &VqVae<T>,
    seqs: &[TokenSequence],
    mask_id: u32,
    cfg: &FinetuneConfig,
    mut on_batch: impl FnMut(usize, usize, f64),
) -> Result<FinetuneOutcome<T>> {
    cfg.augment.validate().map_err(ContrastiveError::ConfigMismatch)?;
    let vocab = model.params.config.vocab_size;
    if mask_id as usize >= vocab {
        return Err(ContrastiveError::ConfigMismatch(format!("MASK id {mask_id} outside model vocabulary of {vocab}")));
    }
    if let Some(s) = seqs.iter().find(|s| s.ids.iter().any(|&t| t as usize >= vocab)) {
        let bad = s.ids.iter().find(|&&t| t as usize >= vocab).unwrap();
        return Err(ContrastiveError::ConfigMismatch(format!("token {bad} outside model vocabulary of {vocab}")));
    }
    if seqs.len() < 2 {
        return Err(ContrastiveError::EmptyBatch);
    }
    let mut init_rng = keyed(cfg.seed, Stream::Init, &[0xC0]);
    let mut head = ProjectionHead::<T>::new(model.params.config.code_dim, cfg.out_dim, &mut init_rng);
    let mut encoder = model.params.encoder.clone();
    for p in encoder.params_mut() {
        p.zero_grad();
        p.step_count = 0;
        p.adam_m.fill(T::zero());
        p.adam_v.fill(T::zero());
    }
    let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let n = cfg.augment.batch_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut keyed(cfg.seed, Stream::Shuffle, &[0xC0, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, idx) in order.chunks(n).enumerate().filter(|(_, c)| c.len() >= 2) {
            let mut views: Vec<AugmentedView> = Vec::with_capacity(2 * idx.len());
            for view in 0..2u64 {
                for &i in idx {
                    let mut r = keyed(cfg.seed, Stream::Augment, &[epoch as u64, i as u64, view]);
                    views.push(augment(&seqs[i], &cfg.augment, mask_id, &mut r));
                }
            }
            let batch = PackedBatch::pack(views.iter().map(|v| &v.tokens), seqs[0].len());
            let zero_rows: Vec<bool> = views.iter().flat_map(|v| v.zero_rows.iter().copied()).collect();
            let mut drop_rng = keyed(cfg.seed, Stream::Dropout, &[0xC0, epoch as u64, b as u64]);
            let (z, enc_cache) =
                latents(model, &encoder, &batch, Some(&zero_rows), cfg.pool, cfg.unfreeze_encoder, &mut drop_rng)?;
            let pooled = pool_packed(&z, &batch.valid, batch.seq_len)?;
            let (proj, head_cache) = head.forward(&pooled)?;
            let (unit, norms) = normalize_rows(&proj)?;
            let (loss, dunit) = info_nce(&unit, cfg.augment.temperature)?;
            let dproj = normalize_rows_backward(&unit, &norms, &dunit);
            let dpooled = head.backward(&head_cache, &dproj, cfg.unfreeze_encoder);
            if let Some(dpooled) = dpooled {
                let dz = pool_packed_backward(&dpooled, &batch.valid, batch.seq_len);
                let dz_e = match cfg.pool {
                    PoolSource::Encoder => dz,
                    PoolSource::Quantized => straight_through_backward(&dz, &batch.valid),
                };
                encoder.backward(&enc_cache, &dz_e);
                adamw_step(&mut encoder.params_mut(), &opt)?;
            }
            adamw_step(&mut head.params_mut(), &opt)?;
            on_batch(epoch, b, loss);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(FinetuneOutcome { head, encoder, epoch_losses })
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"VQEM";

/// `(record id, vector)` rows of an embedding table.
pub type EmbeddingRows = Vec<(String, Vec<f32>)>;

/// Writes `VQEM`: magic, dim (u32), count (u32), then per row id length
/// (u32), id bytes and `dim` little-endian f32 values.
pub fn write_embeddings<W: Write>(w: &mut W, dim: usize, rows: &[(String, Vec<f32>)]) -> io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(rows.len() as u32).to_le_bytes())?;
    for (id, v) in rows {
        if v.len() != dim {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("row `{id}` has {} values", v.len())));
        }
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(r: &mut R) -> io::Result<(usize, EmbeddingRows)> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    if &u != EMBEDDING_MAGIC {
        return Err(bad("not an embedding table (bad magic)"));
    }
    let mut next = |r: &mut R| -> io::Result<usize> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u) as usize)
    };
    let dim = next(r)?;
    let count = next(r)?;
    let mut rows = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = next(r)?;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| bad("record id is not UTF-8"))?;
        let mut buf = vec![0u8; dim * 4];
        r.read_exact(&mut buf)?;
        let v = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        rows.push((id, v));
    }
    Ok((dim, rows))
}

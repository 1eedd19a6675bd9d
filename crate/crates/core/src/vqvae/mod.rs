//! VQ-VAE over k-mer token sequences.
//!
//! A batch of `B` sequences of length `L` is packed into `B * L` rows. The
//! encoder maps tokens to continuous latents `z_e`, the codebook snaps each
//! valid row to its nearest code (`z_q`), and the decoder predicts token
//! logits from `z_q`. Gradients cross the quantizer by straight-through copy.

mod codebook;
mod loss;
mod model;

pub use codebook::{straight_through, straight_through_backward, Codebook, Quantized, EMA_EPS, NO_CODE};
pub use loss::{
    compute_loss, entropy_of_counts, soft_entropy, usage_counts, EntropyMode, LossBreakdown, LossError, LossGrads,
    LossWeights,
};
pub use model::{ConvBlock, Decoder, DecoderCache, Encoder, EncoderCache, ModelConfig, ModelParameters};

use rand::Rng;

use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::TokenSequence;

/// Sequences packed row-wise for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub seq_len: usize,
}

impl PackedBatch {
    pub fn pack<'a, I>(seqs: I, seq_len: usize) -> Self
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        let mut ids = Vec::new();
        let mut valid = Vec::new();
        for s in seqs {
            assert_eq!(s.len(), seq_len, "sequence length differs from batch length");
            ids.extend_from_slice(&s.ids);
            valid.extend_from_slice(&s.valid);
        }
        PackedBatch { ids, valid, seq_len }
    }

    pub fn n_seqs(&self) -> usize {
        self.ids.len().checked_div(self.seq_len).unwrap_or(0)
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&r| self.valid[r]).collect()
    }
}

/// What the decoder is asked to predict: `targets[i]` at packed row `rows[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub rows: Vec<usize>,
    pub targets: Vec<u32>,
}

impl Objective {
    /// Reconstruct every valid token of the input.
    pub fn reconstruction(batch: &PackedBatch) -> Self {
        let rows = batch.valid_rows();
        let targets = rows.iter().map(|&r| batch.ids[r]).collect();
        Objective { rows, targets }
    }
}

/// Result of one forward (and optionally backward) pass.
#[derive(Debug, Clone)]
pub struct StepOutput<T = f32> {
    pub loss: LossBreakdown,
    pub z_e: Tensor<T>,
    pub quantized: Quantized<T>,
    /// Argmax correctness per objective row.
    pub correct: Vec<bool>,
}

/// The trainable autoencoder plus its EMA codebook.
#[derive(Debug, Clone)]
pub struct VqVae<T = f32> {
    pub params: ModelParameters<T>,
    pub codebook: Codebook<T>,
}

impl<T: Scalar> VqVae<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, codes: usize, decay: f64, rng: &mut R) -> Self {
        let params = ModelParameters::new(config, rng);
        let codebook = Codebook::new(codes, config.code_dim, decay, rng);
        VqVae { params, codebook }
    }

    /// Encoder output `z_e` for a packed batch.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        batch: &PackedBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>, LossError> {
        Ok(self.params.encoder.forward(&batch.ids, batch.seq_len, None, train, rng)?.0)
    }

    /// Forward pass and loss; when `backward` is set, gradients are
    /// accumulated into the encoder and decoder slots. The codebook is never
    /// touched here: callers apply [`Codebook::ema_update`] separately.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        batch: &PackedBatch,
        objective: &Objective,
        weights: &LossWeights,
        train: bool,
        backward: bool,
        rng: &mut R,
    ) -> Result<StepOutput<T>, LossError> {
        let (z_e, enc_cache) = self.params.encoder.forward(&batch.ids, batch.seq_len, None, train, rng)?;
        let quantized = self.codebook.quantize(&z_e, &batch.valid);
        let dec_in = straight_through(&z_e, &quantized.z_q);
        let (logits, dec_cache) =
            self.params.decoder.forward(&dec_in, batch.seq_len, Some(&objective.rows), train, rng)?;
        let (loss, grads) = compute_loss(
            logits,
            &objective.targets,
            &z_e,
            &quantized.z_q,
            &batch.valid,
            &quantized.assignments,
            &self.codebook,
            weights,
        )?;
        if backward {
            let dz_q = self.params.decoder.backward(&dec_cache, &grads.dlogits);
            let mut dz_e = straight_through_backward(&dz_q, &batch.valid);
            dz_e.add_assign(&grads.dz_e);
            self.params.encoder.backward(&enc_cache, &dz_e);
        }
        Ok(StepOutput { loss, z_e, quantized, correct: grads.correct })
    }

    /// Eval-mode logits at `rows` (every row, PAD included, when `None`).
    pub fn predict<R: Rng + ?Sized>(
        &self,
        batch: &PackedBatch,
        rows: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Quantized<T>), LossError> {
        let z_e = self.encode(batch, false, rng)?;
        let q = self.codebook.quantize(&z_e, &batch.valid);
        let (logits, _) = self.params.decoder.forward(&q.z_q, batch.seq_len, rows, false, rng)?;
        Ok((logits, q))
    }

    /// Eval-mode logits for every row (PAD included).
    pub fn reconstruct_logits<R: Rng + ?Sized>(
        &self,
        batch: &PackedBatch,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Quantized<T>), LossError> {
        self.predict(batch, None, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSlot;
    use crate::tokenizer::TokenizerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { vocab_size: 11, embed_dim: 5, hidden_dim: 6, code_dim: 4, max_len: 7, kernel: 3, dropout: 0.0 }
    }

    fn small_batch(rng: &mut ChaCha8Rng) -> PackedBatch {
        let cfg = TokenizerConfig { k: 1, max_len: 7, canonical: false };
        let a = TokenSequence::from_prefix(&(0..7).map(|_| rng.random_range(0..4)).collect::<Vec<_>>(), &cfg);
        let b = TokenSequence::from_prefix(&(0..4).map(|_| rng.random_range(0..4)).collect::<Vec<_>>(), &cfg);
        PackedBatch::pack([&a, &b], 7)
    }

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = VqVae::<f32>::new(ModelConfig::default(), 512, 0.95, &mut rng);
        let shapes: Vec<(&str, Vec<usize>)> =
            model.params.params().iter().map(|p| (p.name.as_str(), p.shape().to_vec())).collect();
        let want: &[(&str, &[usize])] = &[
            ("encoder.embed", &[4099, 128]),
            ("encoder.block1.conv.weight", &[3, 128, 256]),
            ("encoder.block1.conv.bias", &[256]),
            ("encoder.block1.norm.gain", &[256]),
            ("encoder.block1.norm.shift", &[256]),
            ("encoder.block2.conv.weight", &[3, 256, 256]),
            ("encoder.block2.conv.bias", &[256]),
            ("encoder.block2.norm.gain", &[256]),
            ("encoder.block2.norm.shift", &[256]),
            ("encoder.proj.weight", &[256, 64]),
            ("encoder.proj.bias", &[64]),
            ("decoder.block1.conv.weight", &[3, 64, 256]),
            ("decoder.block1.conv.bias", &[256]),
            ("decoder.block1.norm.gain", &[256]),
            ("decoder.block1.norm.shift", &[256]),
            ("decoder.block2.conv.weight", &[3, 256, 256]),
            ("decoder.block2.conv.bias", &[256]),
            ("decoder.block2.norm.gain", &[256]),
            ("decoder.block2.norm.shift", &[256]),
            ("decoder.out.weight", &[256, 4099]),
            ("decoder.out.bias", &[4099]),
        ];
        assert_eq!(shapes.len(), want.len());
        for ((n, s), (wn, ws)) in shapes.iter().zip(want) {
            assert_eq!((n, s.as_slice()), (wn, *ws));
        }
        assert_eq!(model.codebook.vectors.shape(), &[512, 64]);

        let tcfg = TokenizerConfig::default();
        let seq = TokenSequence::from_prefix(&[5, 9, 4095], &tcfg);
        let batch = PackedBatch::pack([&seq], 150);
        let z = model.encode(&batch, false, &mut rng).unwrap();
        assert_eq!(z.shape(), &[150, 64]);
        let (logits, _) = model.reconstruct_logits(&batch, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[150, 4099]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = small_cfg();
        cfg.dropout = 0.5;
        let model = VqVae::<f64>::new(cfg, 8, 0.95, &mut rng);
        let batch = small_batch(&mut rng);
        let a = model.encode(&batch, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.encode(&batch, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let c = model.encode(&batch, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(a, c);
        let (la, _) = model.reconstruct_logits(&batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (lb, _) = model.reconstruct_logits(&batch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn zero_decoder_weights_give_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = VqVae::<f64>::new(small_cfg(), 8, 0.95, &mut rng);
        model.params.decoder.out.weight.value.fill(0.0);
        let bias: Vec<f64> = (0..11).map(|i| i as f64 * 0.3 - 1.0).collect();
        model.params.decoder.out.bias.value.data_mut().copy_from_slice(&bias);
        let batch = small_batch(&mut rng);
        let (logits, _) = model.reconstruct_logits(&batch, &mut rng).unwrap();
        for r in 0..logits.rows() {
            assert_eq!(logits.row(r), &bias[..]);
        }
    }

    #[test]
    fn z_q_rows_are_exact_codebook_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = VqVae::<f32>::new(small_cfg(), 8, 0.95, &mut rng);
        let batch = small_batch(&mut rng);
        let (_, q) = model.reconstruct_logits(&batch, &mut rng).unwrap();
        for (r, &a) in q.assignments.iter().enumerate() {
            if batch.valid[r] {
                let code = model.codebook.vectors.row(a as usize);
                assert!(q.z_q.row(r).iter().zip(code).all(|(x, y)| x.to_bits() == y.to_bits()));
            } else {
                assert_eq!(a, NO_CODE);
            }
        }
    }

    #[test]
    fn quantizer_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let k = rng.random_range(1..20);
            let d = rng.random_range(1..20);
            let rows = rng.random_range(1..10);
            let mut book = Codebook::<f32>::new(k, d, 0.95, &mut rng);
            if rng.random_bool(0.3) {
                // duplicate a code so ties occur
                let src = book.vectors.row(0).to_vec();
                let dst = rng.random_range(0..k);
                book.vectors.row_mut(dst).copy_from_slice(&src);
            }
            let z = Tensor::from_vec(&[rows, d], (0..rows * d).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
            let valid: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.8)).collect();
            let q = book.quantize(&z, &valid);
            for r in 0..rows {
                if !valid[r] {
                    assert_eq!(q.assignments[r], NO_CODE);
                    continue;
                }
                let dist: Vec<f64> = (0..k)
                    .map(|j| {
                        z.row(r).iter().zip(book.vectors.row(j)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum()
                    })
                    .collect();
                let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
                let want = dist.iter().position(|&x| x == best).unwrap();
                assert_eq!(q.assignments[r] as usize, want);
            }
        }
    }

    fn snapshot(model: &VqVae<f64>) -> Vec<f64> {
        model.params.params().iter().flat_map(|p| p.value.data().to_vec()).collect()
    }

    fn set_flat(model: &mut VqVae<f64>, flat: &[f64]) {
        let mut off = 0;
        for p in model.params.params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    #[test]
    fn straight_through_composite_matches_finite_differences() {
        // With the offset delta = z_q - z_e frozen at theta_0, the decoder sees
        // z_e(theta) + delta; its gradient equals the straight-through one.
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut model = VqVae::<f64>::new(small_cfg(), 6, 0.95, &mut rng);
            let batch = small_batch(&mut rng);
            let obj = Objective::reconstruction(&batch);
            let w = LossWeights { commitment: 0.0, entropy: 0.0, entropy_mode: EntropyMode::Value };
            model.params.zero_grad();
            let out = model.step(&batch, &obj, &w, false, true, &mut rng).unwrap();
            let delta: Vec<f64> = out.quantized.z_q.data().iter().zip(out.z_e.data()).map(|(q, e)| q - e).collect();
            let grads: Vec<f64> = model.params.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
            let theta0 = snapshot(&model);

            let composite = |m: &VqVae<f64>| -> f64 {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let mut z = m.encode(&batch, false, &mut r).unwrap();
                for (i, (v, d)) in z.data_mut().iter_mut().zip(&delta).enumerate() {
                    *v = if batch.valid[i / 4] { *v + d } else { 0.0 };
                }
                let (logits, _) = m.params.decoder.forward(&z, batch.seq_len, Some(&obj.rows), false, &mut r).unwrap();
                crate::numerics::softmax_xent(logits, &obj.targets).unwrap().loss
            };

            let mut probe = model.clone();
            let h = 1e-6;
            let mut checked = 0;
            let enc_len: usize = model.params.encoder.params().iter().map(|p| p.value.len()).sum();
            for i in (0..enc_len).step_by(7) {
                let mut t = theta0.clone();
                t[i] += h;
                set_flat(&mut probe, &t);
                let fp = composite(&probe);
                t[i] -= 2.0 * h;
                set_flat(&mut probe, &t);
                let fm = composite(&probe);
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[i];
                let err = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-7);
                assert!(err < 1e-4, "param {i}: {num} vs {ana}");
                checked += 1;
            }
            assert!(checked > 20);
            let enc_norm: f64 = grads[..enc_len].iter().map(|g| g * g).sum();
            assert!(enc_norm > 0.0, "encoder receives gradient through the quantizer");
        }
    }

    #[test]
    fn codebook_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = VqVae::<f64>::new(small_cfg(), 6, 0.95, &mut rng);
        let before = model.codebook.clone();
        let batch = small_batch(&mut rng);
        let obj = Objective::reconstruction(&batch);
        let w = LossWeights { entropy_mode: EntropyMode::Soft, ..LossWeights::default() };
        model.step(&batch, &obj, &w, true, true, &mut rng).unwrap();
        assert_eq!(model.codebook, before);
        assert!(model.params.params().iter().all(|p: &&ParamSlot<f64>| p.grad.is_finite()));
    }

    #[test]
    fn pad_rows_are_unassigned_and_entropy_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = VqVae::<f64>::new(small_cfg(), 6, 0.95, &mut rng);
        let batch = small_batch(&mut rng);
        let obj = Objective::reconstruction(&batch);
        let out = model.step(&batch, &obj, &LossWeights::default(), false, false, &mut rng).unwrap();
        for (r, &a) in out.quantized.assignments.iter().enumerate() {
            assert_eq!(a == NO_CODE, !batch.valid[r]);
        }
        assert_eq!(out.loss.batch_usage.iter().sum::<u64>(), 11);
        assert!(out.loss.entropy >= 0.0 && out.loss.entropy <= 6f64.ln() + 1e-12);
    }

    #[test]
    fn ema_fixed_point_on_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let centers = [[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0], [0.0, -4.0]];
        let pts: Vec<[f64; 2]> = (0..400)
            .map(|i| {
                let c = centers[i % 4];
                [c[0] + 0.3 * (rng.random::<f64>() - 0.5), c[1] + 0.3 * (rng.random::<f64>() - 0.5)]
            })
            .collect();
        let init: Vec<f64> = pts[..4].iter().flatten().copied().collect();
        let mut book = Codebook::from_vectors(Tensor::from_vec(&[4, 2], init).unwrap(), 0.95);
        let z = Tensor::from_vec(&[400, 2], pts.iter().flatten().copied().collect()).unwrap();
        let valid = vec![true; 400];
        for _ in 0..500 {
            let q = book.quantize(&z, &valid);
            book.ema_update(&z, &q.assignments);
        }
        for (j, _) in centers.iter().enumerate() {
            let members: Vec<&[f64; 2]> = pts.iter().skip(j).step_by(4).collect();
            let mean = [
                members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64,
                members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64,
            ];
            let v = book.vectors.row(j);
            let dist = ((v[0] - mean[0]).powi(2) + (v[1] - mean[1]).powi(2)).sqrt();
            assert!(dist < 0.05, "code {j} at distance {dist}");
        }
    }
}

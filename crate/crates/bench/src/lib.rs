//! Seeded inputs shared by the kernel benchmarks.

use rand::Rng;
use vqgenome::numerics::Tensor;
use vqgenome::rng::{keyed, Stream};
use vqgenome::tokenizer::{TokenSequence, TokenizerConfig};
use vqgenome::vqvae::PackedBatch;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = keyed(seed, Stream::Eval, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data length")
}

/// `n` full-length random k-mer sequences, packed.
pub fn random_batch(n: usize, cfg: &TokenizerConfig, seed: u64) -> PackedBatch {
    let mut rng = keyed(seed, Stream::Eval, &[1]);
    let kmers = 4u32.pow(cfg.k as u32);
    let seqs: Vec<TokenSequence> = (0..n)
        .map(|_| {
            let ids: Vec<u32> = (0..cfg.max_len).map(|_| rng.random_range(0..kmers)).collect();
            TokenSequence::from_prefix(&ids, cfg)
        })
        .collect();
    PackedBatch::pack(&seqs, cfg.max_len)
}

//! Checkpoint conversion for contrastive projection heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Config, FinetuneSettings};
use super::train::{Result, TrainError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::contrastive::{FinetuneOutcome, ProjectionHead};
use crate::vqvae::{Encoder, VqVae};

/// Head weights, settings echo and, for unfrozen runs, the tuned encoder.
pub fn head_to_checkpoint(
    settings: &FinetuneSettings,
    outcome: &FinetuneOutcome<f32>,
    vocab_size: usize,
) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.set_meta("kind", "head");
    c.set_meta("in_dim", outcome.head.in_dim());
    c.set_meta("out_dim", outcome.head.out_dim());
    c.set_meta("vocab_size", vocab_size);
    for (k, v) in settings.echo_pairs() {
        c.set_meta(format!("config.{k}"), v);
    }
    let losses: Vec<String> = outcome.epoch_losses.iter().map(|l| format!("{l:.6}")).collect();
    c.set_meta("epoch_losses", losses.join(","));
    c.store_slots(outcome.head.params());
    if settings.unfreeze_encoder {
        c.store_slots(outcome.encoder.params());
    }
    c
}

/// Rebuilds the head and the encoder to embed with (the base model's own
/// encoder unless the checkpoint carries a tuned one).
pub fn head_from_checkpoint(
    ckpt: &Checkpoint,
    model: &VqVae<f32>,
) -> Result<(FinetuneSettings, ProjectionHead<f32>, Encoder<f32>)> {
    if ckpt.meta("kind") != Some("head") {
        return Err(CheckpointError::Malformed("not a projection-head checkpoint".into()).into());
    }
    let mut settings = FinetuneSettings::default();
    for (k, v) in &ckpt.metadata {
        if let Some(key) = k.strip_prefix("config.") {
            settings.set(key, v)?;
        }
    }
    let num = |key: &str| -> Result<usize> {
        ckpt.require_meta(key)?.parse().map_err(|_| CheckpointError::Malformed(format!("bad `{key}`")).into())
    };
    let (in_dim, out_dim, vocab) = (num("in_dim")?, num("out_dim")?, num("vocab_size")?);
    let cfg = model.params.config;
    if vocab != cfg.vocab_size || in_dim != cfg.code_dim {
        return Err(TrainError::Mismatch(format!(
            "head was trained for V={vocab}, D={in_dim}; model has V={}, D={}",
            cfg.vocab_size, cfg.code_dim
        )));
    }
    let mut head = ProjectionHead::new(in_dim, out_dim, &mut ChaCha8Rng::seed_from_u64(0));
    ckpt.restore_slots(head.params_mut())?;
    let mut encoder = model.params.encoder.clone();
    if settings.unfreeze_encoder {
        ckpt.restore_slots(encoder.params_mut())?;
    }
    Ok((settings, head, encoder))
}

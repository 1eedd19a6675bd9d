//! Epoch loop, metrics log and checkpoint conversion for VQ-VAE training.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use super::config::{Config, ConfigError, TrainConfig, TrainObjective};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::masking::{epoch_mask, masked_loss, MaskingError};
use crate::numerics::{adamw_step, NumericsError, Tensor};
use crate::rng::{keyed, Stream};
use crate::tokenizer::{CorpusHeader, TokenSequence};
use crate::vqvae::{entropy_of_counts, usage_counts, Codebook, LossError, Objective, PackedBatch, StepOutput, VqVae};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, what: String },
    #[error("no training sequences")]
    EmptyDataset,
    #[error("corpus does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Column header of `metrics.tsv`. Loss columns are batch means; `accuracy`
/// is argmax accuracy over the scored positions; codebook columns count
/// every assignment made during the epoch.
pub const METRICS_HEADER: &str =
    "epoch\tbatches\tloss\trecon\tcommit\tentropy\taccuracy\tactive_codes\tutilization\tperplexity";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub recon: f64,
    pub commit: f64,
    pub entropy: f64,
    pub accuracy: f64,
    pub active_codes: usize,
    pub utilization: f64,
    pub perplexity: f64,
}

impl EpochMetrics {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}",
            self.epoch,
            self.batches,
            self.loss,
            self.recon,
            self.commit,
            self.entropy,
            self.accuracy,
            self.active_codes,
            self.utilization,
            self.perplexity
        )
    }
}

/// Model plus the configuration and progress needed to continue training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: VqVae<f32>,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed(config.seed, Stream::Init, &[]);
        let model = VqVae::new(config.model(), config.codebook_size, config.ema_decay, &mut rng);
        Ok(Trainer { config, model, epochs_done: 0 })
    }

    /// Rejects a corpus whose k, length or vocabulary differ from the model.
    pub fn check_corpus(&self, header: &CorpusHeader) -> Result<()> {
        let (k, l, v) = (self.config.k, self.config.max_len, self.config.model().vocab_size);
        if header.k as usize != k || header.max_len as usize != l || header.vocab_size as usize != v {
            return Err(TrainError::Mismatch(format!(
                "corpus has k={} L={} V={}, model expects k={k} L={l} V={v}",
                header.k, header.max_len, header.vocab_size
            )));
        }
        Ok(())
    }

    /// One pass over `data` in a seeded order: per batch forward, loss,
    /// backward, EMA codebook update, AdamW step.
    pub fn run_epoch(&mut self, data: &[TokenSequence]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let cfg = self.config.clone();
        let epoch = self.epochs_done;
        let weights = cfg.loss_weights();
        let opt = cfg.adamw();
        let mask_id = cfg.tokenizer().mask();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut keyed(cfg.seed, Stream::Shuffle, &[epoch as u64]));

        let mut sums = [0.0f64; 4];
        let (mut correct, mut scored) = (0usize, 0usize);
        let mut usage = vec![0u64; cfg.codebook_size];
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let non_finite = |what: &str| TrainError::NonFinite { epoch: epoch + 1, batch: b, what: what.to_string() };
            let mut rng = keyed(cfg.seed, Stream::Dropout, &[epoch as u64, b as u64]);
            self.model.params.zero_grad();
            let out: StepOutput<f32> = match cfg.objective {
                TrainObjective::Base => {
                    let batch = PackedBatch::pack(idx.iter().map(|&i| &data[i]), cfg.max_len);
                    let objective = Objective::reconstruction(&batch);
                    self.model.step(&batch, &objective, &weights, true, true, &mut rng)?
                }
                TrainObjective::Masked => {
                    let items = epoch_mask(
                        idx.iter().map(|&i| (i as u64, &data[i])),
                        cfg.p_mask,
                        mask_id,
                        cfg.seed,
                        epoch as u64,
                    )?;
                    masked_loss(&mut self.model, &items, &weights, true, true, &mut rng)?
                }
            };
            let l = &out.loss;
            if ![l.total, l.recon, l.commit, l.entropy].iter().all(|v| v.is_finite()) {
                return Err(non_finite("loss"));
            }
            self.model.codebook.ema_update(&out.z_e, &out.quantized.assignments);
            if !self.model.codebook.vectors.is_finite() {
                return Err(non_finite("codebook"));
            }
            adamw_step(&mut self.model.params.params_mut(), &opt).map_err(|e| match e {
                NumericsError::NonFiniteGradient(name) => non_finite(&format!("gradient in {name}")),
                e => TrainError::Loss(LossError::Numerics(e)),
            })?;

            for (s, v) in sums.iter_mut().zip([l.total, l.recon, l.commit, l.entropy]) {
                *s += v;
            }
            correct += out.correct.iter().filter(|&&c| c).count();
            scored += out.correct.len();
            for (u, c) in usage.iter_mut().zip(usage_counts(&out.quantized.assignments, cfg.codebook_size)) {
                *u += c;
            }
            batches += 1;
        }
        self.epochs_done += 1;
        let n = batches as f64;
        let active = usage.iter().filter(|&&c| c > 0).count();
        Ok(EpochMetrics {
            epoch: self.epochs_done,
            batches,
            loss: sums[0] / n,
            recon: sums[1] / n,
            commit: sums[2] / n,
            entropy: sums[3] / n,
            accuracy: correct as f64 / scored.max(1) as f64,
            active_codes: active,
            utilization: active as f64 / cfg.codebook_size as f64,
            perplexity: entropy_of_counts(&usage).exp(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "vqvae");
        c.set_meta("objective", self.config.objective);
        c.set_meta("epoch", self.epochs_done);
        for (k, v) in self.config.echo_pairs() {
            c.set_meta(format!("config.{k}"), v);
        }
        c.store_slots(self.model.params.params());
        let book = &self.model.codebook;
        c.put("codebook.vectors", book.vectors.clone());
        c.put(
            "codebook.ema_counts",
            Tensor::from_vec(&[book.size()], book.ema_counts.clone()).expect("count vector shape"),
        );
        c.put("codebook.ema_sums", book.ema_sums.clone());
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("vqvae") {
            return Err(CheckpointError::Malformed("not a VQ-VAE checkpoint".into()).into());
        }
        let mut config = TrainConfig::default();
        for (k, v) in &ckpt.metadata {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            }
        }
        config.validate()?;
        if ckpt.require_meta("objective")? != config.objective.to_string() {
            return Err(CheckpointError::Malformed("objective disagrees with config echo".into()).into());
        }
        let epochs_done =
            ckpt.require_meta("epoch")?.parse().map_err(|_| CheckpointError::Malformed("bad epoch".into()))?;
        let mut trainer = Trainer::new(config)?;
        trainer.epochs_done = epochs_done;
        ckpt.restore_slots(trainer.model.params.params_mut())?;
        let (k, d) = (trainer.config.codebook_size, trainer.config.code_dim);
        let mut book =
            Codebook::from_vectors(ckpt.get_shaped("codebook.vectors", &[k, d])?.clone(), trainer.config.ema_decay);
        book.ema_counts = ckpt.get_shaped("codebook.ema_counts", &[k])?.data().to_vec();
        book.ema_sums = ckpt.get_shaped("codebook.ema_sums", &[k, d])?.clone();
        trainer.model.codebook = book;
        Ok(trainer)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.vqww")
}

/// Runs the remaining epochs, appending to `dir/metrics.tsv`, saving
/// `dir/checkpoints/epoch-NNNN.vqww` after each epoch (keeping the newest
/// `keep_checkpoints`) and `dir/model.vqww` at the end.
pub fn train(
    trainer: &mut Trainer,
    data: &[TokenSequence],
    dir: &Path,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = dir.join("metrics.tsv");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "{METRICS_HEADER}")?;
    }
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut history = Vec::new();
    while trainer.epochs_done < trainer.config.epochs {
        let m = trainer.run_epoch(data)?;
        writeln!(log, "{}", m.to_row())?;
        log.flush()?;
        let path = ckpt_dir.join(checkpoint_name(m.epoch));
        trainer.to_checkpoint().save(&path)?;
        saved.push(path);
        while saved.len() > trainer.config.keep_checkpoints {
            fs::remove_file(saved.remove(0))?;
        }
        on_epoch(&m);
        history.push(m);
    }
    trainer.to_checkpoint().save(&dir.join("model.vqww"))?;
    Ok(history)
}

/// The metrics log text for a sequence of epochs, header included.
pub fn metrics_text(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(s, "{}", m.to_row());
    }
    s
}

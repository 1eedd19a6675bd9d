//! Configuration, dataset preparation, training orchestration and run
//! directories.

pub mod config;
mod heads;
mod rundir;
mod split;
mod synth;
mod train;

pub use config::{
    ClusterConfig, Config, ConfigError, EvalConfig, FinetuneSettings, QcConfig, SplitPart, SweepConfig, SynthConfig,
    TokenizeConfig, TrainConfig, TrainObjective,
};
pub use heads::{head_from_checkpoint, head_to_checkpoint};
pub use rundir::RunDir;
pub use split::{select_part, split_dataset, EmptyDataset};
pub use synth::{generate_synthetic, quality_mix, read_truth, write_truth, SynthCorpus};
pub use train::{checkpoint_name, metrics_text, train, EpochMetrics, TrainError, Trainer, METRICS_HEADER};

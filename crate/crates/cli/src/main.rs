//! `vqgenome` command line.
//!
//! Every subcommand takes `--config FILE` plus one `--key value` flag per
//! config field, writes into a fresh run directory (`--out`, or the next free
//! `runs/<command>-NNN`) and echoes the effective config there.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage error, 3 config error.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgMatches, Command};
use vqgenome::contrastive::ContrastiveError;
use vqgenome::pipeline::{
    ClusterConfig, Config, ConfigError, EvalConfig, FinetuneSettings, QcConfig, SweepConfig, SynthConfig,
    TokenizeConfig, TrainConfig, TrainError,
};

/// Config problem detected before or while validating inputs.
#[derive(Debug)]
struct ConfigProblem(String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<ConfigProblem>() {
            return 3;
        }
        if let Some(TrainError::Config(_) | TrainError::Mismatch(_)) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
        if let Some(ContrastiveError::ConfigMismatch(_)) = cause.downcast_ref::<ContrastiveError>() {
            return 3;
        }
    }
    1
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// `--config` plus one flag per key of `C`; boolean keys also work bare.
fn config_args<C: Config>(cmd: Command) -> Command {
    let defaults = C::default().echo_pairs();
    let mut cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("flat `key = value` config file"));
    for key in C::KEYS {
        let is_bool = defaults.iter().any(|(k, v)| k == key && (v == "true" || v == "false"));
        let default = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone()).unwrap_or_default();
        let mut arg =
            Arg::new(*key).long(flag_name(key)).value_name("VALUE").help(format!("config `{key}` (default {default})"));
        if key.contains('_') {
            arg = arg.alias(*key);
        }
        if is_bool {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn path_arg(name: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn out_arg() -> Arg {
    path_arg("out", "run directory to create (must not exist)", false)
}

fn cli() -> Command {
    Command::new("vqgenome")
        .about("k-mer VQ-VAE training and evaluation for sequencing reads")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            config_args::<SynthConfig>(Command::new("synth").about("generate a synthetic lineage corpus"))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<QcConfig>(Command::new("qc").about("quality-trim a FASTQ file"))
                .arg(path_arg("input", "FASTQ input (plain or gzip)", true))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<TokenizeConfig>(Command::new("tokenize").about("k-mer tokenize a FASTQ file"))
                .arg(path_arg("input", "FASTQ input (plain or gzip)", true))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<TrainConfig>(Command::new("train").about("train a VQ-VAE on a tokenized corpus"))
                .arg(path_arg("corpus", "tokenized corpus (.vqtk)", true))
                .arg(path_arg("resume", "continue from an epoch checkpoint", false))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<FinetuneSettings>(Command::new("finetune").about("train a contrastive projection head"))
                .arg(path_arg("checkpoint", "trained VQ-VAE checkpoint", true))
                .arg(path_arg("corpus", "tokenized corpus (.vqtk)", true))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<EvalConfig>(Command::new("eval-recon").about("reconstruction accuracy"))
                .arg(path_arg("checkpoint", "trained VQ-VAE checkpoint", true))
                .arg(path_arg("corpus", "tokenized corpus (.vqtk)", true))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<EvalConfig>(Command::new("eval-codebook").about("codebook usage statistics"))
                .arg(path_arg("checkpoint", "trained VQ-VAE checkpoint", true))
                .arg(path_arg("corpus", "tokenized corpus (.vqtk)", true))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<ClusterConfig>(Command::new("eval-cluster").about("k-means and clustering indices"))
                .arg(path_arg("embeddings", "embedding file (.vqem)", true))
                .arg(path_arg("truth", "read_id<TAB>lineage file for ARI", false))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<EvalConfig>(Command::new("embed").about("export sequence embeddings"))
                .arg(path_arg("checkpoint", "trained VQ-VAE checkpoint", true))
                .arg(path_arg("corpus", "tokenized corpus (.vqtk)", true))
                .arg(path_arg("head", "projection head checkpoint; pooled latents when absent", false))
                .arg(out_arg()),
        )
        .subcommand(
            config_args::<SweepConfig>(Command::new("sweep-mask").about("masked-position accuracy sweep"))
                .arg(path_arg("checkpoint", "trained VQ-VAE checkpoint", true))
                .arg(path_arg("corpus", "tokenized corpus (.vqtk)", true))
                .arg(out_arg()),
        )
}

/// Raw `(key, value)` pairs: config file first, flags after.
pub struct Settings {
    pub file_text: Option<String>,
    pub overrides: Vec<(String, String)>,
}

impl Settings {
    fn from_matches<C: Config>(m: &ArgMatches) -> Result<Self> {
        let file_text = match m.get_one::<String>("config") {
            Some(path) => Some(std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?),
            None => None,
        };
        let overrides =
            C::KEYS.iter().filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone()))).collect();
        Ok(Settings { file_text, overrides })
    }

    pub fn load<C: Config>(&self) -> Result<C, ConfigError> {
        C::load(self.file_text.as_deref(), &self.overrides)
    }
}

fn run(args: Vec<OsString>) -> Result<()> {
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand is required");
    match name {
        "synth" => commands::synth(Settings::from_matches::<SynthConfig>(m)?, m),
        "qc" => commands::qc(Settings::from_matches::<QcConfig>(m)?, m),
        "tokenize" => commands::tokenize_cmd(Settings::from_matches::<TokenizeConfig>(m)?, m),
        "train" => commands::train(Settings::from_matches::<TrainConfig>(m)?, m),
        "finetune" => commands::finetune(Settings::from_matches::<FinetuneSettings>(m)?, m),
        "eval-recon" => commands::eval_recon(Settings::from_matches::<EvalConfig>(m)?, m),
        "eval-codebook" => commands::eval_codebook(Settings::from_matches::<EvalConfig>(m)?, m),
        "eval-cluster" => commands::eval_cluster(Settings::from_matches::<ClusterConfig>(m)?, m),
        "embed" => commands::embed(Settings::from_matches::<EvalConfig>(m)?, m),
        "sweep-mask" => commands::sweep_mask(Settings::from_matches::<SweepConfig>(m)?, m),
        other => unreachable!("unhandled subcommand {other}"),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }
}

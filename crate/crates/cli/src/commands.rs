use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use vqgenome::checkpoint::Checkpoint;
use vqgenome::contrastive::{
    embed as embed_sequences, finetune as run_finetune, pool_sequences, read_embeddings, write_embeddings,
};
use vqgenome::evalsuite::{clustering_eval, codebook_eval, codebook_table, gc_per_code, recon_eval};
use vqgenome::masking::masked_accuracy_sweep;
use vqgenome::numerics::Tensor;
use vqgenome::pipeline::config::parse_pairs;
use vqgenome::pipeline::{
    self, generate_synthetic, head_from_checkpoint, head_to_checkpoint, read_truth, select_part, write_truth,
    ClusterConfig, Config, EvalConfig, FinetuneSettings, QcConfig, RunDir, SplitPart, SweepConfig, SynthConfig,
    TokenizeConfig, TrainConfig, Trainer,
};
use vqgenome::seqio::{open_fastq, qc_summary, quality_trim, write_fastq, QualityRead};
use vqgenome::tokenizer::{read_corpus, tokenize, write_corpus, CorpusHeader, TokenRecord};

use crate::{ConfigProblem, Settings};

const CONFIG_ECHO: &str = "config.cfg";

fn run_dir(m: &ArgMatches, command: &str) -> Result<RunDir> {
    let target = match m.get_one::<PathBuf>("out") {
        Some(p) => p.clone(),
        None => (1..)
            .map(|i| PathBuf::from("runs").join(format!("{command}-{i:03}")))
            .find(|p| !p.exists())
            .expect("unbounded search"),
    };
    RunDir::create(&target).with_context(|| format!("creating {}", target.display()))
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn finish(run: RunDir) -> Result<()> {
    let out = run.commit()?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn read_reads(input: &Path) -> Result<Vec<QualityRead>> {
    let reader = open_fastq(input).with_context(|| format!("opening {}", input.display()))?;
    reader.collect::<Result<Vec<_>, _>>().with_context(|| format!("parsing {}", input.display()))
}

fn load_corpus(p: &Path) -> Result<(CorpusHeader, Vec<TokenRecord>)> {
    let mut r = BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?);
    read_corpus(&mut r).with_context(|| format!("reading corpus {}", p.display()))
}

/// Model from a checkpoint plus the requested split of a matching corpus.
fn model_and_records(m: &ArgMatches, part: SplitPart) -> Result<(Trainer, Vec<TokenRecord>)> {
    let ckpt = path(m, "checkpoint");
    let trainer = Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (header, records) = load_corpus(path(m, "corpus"))?;
    trainer.check_corpus(&header)?;
    let records = select_part(records, part, trainer.config.train_frac, trainer.config.seed)?;
    if records.is_empty() {
        bail!(ConfigProblem(format!("the {part} split of the corpus is empty")));
    }
    Ok((trainer, records))
}

pub fn synth(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: SynthConfig = s.load()?;
    let run = run_dir(m, "synth")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let corpus = generate_synthetic(&cfg);
    let mut w = BufWriter::new(File::create(run.path().join("reads.fastq"))?);
    write_fastq(&mut w, &corpus.reads)?;
    w.flush()?;
    let mut t = Vec::new();
    write_truth(&mut t, &corpus.truth)?;
    run.write("truth.tsv", t)?;
    let mut fasta = format!(">root\n{}\n", String::from_utf8_lossy(&corpus.root));
    for (l, g) in corpus.genomes.iter().enumerate() {
        let _ = writeln!(fasta, ">lineage_{l}\n{}", String::from_utf8_lossy(g));
    }
    run.write("genomes.fasta", fasta)?;
    finish(run)
}

pub fn qc(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: QcConfig = s.load()?;
    let reads = read_reads(path(m, "input"))?;
    let run = run_dir(m, "qc")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let q = cfg.quality();
    let kept: Vec<QualityRead> = reads.iter().filter_map(|r| quality_trim(r, &q)).collect();
    let mut w = BufWriter::new(File::create(run.path().join("trimmed.fastq"))?);
    write_fastq(&mut w, &kept)?;
    w.flush()?;
    run.write("qc_report.txt", qc_summary(&reads, &kept).to_report())?;
    finish(run)
}

pub fn tokenize_cmd(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: TokenizeConfig = s.load()?;
    let tok = cfg.tokenizer();
    let reads = read_reads(path(m, "input"))?;
    let run = run_dir(m, "tokenize")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let (mut records, mut too_short, mut unk, mut truncated) = (Vec::new(), 0usize, 0usize, 0usize);
    for r in &reads {
        match tokenize(&r.bases, &tok) {
            Ok(tokens) => {
                unk += tokens.ids.iter().filter(|&&t| t == tok.unk()).count();
                truncated += usize::from(r.len() + 1 - tok.k > tok.max_len);
                records.push(TokenRecord { id: r.id.clone(), tokens });
            }
            Err(_) => too_short += 1,
        }
    }
    let mut w = BufWriter::new(File::create(run.path().join("corpus.vqtk"))?);
    write_corpus(&mut w, &tok, &records)?;
    w.flush()?;
    run.write(
        "tokenize_report.txt",
        format!(
            "reads_in = {}\nrecords = {}\nskipped_too_short = {too_short}\ntruncated = {truncated}\nunk_tokens = {unk}\nvocab_size = {}\n",
            reads.len(),
            records.len(),
            tok.vocab_size()
        ),
    )?;
    finish(run)
}

/// Only these keys may change when resuming.
const RESUMABLE: [&str; 2] = ["epochs", "keep_checkpoints"];

pub fn train(s: Settings, m: &ArgMatches) -> Result<()> {
    let (header, records) = load_corpus(path(m, "corpus"))?;
    let mut trainer = match m.get_one::<PathBuf>("resume") {
        Some(ckpt) => {
            let mut t = Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let mut pairs = match s.file_text.as_deref() {
                Some(text) => parse_pairs(text)?,
                None => Vec::new(),
            };
            pairs.extend(s.overrides.iter().cloned());
            for (k, v) in pairs {
                if !RESUMABLE.contains(&k.as_str()) {
                    bail!(ConfigProblem(format!("`{k}` cannot change when resuming (only epochs, keep_checkpoints)")));
                }
                t.config.set(&k, &v)?;
            }
            t.config.validate()?;
            if t.epochs_done >= t.config.epochs {
                bail!(ConfigProblem(format!(
                    "checkpoint already has {} epochs; raise --epochs to continue",
                    t.epochs_done
                )));
            }
            t
        }
        None => Trainer::new(s.load::<TrainConfig>()?)?,
    };
    trainer.check_corpus(&header)?;
    let cfg = trainer.config.clone();
    let (train_set, test_set) = pipeline::split_dataset(records, cfg.train_frac, cfg.seed)?;
    let run = run_dir(m, "train")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let mut split = String::from("id\tpart\n");
    for (r, part) in train_set.iter().map(|r| (r, "train")).chain(test_set.iter().map(|r| (r, "test"))) {
        let _ = writeln!(split, "{}\t{part}", r.id);
    }
    run.write("split.tsv", split)?;
    let data: Vec<_> = train_set.into_iter().map(|r| r.tokens).collect();
    eprintln!(
        "training {} sequences ({} held out), epochs {}..{}",
        data.len(),
        test_set.len(),
        trainer.epochs_done + 1,
        cfg.epochs
    );
    let start = Instant::now();
    pipeline::train(&mut trainer, &data, run.path(), |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  recon {:.4}  acc {:.4}  active {}  [{:.0}s]",
            e.epoch,
            e.loss,
            e.recon,
            e.accuracy,
            e.active_codes,
            start.elapsed().as_secs_f64()
        );
    })?;
    finish(run)
}

pub fn finetune(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: FinetuneSettings = s.load()?;
    let (trainer, records) = model_and_records(m, cfg.split)?;
    let run = run_dir(m, "finetune")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let seqs: Vec<_> = records.into_iter().map(|r| r.tokens).collect();
    let mask = trainer.config.tokenizer().mask();
    let start = Instant::now();
    let outcome = run_finetune(&trainer.model, &seqs, mask, &cfg.finetune(), |epoch, batch, loss| {
        if batch % 50 == 0 {
            eprintln!(
                "epoch {:>2} batch {:>4}  loss {loss:.4}  [{:.0}s]",
                epoch + 1,
                batch,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let mut log = String::from("epoch\tloss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{}\t{l:.6}", e + 1);
    }
    run.write("finetune_metrics.tsv", log)?;
    head_to_checkpoint(&cfg, &outcome, trainer.config.model().vocab_size).save(&run.path().join("head.vqww"))?;
    finish(run)
}

pub fn eval_recon(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: EvalConfig = s.load()?;
    let (trainer, records) = model_and_records(m, cfg.split)?;
    let run = run_dir(m, "eval-recon")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let seqs: Vec<_> = records.iter().map(|r| r.tokens.clone()).collect();
    let out = recon_eval(&trainer.model, &seqs, cfg.batch_size)?;
    run.write("recon_report.txt", out.report.to_report())?;
    let mut table = String::from("id\tcorrect\tvalid\taccuracy\texact\n");
    for (r, &(c, n)) in records.iter().zip(&out.per_sequence) {
        let acc = if n == 0 { 0.0 } else { c as f64 / n as f64 };
        let _ = writeln!(table, "{}\t{c}\t{n}\t{acc:.6}\t{}", r.id, u8::from(n > 0 && c == n));
    }
    run.write("per_sequence.tsv", table)?;
    finish(run)
}

pub fn eval_codebook(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: EvalConfig = s.load()?;
    let (trainer, records) = model_and_records(m, cfg.split)?;
    let run = run_dir(m, "eval-codebook")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let seqs: Vec<_> = records.into_iter().map(|r| r.tokens).collect();
    let out = recon_eval(&trainer.model, &seqs, cfg.batch_size)?;
    let codes = trainer.config.codebook_size;
    let report = codebook_eval(&out.assignments, codes)?;
    let gc = gc_per_code(&out.tokens, &out.assignments, trainer.config.k, codes);
    run.write("codebook_report.txt", report.to_report())?;
    run.write("codebook_table.tsv", codebook_table(&report, &gc))?;
    finish(run)
}

pub fn embed(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: EvalConfig = s.load()?;
    let (trainer, records) = model_and_records(m, cfg.split)?;
    let head = match m.get_one::<PathBuf>("head") {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let loaded = head_from_checkpoint(&ckpt, &trainer.model)?;
            if loaded.0.pool != cfg.pool {
                bail!(ConfigProblem(format!("head was trained on {} pooling but pool = {}", loaded.0.pool, cfg.pool)));
            }
            Some(loaded)
        }
        None => None,
    };
    let run = run_dir(m, "embed")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let seqs: Vec<_> = records.iter().map(|r| r.tokens.clone()).collect();
    let (dim, vectors): (usize, Vec<Vec<f32>>) = match &head {
        Some((_, head, encoder)) => {
            let e = embed_sequences(&trainer.model, encoder, head, &seqs, cfg.pool, cfg.batch_size)?;
            (head.out_dim(), e.into_iter().map(|v| v.normalized).collect())
        }
        None => {
            let t = pool_sequences(&trainer.model, &seqs, cfg.pool, cfg.batch_size)?;
            (t.cols(), (0..t.rows()).map(|r| t.row(r).to_vec()).collect())
        }
    };
    let rows: Vec<(String, Vec<f32>)> = records.into_iter().map(|r| r.id).zip(vectors).collect();
    let mut w = BufWriter::new(File::create(run.path().join("embeddings.vqem"))?);
    write_embeddings(&mut w, dim, &rows)?;
    w.flush()?;
    finish(run)
}

pub fn eval_cluster(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: ClusterConfig = s.load()?;
    let emb_path = path(m, "embeddings");
    let mut r = BufReader::new(File::open(emb_path).with_context(|| format!("opening {}", emb_path.display()))?);
    let (dim, rows) = read_embeddings(&mut r).with_context(|| format!("reading {}", emb_path.display()))?;
    let truth = match m.get_one::<PathBuf>("truth") {
        Some(p) => {
            let table = read_truth(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))?;
            let map: std::collections::HashMap<_, _> = table.into_iter().collect();
            let labels = rows
                .iter()
                .map(|(id, _)| map.get(id).copied().with_context(|| format!("no truth label for `{id}`")))
                .collect::<Result<Vec<usize>>>()?;
            Some(labels)
        }
        None => None,
    };
    let points =
        Tensor::from_vec(&[rows.len(), dim], rows.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f64)).collect())?;
    let provenance = emb_path.display().to_string();
    let report = clustering_eval(&points, cfg.k, cfg.seed, &provenance, truth.as_deref())?;
    let run = run_dir(m, "eval-cluster")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    run.write("cluster_report.txt", report.to_report())?;
    let ids: Vec<String> = rows.into_iter().map(|(id, _)| id).collect();
    run.write("assignments.tsv", report.assignment_table(&ids))?;
    finish(run)
}

pub fn sweep_mask(s: Settings, m: &ArgMatches) -> Result<()> {
    let cfg: SweepConfig = s.load()?;
    let (trainer, records) = model_and_records(m, cfg.split)?;
    let run = run_dir(m, "sweep-mask")?;
    run.write(CONFIG_ECHO, cfg.echo())?;
    let seqs: Vec<_> = records.into_iter().map(|r| r.tokens).collect();
    let mask = trainer.config.tokenizer().mask();
    let points = masked_accuracy_sweep(&trainer.model, &seqs, &cfg.fractions.0, mask, cfg.seed, cfg.batch_size)?;
    let mut table = String::from("fraction\taccuracy\ttrue_token_prob\tn_scored\n");
    for p in points {
        let _ = writeln!(table, "{}\t{:.6}\t{:.6}\t{}", p.fraction, p.accuracy, p.true_token_prob, p.n_scored);
    }
    run.write("sweep.tsv", table)?;
    finish(run)
}

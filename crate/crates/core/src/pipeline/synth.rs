//! Synthetic lineage corpus: a random root genome, lineages derived by point
//! substitutions, and error-bearing reads sampled from each lineage.

use std::io::{self, BufRead, Write};

use rand::seq::index::sample;
use rand::Rng;

use super::config::SynthConfig;
use crate::rng::{keyed, Stream};
use crate::seqio::{QualityRead, MAX_PHRED};

const BASES: [u8; 4] = *b"ACGT";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub root: Vec<u8>,
    pub genomes: Vec<Vec<u8>>,
    pub reads: Vec<QualityRead>,
    /// `(read id, lineage)` in read order.
    pub truth: Vec<(String, usize)>,
}

fn other_base<R: Rng + ?Sized>(b: u8, rng: &mut R) -> u8 {
    let alts: Vec<u8> = BASES.iter().copied().filter(|&x| x != b).collect();
    alts[rng.random_range(0..3)]
}

fn phred_error(q: u8) -> f64 {
    10f64.powf(-(q as f64) / 10.0)
}

/// Two adjacent Phred scores and the probability of the lower one, chosen so
/// that the expected implied error probability equals `rate`.
pub fn quality_mix(rate: f64) -> (u8, u8, f64) {
    if rate <= phred_error(MAX_PHRED) {
        return (MAX_PHRED, MAX_PHRED, 1.0);
    }
    if rate >= 1.0 {
        return (0, 0, 1.0);
    }
    let lo = (-10.0 * rate.log10()).floor().clamp(0.0, (MAX_PHRED - 1) as f64) as u8;
    let hi = lo + 1;
    let (p_lo, p_hi) = (phred_error(lo), phred_error(hi));
    let w = ((rate - p_hi) / (p_lo - p_hi)).clamp(0.0, 1.0);
    (lo, hi, w)
}

/// Generates the corpus; streams are keyed by seed so output is reproducible.
pub fn generate_synthetic(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = keyed(cfg.seed, Stream::Synth, &[0]);
    let root: Vec<u8> = (0..cfg.genome_len).map(|_| BASES[rng.random_range(0..4)]).collect();

    let genomes: Vec<Vec<u8>> = (0..cfg.n_lineages)
        .map(|l| {
            let mut rng = keyed(cfg.seed, Stream::Synth, &[1, l as u64]);
            let mut g = root.clone();
            for pos in sample(&mut rng, cfg.genome_len, cfg.mutations_per_lineage) {
                g[pos] = other_base(g[pos], &mut rng);
            }
            g
        })
        .collect();

    let (q_lo, q_hi, w_lo) = quality_mix(cfg.base_error_rate);
    let range = cfg.read_len_range;
    let mut reads = Vec::with_capacity(cfg.n_lineages * cfg.reads_per_lineage);
    let mut truth = Vec::with_capacity(reads.capacity());
    for (l, genome) in genomes.iter().enumerate() {
        let mut rng = keyed(cfg.seed, Stream::Synth, &[2, l as u64]);
        for i in 0..cfg.reads_per_lineage {
            let len = rng.random_range(range.lo..=range.hi);
            let start = rng.random_range(0..=cfg.genome_len - len);
            let mut bases = genome[start..start + len].to_vec();
            let mut quals = Vec::with_capacity(len);
            for b in bases.iter_mut() {
                if rng.random_bool(cfg.base_error_rate) {
                    *b = other_base(*b, &mut rng);
                }
                quals.push(if rng.random_bool(w_lo) { q_lo } else { q_hi });
            }
            let id = format!("L{l}_R{i}");
            truth.push((id.clone(), l));
            reads.push(QualityRead { id, bases, quals });
        }
    }
    SynthCorpus { root, genomes, reads, truth }
}

pub fn write_truth<W: Write>(w: &mut W, truth: &[(String, usize)]) -> io::Result<()> {
    for (id, lineage) in truth {
        writeln!(w, "{id}\t{lineage}")?;
    }
    Ok(())
}

/// Parses `read_id<TAB>lineage_id` lines.
pub fn read_truth<R: BufRead>(r: R) -> io::Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || io::Error::new(io::ErrorKind::InvalidData, format!("truth line {}: `{line}`", i + 1));
        let (id, lineage) = line.split_once('\t').ok_or_else(bad)?;
        out.push((id.to_string(), lineage.trim().parse().map_err(|_| bad())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::{Config, LenRange};

    fn small(rate: f64) -> SynthConfig {
        SynthConfig {
            genome_len: 300,
            n_lineages: 3,
            mutations_per_lineage: 7,
            reads_per_lineage: 50,
            read_len_range: LenRange { lo: 20, hi: 60 },
            base_error_rate: rate,
            seed: 5,
        }
    }

    fn contains(hay: &[u8], needle: &[u8]) -> bool {
        hay.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn error_free_reads_are_substrings_of_their_lineage() {
        let c = generate_synthetic(&small(0.0));
        for (read, (_, l)) in c.reads.iter().zip(&c.truth) {
            assert!(contains(&c.genomes[*l], &read.bases));
            assert!((20..=60).contains(&read.len()));
            assert!(read.quals.iter().all(|&q| q == MAX_PHRED));
        }
    }

    #[test]
    fn lineages_differ_from_root_at_exactly_the_mutation_count() {
        let c = generate_synthetic(&small(0.0));
        for g in &c.genomes {
            assert_eq!(g.iter().zip(&c.root).filter(|(a, b)| a != b).count(), 7);
        }
    }

    #[test]
    fn single_lineage_labels_are_identical() {
        let cfg = SynthConfig { n_lineages: 1, ..small(0.01) };
        let c = generate_synthetic(&cfg);
        assert!(c.truth.iter().all(|(_, l)| *l == 0));
        assert_eq!(c.reads.len(), 50);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_synthetic(&small(0.01)), generate_synthetic(&small(0.01)));
        let other = SynthConfig { seed: 6, ..small(0.01) };
        assert_ne!(generate_synthetic(&small(0.01)).root, generate_synthetic(&other).root);
    }

    #[test]
    fn mismatch_rate_and_implied_quality_match_the_target() {
        // Reads as long as the genome start at 0, so each aligns trivially.
        let cfg = SynthConfig {
            genome_len: 100,
            n_lineages: 1,
            mutations_per_lineage: 3,
            reads_per_lineage: 10_000,
            read_len_range: LenRange { lo: 100, hi: 100 },
            base_error_rate: 0.005,
            seed: 9,
        };
        cfg.validate().unwrap();
        let c = generate_synthetic(&cfg);
        let (mut bases, mut mismatches, mut implied) = (0usize, 0usize, 0.0);
        for r in &c.reads {
            bases += r.len();
            mismatches += r.bases.iter().zip(&c.genomes[0]).filter(|(a, b)| a != b).count();
            implied += r.quals.iter().map(|&q| phred_error(q)).sum::<f64>();
        }
        assert_eq!(bases, 1_000_000);
        let rate = mismatches as f64 / bases as f64;
        assert!((rate - 0.005).abs() < 0.001, "mismatch rate {rate}");
        let q_rate = implied / bases as f64;
        assert!((q_rate - 0.005).abs() < 0.0002, "implied rate {q_rate}");
    }

    #[test]
    fn quality_mix_expectation() {
        for rate in [0.001, 0.005, 0.0123, 0.2, 0.5] {
            let (lo, hi, w) = quality_mix(rate);
            let e = w * phred_error(lo) + (1.0 - w) * phred_error(hi);
            assert!((e - rate).abs() < 1e-12, "{rate}: {e}");
        }
        assert_eq!(quality_mix(0.0), (MAX_PHRED, MAX_PHRED, 1.0));
    }

    #[test]
    fn truth_roundtrip() {
        let truth = vec![("L0_R0".to_string(), 0), ("L3_R9".to_string(), 3)];
        let mut buf = Vec::new();
        write_truth(&mut buf, &truth).unwrap();
        assert_eq!(buf, b"L0_R0\t0\nL3_R9\t3\n");
        assert_eq!(read_truth(buf.as_slice()).unwrap(), truth);
        assert!(read_truth(&b"x\ty\n"[..]).is_err());
    }
}

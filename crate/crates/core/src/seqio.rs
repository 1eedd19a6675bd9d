//! FASTQ reading/writing and Trimmomatic-style quality trimming.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use thiserror::Error;

pub const PHRED_OFFSET: u8 = 33;
pub const MAX_PHRED: u8 = 93;

#[derive(Debug, Error)]
pub enum SeqIoError {
    #[error("record {record}: {reason}")]
    Malformed { record: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SeqIoError {
    fn malformed(record: usize, reason: impl Into<String>) -> Self {
        SeqIoError::Malformed { record, reason: reason.into() }
    }
}

/// A read with decoded (not ASCII) Phred qualities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityRead {
    pub id: String,
    pub bases: Vec<u8>,
    pub quals: Vec<u8>,
}

impl QualityRead {
    pub fn new(id: impl Into<String>, bases: &[u8], quals: &[u8]) -> Self {
        assert_eq!(bases.len(), quals.len());
        QualityRead { id: id.into(), bases: bases.to_vec(), quals: quals.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    fn slice(&self, start: usize, end: usize) -> QualityRead {
        QualityRead {
            id: self.id.clone(),
            bases: self.bases[start..end].to_vec(),
            quals: self.quals[start..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QualityConfig {
    pub leading_q: u8,
    pub trailing_q: u8,
    pub window_len: usize,
    pub window_q: u8,
    pub min_len: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig { leading_q: 3, trailing_q: 3, window_len: 4, window_q: 15, min_len: 36 }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_len == 0 {
            return Err("window_len must be >= 1".into());
        }
        if self.min_len == 0 {
            return Err("min_len must be >= 1".into());
        }
        Ok(())
    }
}

/// Streaming FASTQ reader over Phred+33 input.
pub struct FastqReader<R> {
    inner: R,
    record: usize,
    line: String,
}

impl<R: BufRead> FastqReader<R> {
    pub fn new(inner: R) -> Self {
        FastqReader { inner, record: 0, line: String::new() }
    }

    fn next_line(&mut self) -> io::Result<Option<String>> {
        self.line.clear();
        if self.inner.read_line(&mut self.line)? == 0 {
            return Ok(None);
        }
        let trimmed = self.line.trim_end_matches(['\n', '\r']);
        Ok(Some(trimmed.to_string()))
    }

    fn read_record(&mut self) -> Result<Option<QualityRead>, SeqIoError> {
        let header = loop {
            match self.next_line()? {
                None => return Ok(None),
                Some(l) if l.is_empty() => continue,
                Some(l) => break l,
            }
        };
        self.record += 1;
        let rec = self.record;
        let id =
            header.strip_prefix('@').ok_or_else(|| SeqIoError::malformed(rec, "header does not start with '@'"))?;
        let id = id.split_whitespace().next().unwrap_or("").to_string();
        let seq = self.next_line()?.ok_or_else(|| SeqIoError::malformed(rec, "truncated before sequence line"))?;
        let sep = self.next_line()?.ok_or_else(|| SeqIoError::malformed(rec, "truncated before '+' line"))?;
        if !sep.starts_with('+') {
            return Err(SeqIoError::malformed(rec, "separator does not start with '+'"));
        }
        let qual = self.next_line()?.ok_or_else(|| SeqIoError::malformed(rec, "truncated before quality line"))?;
        if qual.len() != seq.len() {
            return Err(SeqIoError::malformed(rec, format!("{} bases but {} quality values", seq.len(), qual.len())));
        }
        let bases = seq
            .bytes()
            .map(|b| match b.to_ascii_uppercase() {
                b @ (b'A' | b'C' | b'G' | b'T' | b'N') => Ok(b),
                b if b.is_ascii_alphabetic() => Ok(b'N'),
                other => Err(SeqIoError::malformed(rec, format!("invalid base {:?}", other as char))),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        let quals = qual
            .bytes()
            .map(|c| match c.checked_sub(PHRED_OFFSET) {
                Some(q) if q <= MAX_PHRED => Ok(q),
                _ => {
                    Err(SeqIoError::malformed(rec, format!("quality character {:?} outside Phred+33 range", c as char)))
                }
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Ok(Some(QualityRead { id, bases, quals }))
    }
}

impl<R: BufRead> Iterator for FastqReader<R> {
    type Item = Result<QualityRead, SeqIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_record().transpose()
    }
}

pub fn parse_fastq<R: BufRead>(reader: R) -> Result<Vec<QualityRead>, SeqIoError> {
    FastqReader::new(reader).collect()
}

/// Opens a FASTQ file, transparently decompressing gzip (magic `1F 8B`).
pub fn open_fastq(path: &Path) -> io::Result<FastqReader<Box<dyn BufRead>>> {
    let mut file = BufReader::new(File::open(path)?);
    let gz = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    let inner: Box<dyn BufRead> = if gz { Box::new(BufReader::new(MultiGzDecoder::new(file))) } else { Box::new(file) };
    Ok(FastqReader::new(inner))
}

pub fn read_fastq_file(path: &Path) -> Result<Vec<QualityRead>, SeqIoError> {
    open_fastq(path)?.collect()
}

pub fn write_record<W: Write>(w: &mut W, read: &QualityRead) -> io::Result<()> {
    w.write_all(b"@")?;
    w.write_all(read.id.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&read.bases)?;
    w.write_all(b"\n+\n")?;
    let q: Vec<u8> = read.quals.iter().map(|q| q + PHRED_OFFSET).collect();
    w.write_all(&q)?;
    w.write_all(b"\n")
}

pub fn write_fastq<'a, W: Write>(w: &mut W, reads: impl IntoIterator<Item = &'a QualityRead>) -> io::Result<()> {
    for r in reads {
        write_record(w, r)?;
    }
    Ok(())
}

/// Applies LEADING, TRAILING, SLIDINGWINDOW and MINLEN in that order.
/// Returns `None` when the read is discarded.
///
/// Sliding window: windows of `window_len` are scanned from the 5' end; at
/// the first window whose mean quality is below `window_q` the read is cut
/// just before that window, then trailing bases below `window_q` (or
/// `trailing_q`, whichever is higher) are dropped. Reads shorter than one
/// window are not window-scanned.
pub fn quality_trim(read: &QualityRead, cfg: &QualityConfig) -> Option<QualityRead> {
    let q = &read.quals;
    let mut start = 0;
    let mut end = q.len();
    while start < end && q[start] < cfg.leading_q {
        start += 1;
    }
    while end > start && q[end - 1] < cfg.trailing_q {
        end -= 1;
    }
    let w = cfg.window_len;
    if end - start >= w {
        let threshold = cfg.window_q as u32 * w as u32;
        let mut sum: u32 = q[start..start + w].iter().map(|&v| v as u32).sum();
        let mut s = start;
        loop {
            if sum < threshold {
                end = s;
                let floor = cfg.window_q.max(cfg.trailing_q);
                while end > start && q[end - 1] < floor {
                    end -= 1;
                }
                break;
            }
            if s + w >= end {
                break;
            }
            sum = sum + q[s + w] as u32 - q[s] as u32;
            s += 1;
        }
    }
    if end - start < cfg.min_len {
        return None;
    }
    Some(read.slice(start, end))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcStats {
    pub reads_in: usize,
    pub reads_kept: usize,
    /// Base-weighted mean Phred over all input reads.
    pub mean_quality_before: f64,
    pub mean_quality_after: f64,
    /// Length distribution of kept reads.
    pub length_histogram: BTreeMap<usize, usize>,
}

fn mean_quality(reads: &[QualityRead]) -> f64 {
    let (sum, n) = reads.iter().flat_map(|r| r.quals.iter()).fold((0u64, 0u64), |(s, n), &q| (s + q as u64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

pub fn qc_summary(before: &[QualityRead], after: &[QualityRead]) -> QcStats {
    let mut length_histogram = BTreeMap::new();
    for r in after {
        *length_histogram.entry(r.len()).or_insert(0) += 1;
    }
    QcStats {
        reads_in: before.len(),
        reads_kept: after.len(),
        mean_quality_before: mean_quality(before),
        mean_quality_after: mean_quality(after),
        length_histogram,
    }
}

impl QcStats {
    /// Key-value report, one `key = value` per line.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        writeln!(s, "reads_in = {}", self.reads_in).unwrap();
        writeln!(s, "reads_kept = {}", self.reads_kept).unwrap();
        writeln!(s, "mean_quality_before = {:.6}", self.mean_quality_before).unwrap();
        writeln!(s, "mean_quality_after = {:.6}", self.mean_quality_after).unwrap();
        for (len, count) in &self.length_histogram {
            writeln!(s, "length.{len} = {count}").unwrap();
        }
        s
    }
}

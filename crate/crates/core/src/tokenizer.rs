//! Overlapping k-mer tokenization with PAD / UNK / MASK specials, and the
//! binary tokenized-corpus format (`VQTK`).

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("non-ACGT character {0:?} in k-mer")]
    NonAcgt(char),
    #[error("sequence of length {len} is shorter than k = {k}")]
    TooShort { len: usize, k: usize },
    #[error("k-mer at position {0} does not overlap its successor consistently")]
    InconsistentOverlap(usize),
    #[error("special token {id} at valid position {pos}")]
    SpecialToken { pos: usize, id: u32 },
    #[error("invalid tokenizer config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a tokenized corpus (bad magic)")]
    BadMagic,
    #[error("unsupported corpus format version {0}")]
    Version(u32),
    #[error("corpus record {record}: {reason}")]
    Record { record: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub k: usize,
    pub max_len: usize,
    pub canonical: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { k: 6, max_len: 150, canonical: false }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if !(1..=12).contains(&self.k) {
            return Err(TokenizerError::Config(format!("k = {} not in 1..=12", self.k)));
        }
        if self.max_len == 0 || self.max_len > u16::MAX as usize {
            return Err(TokenizerError::Config(format!("max_len = {} not in 1..=65535", self.max_len)));
        }
        Ok(())
    }

    /// Number of plain k-mer ids, `4^k`.
    pub fn base_vocab(&self) -> u32 {
        1u32 << (2 * self.k)
    }

    pub fn pad(&self) -> u32 {
        self.base_vocab()
    }

    pub fn unk(&self) -> u32 {
        self.base_vocab() + 1
    }

    pub fn mask(&self) -> u32 {
        self.base_vocab() + 2
    }

    /// Base k-mers plus PAD, UNK and MASK.
    pub fn vocab_size(&self) -> usize {
        self.base_vocab() as usize + 3
    }
}

/// Fixed-length token ids with a prefix validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
}

impl TokenSequence {
    /// Builds a sequence from its valid prefix, right-padding to `max_len`.
    pub fn from_prefix(prefix: &[u32], cfg: &TokenizerConfig) -> Self {
        let n = prefix.len().min(cfg.max_len);
        let mut ids = prefix[..n].to_vec();
        ids.resize(cfg.max_len, cfg.pad());
        let mut valid = vec![true; n];
        valid.resize(cfg.max_len, false);
        TokenSequence { ids, valid }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().take_while(|&&v| v).count()
    }
}

fn base_code(b: u8) -> Option<u32> {
    match b {
        b'A' | b'a' => Some(0),
        b'C' | b'c' => Some(1),
        b'G' | b'g' => Some(2),
        b'T' | b't' => Some(3),
        _ => None,
    }
}

pub fn reverse_complement(kmer: &[u8]) -> Vec<u8> {
    kmer.iter()
        .rev()
        .map(|&b| match b.to_ascii_uppercase() {
            b'A' => b'T',
            b'C' => b'G',
            b'G' => b'C',
            b'T' => b'A',
            other => other,
        })
        .collect()
}

/// Base-4 code of a k-mer, A=0 C=1 G=2 T=3, first base most significant.
/// With `canonical`, the smaller of the k-mer's and its reverse complement's code.
pub fn kmer_to_id(kmer: &[u8], canonical: bool) -> Result<u32, TokenizerError> {
    let mut fwd = 0u32;
    let mut rev = 0u32;
    for (i, &b) in kmer.iter().enumerate() {
        let c = base_code(b).ok_or(TokenizerError::NonAcgt(b as char))?;
        fwd = (fwd << 2) | c;
        rev |= (3 - c) << (2 * i);
    }
    Ok(if canonical { fwd.min(rev) } else { fwd })
}

pub fn id_to_kmer(id: u32, k: usize) -> Vec<u8> {
    (0..k).rev().map(|i| b"ACGT"[((id >> (2 * i)) & 3) as usize]).collect()
}

/// Stride-1 k-mer tokens, truncated or PAD-padded to `max_len`. Windows
/// containing a non-ACGT base become UNK.
pub fn tokenize(bases: &[u8], cfg: &TokenizerConfig) -> Result<TokenSequence, TokenizerError> {
    let k = cfg.k;
    if bases.len() < k {
        return Err(TokenizerError::TooShort { len: bases.len(), k });
    }
    let count = (bases.len() - k + 1).min(cfg.max_len);
    let prefix: Vec<u32> =
        (0..count).map(|i| kmer_to_id(&bases[i..i + k], cfg.canonical).unwrap_or(cfg.unk())).collect();
    Ok(TokenSequence::from_prefix(&prefix, cfg))
}

/// Inverse of [`tokenize`] for ACGT-only, non-canonical input.
pub fn detokenize(seq: &TokenSequence, cfg: &TokenizerConfig) -> Result<Vec<u8>, TokenizerError> {
    let k = cfg.k;
    let n = seq.n_valid();
    let mut out = Vec::with_capacity(n + k - 1);
    for pos in 0..n {
        let id = seq.ids[pos];
        if id >= cfg.base_vocab() {
            return Err(TokenizerError::SpecialToken { pos, id });
        }
        let kmer = id_to_kmer(id, k);
        if pos == 0 {
            out.extend_from_slice(&kmer);
        } else {
            if out[out.len() - (k - 1)..] != kmer[..k - 1] {
                return Err(TokenizerError::InconsistentOverlap(pos - 1));
            }
            out.push(kmer[k - 1]);
        }
    }
    Ok(out)
}

/// A tokenized read with its record id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub id: String,
    pub tokens: TokenSequence,
}

const CORPUS_MAGIC: &[u8; 4] = b"VQTK";
const CORPUS_VERSION: u32 = 1;

/// Header fields of a tokenized corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusHeader {
    pub k: u32,
    pub max_len: u32,
    pub vocab_size: u32,
}

/// Layout (all integers little-endian):
/// `"VQTK" | version u32 | k u32 | L u32 | vocab u32` then per record
/// `id_len u32 | id bytes | n_valid u16 | L x u32 token ids`.
pub fn write_corpus<W: Write>(w: &mut W, cfg: &TokenizerConfig, records: &[TokenRecord]) -> io::Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&CORPUS_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.k as u32).to_le_bytes())?;
    w.write_all(&(cfg.max_len as u32).to_le_bytes())?;
    w.write_all(&(cfg.vocab_size() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(cfg.max_len * 4);
    for r in records {
        w.write_all(&(r.id.len() as u32).to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&(r.tokens.n_valid() as u16).to_le_bytes())?;
        buf.clear();
        for id in &r.tokens.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a corpus written by [`write_corpus`]; validates every record.
pub fn read_corpus<R: Read>(r: &mut R) -> Result<(CorpusHeader, Vec<TokenRecord>), CorpusError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != CORPUS_VERSION {
        return Err(CorpusError::Version(version));
    }
    let header = CorpusHeader { k: read_u32(r)?, max_len: read_u32(r)?, vocab_size: read_u32(r)? };
    let l = header.max_len as usize;
    let pad = header.vocab_size.saturating_sub(3);
    let mut records = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..])?,
        }
        let idx = records.len() + 1;
        let bad = |reason: String| CorpusError::Record { record: idx, reason };
        let id_len = u32::from_le_bytes(len) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| bad("record id is not UTF-8".into()))?;
        let mut nv = [0u8; 2];
        r.read_exact(&mut nv)?;
        let n_valid = u16::from_le_bytes(nv) as usize;
        if n_valid > l {
            return Err(bad(format!("{n_valid} valid tokens exceed L = {l}")));
        }
        let mut raw = vec![0u8; 4 * l];
        r.read_exact(&mut raw)?;
        let ids: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(&t) = ids.iter().find(|&&t| t >= header.vocab_size) {
            return Err(bad(format!("token {t} outside vocabulary")));
        }
        if ids[n_valid..].iter().any(|&t| t != pad) || ids[..n_valid].contains(&pad) {
            return Err(bad("PAD tokens must form exactly the suffix".into()));
        }
        let valid = (0..l).map(|i| i < n_valid).collect();
        records.push(TokenRecord { id, tokens: TokenSequence { ids, valid } });
    }
    Ok((header, records))
}

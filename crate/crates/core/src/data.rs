//! Deterministic synthetic token corpus and batch sampling.

use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WinqError};

/// Number of distinct successors per order-2 context.
const SUCCESSORS: usize = 4;

/// Sparse order-2 Markov transition table: `p(next | prev2, prev1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    vocab: usize,
    /// Per context `prev2·vocab + prev1`: (token, probability) pairs.
    rows: Vec<Vec<(u32, f64)>>,
}

impl TransitionTable {
    /// Seed-derived sparse table: each context allows a few successors with
    /// random (flat Dirichlet) probabilities.
    pub fn random(seed: u64, vocab: usize) -> Result<Self> {
        check_vocab(vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616e_7369_7469);
        let k = SUCCESSORS.min(vocab);
        let rows = (0..vocab * vocab)
            .map(|_| {
                let mut picked: Vec<u32> = Vec::with_capacity(k);
                while picked.len() < k {
                    let t = rng.random_range(0..vocab as u32);
                    if !picked.contains(&t) {
                        picked.push(t);
                    }
                }
                let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let total: f64 = w.iter().sum();
                picked.into_iter().zip(w.into_iter().map(|x| x / total)).collect()
            })
            .collect();
        Ok(Self { vocab, rows })
    }

    /// Every context maps to the uniform distribution.
    pub fn uniform(vocab: usize) -> Result<Self> {
        check_vocab(vocab)?;
        let p = 1.0 / vocab as f64;
        let row: Vec<(u32, f64)> = (0..vocab as u32).map(|t| (t, p)).collect();
        Ok(Self { vocab, rows: vec![row; vocab * vocab] })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, prev2: u32, prev1: u32) -> &[(u32, f64)] {
        &self.rows[prev2 as usize * self.vocab + prev1 as usize]
    }

    pub fn prob(&self, prev2: u32, prev1: u32, next: u32) -> f64 {
        self.row(prev2, prev1).iter().find(|(t, _)| *t == next).map_or(0.0, |&(_, p)| p)
    }

    fn sample(&self, prev2: u32, prev1: u32, u: f64) -> u32 {
        let row = self.row(prev2, prev1);
        let mut acc = 0.0;
        for &(t, p) in row {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.last().expect("non-empty row").0
    }
}

fn check_vocab(vocab: usize) -> Result<()> {
    if vocab < 2 || vocab > u16::MAX as usize {
        return Err(WinqError::Argument(format!("vocabulary size {vocab} must be in 2..=65535")));
    }
    Ok(())
}

/// A generated token stream together with the table that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub table: TransitionTable,
    pub tokens: Vec<u32>,
}

impl SyntheticCorpus {
    pub fn vocab(&self) -> usize {
        self.table.vocab()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Boundary between the training and evaluation regions (90/10 split).
    pub fn split_point(&self) -> usize {
        self.tokens.len() * 9 / 10
    }

    pub fn train_region(&self) -> Range<usize> {
        0..self.split_point()
    }

    pub fn eval_region(&self) -> Range<usize> {
        self.split_point()..self.tokens.len()
    }

    /// Unigram entropy of the stream in nats.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab()];
        for &t in &self.tokens {
            counts[t as usize] += 1;
        }
        let n = self.tokens.len() as f64;
        counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        }).sum()
    }

    /// Mean negative log-likelihood of the stream under its own generating
    /// table: the cross-entropy an optimal predictor achieves.
    pub fn optimal_cross_entropy(&self) -> f64 {
        let t = &self.tokens;
        let nll: f64 = t.windows(3).map(|w| -self.table.prob(w[0], w[1], w[2]).ln()).sum();
        nll / (t.len().saturating_sub(2)).max(1) as f64
    }
}

/// Generate `length` tokens from the seed-derived order-2 chain.
pub fn generate_corpus(seed: u64, vocab: usize, length: usize) -> Result<SyntheticCorpus> {
    let table = TransitionTable::random(seed, vocab)?;
    generate_with_table(seed, table, length)
}

pub fn generate_with_table(seed: u64, table: TransitionTable, length: usize) -> Result<SyntheticCorpus> {
    if length < 3 {
        return Err(WinqError::Argument(format!("corpus length {length} too short")));
    }
    let vocab = table.vocab() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(length);
    tokens.push(rng.random_range(0..vocab));
    tokens.push(rng.random_range(0..vocab));
    while tokens.len() < length {
        let n = tokens.len();
        let next = table.sample(tokens[n - 2], tokens[n - 1], rng.random::<f64>());
        tokens.push(next);
    }
    Ok(SyntheticCorpus { seed, table, tokens })
}

/// Input/target token matrices, `batch × context`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub context: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    /// Build from windows of `context + 1` tokens each.
    pub fn from_windows(windows: &[&[u32]]) -> Result<Self> {
        let context = windows.first().map_or(0, |w| w.len().saturating_sub(1));
        if context == 0 || windows.iter().any(|w| w.len() != context + 1) {
            return Err(WinqError::Argument("batch windows must share a length ≥ 2".into()));
        }
        let mut inputs = Vec::with_capacity(windows.len() * context);
        let mut targets = Vec::with_capacity(windows.len() * context);
        for w in windows {
            inputs.extend_from_slice(&w[..context]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self { batch: windows.len(), context, inputs, targets })
    }

    /// Number of token positions (`batch · context`).
    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }

    pub fn max_token(&self) -> u32 {
        self.inputs.iter().chain(&self.targets).copied().max().unwrap_or(0)
    }
}

/// Deterministic sampler of random windows from one region of a corpus.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    region: Range<usize>,
    batch: usize,
    context: usize,
}

impl BatchSampler {
    pub fn new(corpus: &SyntheticCorpus, region: Range<usize>, batch: usize, context: usize, seed: u64) -> Result<Self> {
        if batch == 0 || context == 0 {
            return Err(WinqError::Argument("batch and context must be positive".into()));
        }
        if region.end > corpus.len() || region.len() < context + 1 {
            return Err(WinqError::Argument(format!(
                "region {region:?} cannot hold a window of {} tokens",
                context + 1
            )));
        }
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed), region, batch, context })
    }

    /// Window start positions for the next batch.
    pub fn next_starts(&mut self) -> Vec<usize> {
        let hi = self.region.end - self.context - 1;
        (0..self.batch).map(|_| self.rng.random_range(self.region.start..=hi)).collect()
    }

    pub fn next_batch(&mut self, corpus: &SyntheticCorpus) -> Batch {
        let starts = self.next_starts();
        let windows: Vec<&[u32]> = starts.iter().map(|&s| &corpus.tokens[s..s + self.context + 1]).collect();
        Batch::from_windows(&windows).expect("windows share a length")
    }
}

const TOKEN_MAGIC: &[u8; 8] = b"WINQTOKS";
const TOKEN_VERSION: u16 = 1;

/// Raw token dump: 16-byte header (magic, u16 version, u16 vocab, u32
/// length), then little-endian u32 tokens.
pub fn write_token_dump(corpus: &SyntheticCorpus, mut w: impl Write) -> Result<()> {
    let len = u32::try_from(corpus.len()).map_err(|_| WinqError::Format("corpus too long for dump".into()))?;
    w.write_all(TOKEN_MAGIC)?;
    w.write_all(&TOKEN_VERSION.to_le_bytes())?;
    w.write_all(&(corpus.vocab() as u16).to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    for &t in &corpus.tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

/// Read a dump written by [`write_token_dump`]; returns `(vocab, tokens)`.
pub fn read_token_dump(mut r: impl Read) -> Result<(usize, Vec<u32>)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != TOKEN_MAGIC {
        return Err(WinqError::Format("bad token dump magic".into()));
    }
    let version = u16::from_le_bytes([header[8], header[9]]);
    if version != TOKEN_VERSION {
        return Err(WinqError::Format(format!("unsupported token dump version {version}")));
    }
    let vocab = u16::from_le_bytes([header[10], header[11]]) as usize;
    let len = u32::from_le_bytes([header[12], header[13], header[14], header[15]]) as usize;
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)?;
    let tokens = buf.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((vocab, tokens))
}

//! Term vectors and averaged-text embeddings.

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as an exact cancellation.
const DEGENERATE_NORM: f64 = 1e-12;

/// A unit-norm text embedding.
///
/// `degenerate` is set when no token had a vector or the token vectors
/// cancelled; `values` is then all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

impl Embedding {
    pub fn zero(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            degenerate: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A source of fixed-dimension term vectors.
pub trait TermVectors: Sync {
    fn dim(&self) -> usize;
    fn lookup(&self, term: &str) -> Option<Cow<'_, [f64]>>;
}

/// Averages the vectors of `tokens` found in `table` and normalizes the sum.
pub fn embed_text<T: TermVectors + ?Sized>(tokens: &[String], table: &T) -> Result<Embedding> {
    let dim = table.dim();
    let mut sum = vec![0.0; dim];
    for tok in tokens {
        let Some(v) = table.lookup(tok) else { continue };
        if v.len() != dim {
            return Err(Error::Config(format!(
                "vector for {tok:?} has dimension {}, expected {dim}",
                v.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= DEGENERATE_NORM {
        return Ok(Embedding::zero(dim));
    }
    for s in &mut sum {
        *s /= norm;
    }
    Ok(Embedding {
        values: sum,
        degenerate: false,
    })
}

/// Term vectors read from a whitespace-separated text file.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_map(vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut dims = vectors.values().map(Vec::len);
        let dim = dims.next().unwrap_or(0);
        if dims.any(|d| d != dim) {
            return Err(Error::Config("embedding vectors differ in dimension".into()));
        }
        if dim == 0 && !vectors.is_empty() {
            return Err(Error::Config("embedding vectors are empty".into()));
        }
        Ok(Self { dim, vectors })
    }

    /// Reads `term v1 v2 ... vd` lines. A leading word2vec-style
    /// `<count> <dim>` header line is accepted and skipped.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim: Option<usize> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i as u64 + 1;
            let mut fields = line.split_whitespace();
            let Some(term) = fields.next() else { continue };
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            if lineno == 1 && values.len() == 1 && term.parse::<usize>().is_ok() {
                continue;
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Config(format!(
                        "line {lineno}: vector for {term:?} has dimension {}, expected {d}",
                        values.len()
                    )))
                }
                Some(_) => {}
            }
            vectors.insert(term.to_owned(), values);
        }
        Self::from_map(vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl TermVectors for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, term: &str) -> Option<Cow<'_, [f64]>> {
        self.vectors.get(term).map(|v| Cow::Borrowed(v.as_slice()))
    }
}

/// Deterministic pseudo-embeddings: each term maps to a fixed Gaussian vector
/// derived from a hash of the term and `seed`. Every term is "found".
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, seed: 0 }
    }
}

impl TermVectors for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, term: &str) -> Option<Cow<'_, [f64]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(term.as_bytes()) ^ self.seed);
        let v = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f64>>();
        Some(Cow::Owned(v))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

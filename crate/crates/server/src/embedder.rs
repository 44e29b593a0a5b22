use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use forage_core::dataset::{EmbeddingTable, HashEmbedder};
use forage_core::{Dataset, Format, KeywordLexicon};
use serde::{Deserialize, Serialize};

/// Where text embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Embedder {
    /// Deterministic per-term hash vectors; needs no external files.
    Hash { dim: usize, seed: u64 },
    /// A `term v1 ... vd` table such as a GloVe text file.
    Table { path: PathBuf },
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::Hash { dim: 32, seed: 0 }
    }
}

impl Embedder {
    pub fn from_args(table: Option<PathBuf>, dim: usize, seed: u64) -> Self {
        match table {
            Some(path) => Embedder::Table { path },
            None => Embedder::Hash { dim, seed },
        }
    }

    pub fn embed(&self, ds: Dataset) -> Result<Dataset> {
        Ok(match self {
            Embedder::Hash { dim, seed } => ds.embed(&HashEmbedder { dim: *dim, seed: *seed })?,
            Embedder::Table { path } => {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let table = EmbeddingTable::read(BufReader::new(f))
                    .with_context(|| format!("reading embedding table {}", path.display()))?;
                ds.embed(&table)?
            }
        })
    }
}

/// Reads a dataset file, guessing the format from its extension unless
/// `format` is given.
pub fn read_dataset(path: &Path, format: Option<Format>) -> Result<Dataset> {
    let format = match format {
        Some(f) => f,
        None => Format::from_path(path)
            .with_context(|| format!("cannot tell the format of {}; pass --format", path.display()))?,
    };
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::load(BufReader::new(f), format, None).with_context(|| format!("loading {}", path.display()))
}

pub fn read_lexicon(path: Option<&Path>) -> Result<KeywordLexicon> {
    match path {
        None => Ok(KeywordLexicon::default_symptoms()),
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(KeywordLexicon::read(BufReader::new(f))?)
        }
    }
}

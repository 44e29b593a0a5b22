//! On-disk layout of a data directory.
//!
//! ```text
//! datasets/<id>.jsonl       point records
//! datasets/<id>.meta.json   how the points were embedded
//! sessions/<id>.jsonl       session export, appended after every batch
//! ```
//!
//! Session files are append-only and are the source of truth: on startup
//! every session is rebuilt by replaying its events.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use forage_core::session::ExportRecord;
use forage_core::{Dataset, Format, SessionExport};
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub embedder: Embedder,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Ids become file names, so only a conservative alphabet is allowed.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["datasets", "sessions"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let probe = root.join(".write-test");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .with_context(|| format!("data directory {} is not writable", root.display()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_path(&self, id: &str) -> PathBuf {
        self.root.join("datasets").join(format!("{id}.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.root.join("datasets").join(format!("{id}.meta.json"))
    }

    pub fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.jsonl"))
    }

    pub fn save_dataset(&self, id: &str, ds: &Dataset, meta: &DatasetMeta) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dataset_path(id))?);
        ds.write(&mut w, Format::Jsonl)?;
        w.flush()?;
        w.into_inner()?.sync_all()?;
        // the meta file marks the dataset complete, so it goes last
        fs::write(self.meta_path(id), serde_json::to_vec(meta)?)?;
        Ok(())
    }

    /// Every complete dataset, re-embedded as recorded in its meta file.
    pub fn load_datasets(&self) -> Result<Vec<(String, Dataset, DatasetMeta)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("datasets"))? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name.strip_suffix(".meta.json") else {
                continue;
            };
            let meta: DatasetMeta =
                serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("reading {}", path.display()))?;
            let file = File::open(self.dataset_path(id))
                .with_context(|| format!("dataset {id} has a meta file but no points"))?;
            let ds = Dataset::load(BufReader::new(file), Format::Jsonl, None)?;
            let ds = meta.embedder.embed(ds)?;
            out.push((id.to_owned(), ds, meta));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Writes the header line of a new session.
    pub fn create_session(&self, export: &SessionExport) -> Result<()> {
        let path = self.session_path(&export.header.session_id);
        if path.exists() {
            bail!("session file {} already exists", path.display());
        }
        let mut f = File::create(&path)?;
        export.write_jsonl(&mut f)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn append_records(&self, session_id: &str, records: &[ExportRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let f = OpenOptions::new().append(true).open(self.session_path(session_id))?;
        let mut w = BufWriter::new(f);
        SessionExport::write_event_lines(records, &mut w)?;
        w.flush()?;
        w.into_inner()?.sync_data()?;
        Ok(())
    }

    pub fn load_sessions(&self) -> Result<Vec<SessionExport>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("sessions"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let export = SessionExport::read_jsonl(BufReader::new(File::open(&path)?))
                .with_context(|| format!("reading {}", path.display()))?;
            out.push(export);
        }
        out.sort_by(|a, b| a.header.session_id.cmp(&b.header.session_id));
        Ok(out)
    }

    pub fn load_session(&self, id: &str) -> Result<SessionExport> {
        let path = self.session_path(id);
        let f = File::open(&path).with_context(|| format!("no session {id} in {}", self.root.display()))?;
        Ok(SessionExport::read_jsonl(BufReader::new(f))?)
    }
}

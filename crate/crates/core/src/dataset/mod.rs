//! Point collections: loading, validation, embedding, heuristic labeling and
//! subsampling.

mod embedding;
mod text;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embedding::{embed_text, Embedding, EmbeddingTable, HashEmbedder, TermVectors};
pub use text::{tokenize, KeywordLexicon};

pub type PointId = u64;

/// Tolerance on the unit norm of non-degenerate embeddings.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub id: PointId,
    /// Map coordinates `(x, y)`.
    pub location: [f64; 2],
    pub text: String,
    pub tokens: Vec<String>,
    pub embedding: Option<Embedding>,
    pub truth: Option<bool>,
}

impl DataPoint {
    pub fn new(id: PointId, location: [f64; 2], text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            id,
            location,
            tokens: tokenize(&text),
            text,
            embedding: None,
            truth: None,
        }
    }

    pub fn with_truth(mut self, truth: bool) -> Self {
        self.truth = Some(truth);
        self
    }

    /// True when the point has no usable text embedding.
    pub fn is_degenerate(&self) -> bool {
        self.embedding.as_ref().is_none_or(|e| e.degenerate)
    }
}

/// An immutable, validated collection of points.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    points: Vec<DataPoint>,
    index: HashMap<PointId, usize>,
    incidence: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "ndjson" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &std::path::Path) -> Option<Self> {
        path.extension()?.to_str()?.parse().ok()
    }
}

/// One serialized point: the `id,x,y,text[,truth]` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: PointId,
    pub x: f64,
    pub y: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "truth_field")]
    pub truth: Option<bool>,
}

impl From<&DataPoint> for PointRecord {
    fn from(p: &DataPoint) -> Self {
        Self {
            id: p.id,
            x: p.location[0],
            y: p.location[1],
            text: p.text.clone(),
            truth: p.truth,
        }
    }
}

impl PointRecord {
    fn into_point(self, line: u64) -> Result<DataPoint> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("point {} has non-finite coordinates", self.id),
            });
        }
        let mut p = DataPoint::new(self.id, [self.x, self.y], self.text);
        p.truth = self.truth;
        Ok(p)
    }
}

mod truth_field {
    use serde::{de, Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Bool(bool),
        Int(i64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u8(u8::from(*b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Bool(b)) => Ok(Some(b)),
            Some(Raw::Int(0)) => Ok(Some(false)),
            Some(Raw::Int(1)) => Ok(Some(true)),
            Some(Raw::Str(s)) => match s.trim().to_ascii_lowercase().as_str() {
                "" => Ok(None),
                "0" | "false" => Ok(Some(false)),
                "1" | "true" => Ok(Some(true)),
                other => Err(de::Error::custom(format!("invalid truth value {other:?}"))),
            },
            Some(Raw::Int(n)) => Err(de::Error::custom(format!("invalid truth value {n}"))),
        }
    }
}

impl Dataset {
    /// Validates `points` and builds the id index.
    pub fn new(points: Vec<DataPoint>) -> Result<Self> {
        let mut index = HashMap::with_capacity(points.len());
        let mut dim = None;
        for (i, p) in points.iter().enumerate() {
            if index.insert(p.id, i).is_some() {
                return Err(Error::DuplicateId(p.id));
            }
            if !p.location.iter().all(|c| c.is_finite()) {
                return Err(Error::Validation(format!("point {} has non-finite coordinates", p.id)));
            }
            if let Some(e) = &p.embedding {
                if *dim.get_or_insert(e.dim()) != e.dim() {
                    return Err(Error::Validation(format!(
                        "point {} embedding has dimension {}, expected {}",
                        p.id,
                        e.dim(),
                        dim.unwrap_or_default()
                    )));
                }
                let norm = e.norm();
                let ok = if e.degenerate {
                    norm == 0.0
                } else {
                    (norm - 1.0).abs() <= NORM_TOLERANCE
                };
                if !ok {
                    return Err(Error::Validation(format!("point {} embedding has norm {norm}", p.id)));
                }
            }
        }
        let incidence = incidence_of(&points);
        Ok(Self {
            points,
            index,
            incidence,
        })
    }

    /// Reads a dataset. Embeddings are computed when `vectors` is given and
    /// left unset otherwise.
    pub fn load<R: BufRead>(reader: R, format: Format, vectors: Option<&dyn TermVectors>) -> Result<Self> {
        let points = match format {
            Format::Csv => read_csv(reader)?,
            Format::Jsonl => read_jsonl(reader)?,
        };
        let ds = Self::new(points)?;
        match vectors {
            Some(v) => ds.embed(v),
            None => Ok(ds),
        }
    }

    /// Recomputes every point's embedding from its tokens.
    pub fn embed(mut self, vectors: &dyn TermVectors) -> Result<Self> {
        for p in &mut self.points {
            p.embedding = Some(embed_text(&p.tokens, vectors)?);
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &DataPoint {
        &self.points[idx]
    }

    pub fn get(&self, id: PointId) -> Option<&DataPoint> {
        self.index.get(&id).map(|&i| &self.points[i])
    }

    /// Position of `id` in [`points`](Self::points).
    pub fn index_of(&self, id: PointId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn incidence(&self) -> Option<f64> {
        self.incidence
    }

    /// True when every point carries a ground-truth label.
    pub fn fully_labeled(&self) -> bool {
        !self.points.is_empty() && self.points.iter().all(|p| p.truth.is_some())
    }

    /// True when every point has an embedding (possibly degenerate).
    pub fn is_embedded(&self) -> bool {
        self.points.iter().all(|p| p.embedding.is_some())
    }

    /// Labels each point relevant iff one of the lexicon's phrases occurs in
    /// its tokens.
    pub fn apply_label_heuristic(mut self, lexicon: &KeywordLexicon) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::Config("keyword lexicon is empty".into()));
        }
        for p in &mut self.points {
            p.truth = Some(lexicon.matches(&p.tokens));
        }
        self.incidence = incidence_of(&self.points);
        Ok(self)
    }

    /// A uniform sample of `n` points without replacement, kept in the
    /// original order. Deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::Range(format!(
                "cannot sample {n} points from a dataset of {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        picked.sort_unstable();
        Self::new(picked.into_iter().map(|i| self.points[i].clone()).collect())
    }

    pub fn records(&self) -> impl Iterator<Item = PointRecord> + '_ {
        self.points.iter().map(PointRecord::from)
    }

    pub fn write<W: Write>(&self, writer: W, format: Format) -> Result<()> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(writer);
                for r in self.records() {
                    w.serialize(CsvRow::from(r)).map_err(csv_io)?;
                }
                w.flush()?;
            }
            Format::Jsonl => {
                let mut w = std::io::BufWriter::new(writer);
                for r in self.records() {
                    serde_json::to_writer(&mut w, &r).map_err(std::io::Error::from)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn incidence_of(points: &[DataPoint]) -> Option<f64> {
    if points.is_empty() || points.iter().any(|p| p.truth.is_none()) {
        return None;
    }
    let pos = points.iter().filter(|p| p.truth == Some(true)).count();
    Some(pos as f64 / points.len() as f64)
}

/// CSV always writes the truth column so the header is stable.
#[derive(Serialize)]
struct CsvRow {
    id: PointId,
    x: f64,
    y: f64,
    text: String,
    truth: Option<u8>,
}

impl From<PointRecord> for CsvRow {
    fn from(r: PointRecord) -> Self {
        Self {
            id: r.id,
            x: r.x,
            y: r.y,
            text: r.text,
            truth: r.truth.map(u8::from),
        }
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn read_csv<R: BufRead>(reader: R) -> Result<Vec<DataPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
    let parse_err = |e: csv::Error| Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(parse_err)?.clone();
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(parse_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let rec: PointRecord = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        points.push(rec.into_point(line)?);
    }
    Ok(points)
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<DataPoint>> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PointRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        points.push(rec.into_point(lineno)?);
    }
    Ok(points)
}

//! Python bindings for `forage-core`.
//!
//! ```python
//! import forage
//! ds = forage.Dataset.synthetic(n=500, incidence=0.1)
//! s = forage.Session(ds, policy="one-step")
//! batch = s.bookmark_add(ds.positive_ids()[0], at=0)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::sync::Arc;

use forage_core::analytics::{self, TimeBase};
use forage_core::dataset::{EmbeddingTable, HashEmbedder};
use forage_core::session::{EventKind, SessionConfig};
use forage_core::simulator::{self, Scored, SimulationConfig};
use forage_core::synthetic::{clustered, ClusteredConfig};
use forage_core::{
    AttributeModel, Error, Format, InteractionEvent, KeywordLexicon, PointId, PolicySpec, RelevanceModel,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(forage, ForageError, PyValueError, "Invalid input or configuration.");
create_exception!(
    forage,
    ProtocolError,
    ForageError,
    "An event the session protocol does not allow."
);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NotFound(m) => PyKeyError::new_err(m),
        Error::Protocol { .. } | Error::Expired => ProtocolError::new_err(e.to_string()),
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => ForageError::new_err(other.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for forage_core::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_format(format: Option<&str>, path: &std::path::Path) -> PyResult<Format> {
    match format {
        Some(f) => f.parse().or_raise(),
        None => Format::from_path(path)
            .ok_or_else(|| ForageError::new_err(format!("cannot tell the format of {}", path.display()))),
    }
}

fn parse_policy(policy: &str, seed: u64) -> PyResult<PolicySpec> {
    Ok(policy.parse::<PolicySpec>().or_raise()?.with_seed(seed))
}

/// An immutable set of points with locations, texts, embeddings and
/// optional ground truth.
#[pyclass(module = "forage", frozen)]
pub struct Dataset {
    inner: Arc<forage_core::Dataset>,
}

#[pymethods]
impl Dataset {
    /// Loads a CSV or JSONL file with `id,x,y,text[,truth]` fields. Texts
    /// are embedded with `embeddings` (a `term v1 ... vd` table) when given
    /// and with hash vectors otherwise. `label` fills the truth column from
    /// the built-in symptom lexicon or from `lexicon`.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (path, format=None, embeddings=None, embedding_dim=32, embedding_seed=0, label=false, lexicon=None))]
    fn load(
        py: Python<'_>,
        path: PathBuf,
        format: Option<&str>,
        embeddings: Option<PathBuf>,
        embedding_dim: usize,
        embedding_seed: u64,
        label: bool,
        lexicon: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let format = parse_format(format, &path)?;
        py.detach(|| {
            let f = File::open(&path).map_err(Error::Io)?;
            let mut ds = forage_core::Dataset::load(BufReader::new(f), format, None)?;
            if label || lexicon.is_some() {
                let lex = match lexicon {
                    Some(words) => KeywordLexicon::new(words)?,
                    None => KeywordLexicon::default_symptoms(),
                };
                ds = ds.apply_label_heuristic(&lex)?;
            }
            let ds = match embeddings {
                Some(table) => {
                    let f = File::open(&table).map_err(Error::Io)?;
                    ds.embed(&EmbeddingTable::read(BufReader::new(f))?)?
                }
                None => ds.embed(&HashEmbedder {
                    dim: embedding_dim,
                    seed: embedding_seed,
                })?,
            };
            Ok(Self { inner: Arc::new(ds) })
        })
        .or_raise()
    }

    /// A labeled, embedded dataset whose relevant points form `clusters`
    /// groups in both space and text.
    #[staticmethod]
    #[pyo3(signature = (n=2000, incidence=0.05, clusters=2, spread=0.04, embedding_dim=32, seed=7))]
    fn synthetic(
        n: usize,
        incidence: f64,
        clusters: usize,
        spread: f64,
        embedding_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ClusteredConfig {
            n,
            incidence,
            clusters,
            spread,
            embedding_dim,
            seed,
        };
        Ok(Self {
            inner: Arc::new(clustered(&cfg).or_raise()?),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        match self.inner.incidence() {
            Some(r) => format!("Dataset(n={}, incidence={r:.4})", self.inner.len()),
            None => format!("Dataset(n={}, unlabeled)", self.inner.len()),
        }
    }

    /// Fraction of relevant points, or `None` without full ground truth.
    #[getter]
    fn incidence(&self) -> Option<f64> {
        self.inner.incidence()
    }

    fn ids(&self) -> Vec<PointId> {
        self.inner.points().iter().map(|p| p.id).collect()
    }

    fn positive_ids(&self) -> Vec<PointId> {
        self.inner
            .points()
            .iter()
            .filter(|p| p.truth == Some(true))
            .map(|p| p.id)
            .collect()
    }

    /// `{"id", "x", "y", "text", "truth"}` for one point.
    fn point<'py>(&self, py: Python<'py>, id: PointId) -> PyResult<Bound<'py, PyDict>> {
        let p = self.inner.get(id).ok_or_else(|| PyKeyError::new_err(id))?;
        let d = PyDict::new(py);
        d.set_item("id", p.id)?;
        d.set_item("x", p.location[0])?;
        d.set_item("y", p.location[1])?;
        d.set_item("text", &p.text)?;
        d.set_item("truth", p.truth)?;
        Ok(d)
    }

    /// A uniform sample of `n` points, deterministic in `seed`.
    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(self.inner.sample(n, seed).or_raise()?),
        })
    }

    #[pyo3(signature = (path, format=None))]
    fn write(&self, path: PathBuf, format: Option<&str>) -> PyResult<()> {
        let format = parse_format(format, &path)?;
        let f = File::create(&path).map_err(|e| PyOSError::new_err(e.to_string()))?;
        self.inner.write(BufWriter::new(f), format).or_raise()
    }
}

type Batch = Vec<(PointId, f64)>;

/// An interactive labeling session. Event methods take the client time in
/// milliseconds since the session started and return the current
/// suggestion batch as `(point_id, score)` pairs.
#[pyclass(module = "forage")]
pub struct Session {
    inner: forage_core::Session,
}

impl Session {
    fn push(&mut self, py: Python<'_>, e: InteractionEvent) -> PyResult<Batch> {
        let inner = &mut self.inner;
        py.detach(|| inner.apply(e)).or_raise()?;
        Ok(self.inner.current_suggestions().to_vec())
    }
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (dataset, policy="one-step", batch_size=10, budget_ms=600_000, strict_refresh=false, seed=0, session_id="session", dataset_id="dataset"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        dataset: &Dataset,
        policy: &str,
        batch_size: usize,
        budget_ms: u64,
        strict_refresh: bool,
        seed: u64,
        session_id: &str,
        dataset_id: &str,
    ) -> PyResult<Self> {
        let config = SessionConfig {
            policy: parse_policy(policy, seed)?,
            batch_size,
            budget_ms,
            strict_refresh,
            model: RelevanceModel::default(),
        };
        let ds = dataset.inner.clone();
        let inner = py
            .detach(|| forage_core::Session::create(session_id, dataset_id, ds, config))
            .or_raise()?;
        Ok(Self { inner })
    }

    /// Applies one event. `kind` is one of `hover_start`, `hover_end`,
    /// `bookmark_add`, `bookmark_remove`, `irrelevant_flag`, `session_end`.
    #[pyo3(signature = (kind, point_id, at, event_id=None))]
    fn apply(
        &mut self,
        py: Python<'_>,
        kind: &str,
        point_id: Option<PointId>,
        at: u64,
        event_id: Option<String>,
    ) -> PyResult<Batch> {
        let kind = match kind {
            "hover_start" => EventKind::HoverStart,
            "hover_end" => EventKind::HoverEnd,
            "bookmark_add" => EventKind::BookmarkAdd,
            "bookmark_remove" => EventKind::BookmarkRemove,
            "irrelevant_flag" => EventKind::IrrelevantFlag,
            "session_end" => EventKind::SessionEnd,
            other => return Err(ForageError::new_err(format!("unknown event kind {other:?}"))),
        };
        let e = InteractionEvent {
            kind,
            point_id,
            at,
            event_id,
        };
        self.push(py, e)
    }

    fn hover_start(&mut self, py: Python<'_>, point_id: PointId, at: u64) -> PyResult<Batch> {
        self.push(py, InteractionEvent::hover_start(point_id, at))
    }

    fn hover_end(&mut self, py: Python<'_>, point_id: PointId, at: u64) -> PyResult<Batch> {
        self.push(py, InteractionEvent::hover_end(point_id, at))
    }

    fn bookmark_add(&mut self, py: Python<'_>, point_id: PointId, at: u64) -> PyResult<Batch> {
        self.push(py, InteractionEvent::bookmark_add(point_id, at))
    }

    fn bookmark_remove(&mut self, py: Python<'_>, point_id: PointId, at: u64) -> PyResult<Batch> {
        self.push(py, InteractionEvent::bookmark_remove(point_id, at))
    }

    fn irrelevant_flag(&mut self, py: Python<'_>, point_id: PointId, at: u64) -> PyResult<Batch> {
        self.push(py, InteractionEvent::irrelevant_flag(point_id, at))
    }

    fn end(&mut self, py: Python<'_>, at: u64) -> PyResult<Batch> {
        self.push(py, InteractionEvent::session_end(at))
    }

    #[getter]
    fn suggestions(&self) -> Batch {
        self.inner.current_suggestions().to_vec()
    }

    /// Number of points currently labeled relevant.
    #[getter]
    fn utility(&self) -> usize {
        self.inner.utility()
    }

    /// Current text weight of the fused relevance model.
    #[getter]
    fn q(&self) -> f64 {
        self.inner.q()
    }

    /// `(point_id, label)` for every labeled point.
    #[getter]
    fn labels(&self) -> Vec<(PointId, bool)> {
        self.inner
            .observations()
            .iter()
            .map(|o| (o.point_id, o.label))
            .collect()
    }

    #[getter]
    fn ended(&self) -> bool {
        self.inner.is_ended()
    }

    /// The event log with model snapshots, one JSON object per line.
    fn export_jsonl(&self) -> String {
        self.inner.export().to_jsonl_string()
    }

    /// Throughput metrics against the dataset's ground truth. Rates are per
    /// active minute unless `fixed_ms` is given.
    #[pyo3(signature = (fixed_ms=None))]
    fn metrics<'py>(&self, py: Python<'py>, fixed_ms: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
        let base = fixed_ms.map_or(TimeBase::Active, TimeBase::Fixed);
        let export = self.inner.export();
        let m = analytics::throughput_metrics(&export, self.inner.dataset(), base).or_raise()?;
        let d = PyDict::new(py);
        for (name, value) in analytics::ThroughputMetrics::NAMES.iter().zip(m.values()) {
            d.set_item(*name, value)?;
        }
        d.set_item("active_minutes", m.active_minutes)?;
        d.set_item("hover_purity_defined", m.hover_purity_defined)?;
        d.set_item("bookmark_purity_defined", m.bookmark_purity_defined)?;
        Ok(d)
    }

    /// Fraction of distinct suggested points that are relevant.
    fn suggestion_purity(&self) -> PyResult<f64> {
        analytics::suggestion_purity(&self.inner.export(), self.inner.dataset()).or_raise()
    }
}

/// Runs `runs` simulated searches of `iterations` queries each, every run
/// starting from one relevant seed point. `k` overrides the neighbor count
/// of both attribute models. Returns a dict with `per_run_utility`,
/// `seed_points`, `mean` and `ci95`.
#[pyfunction]
#[pyo3(signature = (dataset, policy="one-step", iterations=500, runs=50, seed=0, flip_probability=0.0, k=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    policy: &str,
    iterations: usize,
    runs: usize,
    seed: u64,
    flip_probability: f64,
    k: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut model = RelevanceModel::default();
    if let Some(k) = k {
        for m in [&mut model.text, &mut model.location] {
            *m = AttributeModel::new(m.attribute, k, m.gamma, m.prior).or_raise()?;
        }
    }
    let cfg = SimulationConfig {
        iterations,
        runs,
        policy: parse_policy(policy, seed)?,
        seed,
        flip_probability,
        model,
    };
    let ds = dataset.inner.clone();
    let r = py.detach(|| simulator::run_simulation(&ds, &cfg)).or_raise()?;
    let d = PyDict::new(py);
    d.set_item("policy", r.policy)?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("seed_points", r.seed_points)?;
    d.set_item("per_run_utility", r.per_run_utility)?;
    d.set_item("mean", r.mean)?;
    d.set_item("ci95", r.ci95)?;
    Ok(d)
}

/// Fits the fusion weight on a random `train_fraction` of the points and
/// scores the rest. Returns `auc`, `precision` (keyed by k), `q` and the
/// split sizes.
#[pyfunction]
#[pyo3(signature = (dataset, train_fraction=0.001, seed=0, ks=vec![1, 5]))]
fn cross_validate<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
    ks: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = dataset.inner.clone();
    let cv = py
        .detach(|| simulator::cross_validate(&ds, &RelevanceModel::default(), train_fraction, seed, &ks))
        .or_raise()?;
    let d = PyDict::new(py);
    d.set_item("auc", cv.auc)?;
    d.set_item("precision", cv.precision)?;
    d.set_item("q", cv.q)?;
    d.set_item("train_size", cv.train_size)?;
    d.set_item("test_size", cv.test_size)?;
    d.set_item("degenerate_train", cv.degenerate_train)?;
    Ok(d)
}

fn paired<T: Copy>(scores: &[f64], other: &[T]) -> PyResult<()> {
    if scores.len() != other.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} labels",
            scores.len(),
            other.len()
        )));
    }
    Ok(())
}

/// Area under the ROC curve, ties counted as one half.
#[pyfunction]
fn auc_roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    paired(&scores, &labels)?;
    let pairs: Vec<(f64, bool)> = scores.into_iter().zip(labels).collect();
    simulator::auc_roc(&pairs).or_raise()
}

/// Fraction of positives among the `k` highest scores. Ties go to the
/// smaller id, where ids default to list positions.
#[pyfunction]
#[pyo3(signature = (scores, labels, k, ids=None))]
fn precision_at_k(scores: Vec<f64>, labels: Vec<bool>, k: usize, ids: Option<Vec<PointId>>) -> PyResult<f64> {
    paired(&scores, &labels)?;
    let ids = ids.unwrap_or_else(|| (0..scores.len() as PointId).collect());
    paired(&scores, &ids)?;
    let scored: Vec<Scored> = scores
        .into_iter()
        .zip(labels)
        .zip(ids)
        .map(|((score, truth), id)| Scored { id, score, truth })
        .collect();
    simulator::precision_at_k(&scored, k).or_raise()
}

/// Welch's two-sample t-test with Cohen's d. Returns `t`, `p`, `df`, `d`
/// and `(mean, half_width)` 95% intervals `ci95_a` and `ci95_b`.
#[pyfunction]
fn welch_t_test<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = analytics::welch_t_test(&a, &b).or_raise()?;
    let d = PyDict::new(py);
    d.set_item("t", r.t)?;
    d.set_item("p", r.p)?;
    d.set_item("df", r.df)?;
    d.set_item("d", r.d)?;
    d.set_item("ci95_a", (r.ci95_a.mean, r.ci95_a.half_width))?;
    d.set_item("ci95_b", (r.ci95_b.mean, r.ci95_b.half_width))?;
    Ok(d)
}

#[pymodule]
fn forage(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add("ForageError", m.py().get_type::<ForageError>())?;
    m.add("ProtocolError", m.py().get_type::<ProtocolError>())?;
    Ok(())
}

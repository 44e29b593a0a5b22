//! The `forage` command line.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use forage_core::analytics::{self, SessionMetrics, TimeBase};
use forage_core::simulator::{self, SimulationConfig};
use forage_core::synthetic::{clustered, ClusteredConfig};
use forage_core::{Dataset, Format, PolicySpec, RelevanceModel, SessionExport};

use crate::embedder::{read_dataset, read_lexicon, Embedder};
use crate::service::{self, AppState, ServiceConfig};
use crate::store::{DatasetMeta, Store};

#[derive(Debug, Parser)]
#[command(name = "forage", version, about = "Active search for interactive data foraging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill the truth column from a keyword lexicon.
    Label(LabelArgs),
    /// Benchmark query policies against ground truth.
    Simulate(SimulateArgs),
    /// Score the relevance model on a random train/test split.
    Crossval(CrossvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Throughput metrics and group comparisons from session exports.
    Metrics(MetricsArgs),
    /// Write stored session logs as CSV or JSONL.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Input dataset (.csv or .jsonl).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// Output path; `-` writes CSV to stdout.
    #[arg(long, short)]
    pub out: PathBuf,
    /// One phrase per line. Defaults to the built-in symptom list.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file (.csv or .jsonl).
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    /// Generate a clustered synthetic dataset of this many points instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Fraction of relevant synthetic points.
    #[arg(long, default_value_t = 0.05)]
    pub incidence: f64,
    #[arg(long, default_value_t = 7)]
    pub synthetic_seed: u64,
    /// Term vectors as `term v1 ... vd` lines; hash embeddings otherwise.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub embedding_seed: u64,
    /// Lexicon for points without a truth value.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Relabel every point from the lexicon, ignoring the truth column.
    #[arg(long)]
    pub relabel: bool,
    /// Use a uniform sample of this many points.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
}

impl DataArgs {
    fn embedder(&self) -> Embedder {
        Embedder::from_args(self.embeddings.clone(), self.embedding_dim, self.embedding_seed)
    }

    /// Loads, labels, samples and embeds.
    pub fn load(&self) -> Result<Dataset> {
        let ds = match (&self.data, self.synthetic) {
            (_, Some(n)) => {
                let ds = clustered(&ClusteredConfig {
                    n,
                    incidence: self.incidence,
                    seed: self.synthetic_seed,
                    embedding_dim: self.embedding_dim,
                    ..Default::default()
                })?;
                if self.embeddings.is_none() {
                    return sample(ds, self.sample, self.sample_seed);
                }
                ds
            }
            (Some(path), None) => read_dataset(path, self.format)?,
            (None, None) => bail!("pass --data or --synthetic"),
        };
        let ds = if self.relabel || !ds.fully_labeled() {
            ds.apply_label_heuristic(&read_lexicon(self.lexicon.as_deref())?)?
        } else {
            ds
        };
        self.embedder().embed(sample(ds, self.sample, self.sample_seed)?)
    }
}

fn sample(ds: Dataset, n: Option<usize>, seed: u64) -> Result<Dataset> {
    Ok(match n {
        Some(n) => ds.sample(n, seed)?,
        None => ds,
    })
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Neighbors per attribute model.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Pseudo-count weight of the prior.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub prior: f64,
    /// Initial text weight of the fused model.
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
}

impl ModelArgs {
    fn model(&self) -> Result<RelevanceModel> {
        if !(0.0..=1.0).contains(&self.q) {
            bail!("--q must lie in [0, 1]");
        }
        Ok(RelevanceModel {
            q: self.q,
            ..RelevanceModel::uniform(self.k, self.gamma, self.prior)?
        })
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Policies to compare: random, one-step, two-step, ell-N, ens-N.
    #[arg(long = "policy", default_values_t = vec![PolicySpec::one_step()])]
    pub policies: Vec<PolicySpec>,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability that the simulated oracle reports the wrong label.
    #[arg(long, default_value_t = 0.0)]
    pub flip: f64,
    /// Per-run utilities; `-` for stdout.
    #[arg(long, short, default_value = "-")]
    pub out: PathBuf,
    /// Mean and 95% interval per policy.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.001)]
    pub train_fraction: f64,
    /// Independent splits, seeded `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cutoffs for precision at k.
    #[arg(long = "at", value_delimiter = ',', default_values_t = vec![1usize, 5])]
    pub ks: Vec<usize>,
    #[arg(long, short, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value = "forage-data")]
    pub data_dir: PathBuf,
    /// Keep everything in memory.
    #[arg(long)]
    pub no_persist: bool,
    /// Policy for sessions that do not name one.
    #[arg(long, default_value_t = PolicySpec::one_step())]
    pub policy: PolicySpec,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Term vectors for uploaded datasets; hash embeddings otherwise.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub embedding_seed: u64,
    /// Register a dataset file at startup as `ID=PATH`, unless the id is
    /// already stored. Repeatable.
    #[arg(long = "dataset", value_parser = parse_preload)]
    pub datasets: Vec<(String, PathBuf)>,
    /// Label preloaded datasets from the built-in lexicon.
    #[arg(long)]
    pub label: bool,
}

fn parse_preload(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected ID=PATH, got {s:?}"))?;
    Ok((id.to_owned(), PathBuf::from(path)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Session exports (JSONL).
    #[arg(required = true)]
    pub exports: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Normalize rates by a fixed duration in ms instead of active time.
    #[arg(long)]
    pub fixed_ms: Option<u64>,
    /// One row per session.
    #[arg(long, short, default_value = "-")]
    pub out: PathBuf,
    /// Control versus active-search comparison per metric.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Distinct lexicon phrases among bookmarks, per session and minute.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, default_value = "forage-data")]
    pub data_dir: PathBuf,
    /// Sessions to export; all stored sessions by default.
    #[arg(long = "session")]
    pub sessions: Vec<String>,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    pub format: ExportFormat,
    #[arg(long, short, default_value = "-")]
    pub out: PathBuf,
}

fn output(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdout().lock()));
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Label(a) => label(a),
        Command::Simulate(a) => simulate(a),
        Command::Crossval(a) => crossval(a),
        Command::Serve(a) => serve(a),
        Command::Metrics(a) => metrics(a),
        Command::Export(a) => export(a),
    }
}

fn label(a: LabelArgs) -> Result<()> {
    let ds = read_dataset(&a.data, a.format)?.apply_label_heuristic(&read_lexicon(a.lexicon.as_deref())?)?;
    let format = if a.out == Path::new("-") {
        Format::Csv
    } else {
        Format::from_path(&a.out).unwrap_or(Format::Csv)
    };
    let mut w = output(&a.out)?;
    ds.write(&mut w, format)?;
    w.flush()?;
    tracing::info!(points = ds.len(), incidence = ?ds.incidence(), "labeled");
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let ds = Arc::new(a.data.load()?);
    let cfg = SimulationConfig {
        iterations: a.iterations,
        runs: a.runs,
        policy: PolicySpec::one_step(),
        seed: a.seed,
        flip_probability: a.flip,
        model: a.model.model()?,
    };
    tracing::info!(points = ds.len(), incidence = ?ds.incidence(), policies = a.policies.len(), "simulating");
    let reports = simulator::run_benchmark(&ds, &a.policies, &cfg)?;
    for r in &reports {
        tracing::info!(policy = %r.policy, mean = r.mean, ci95 = r.ci95, "done");
    }
    let mut w = output(&a.out)?;
    simulator::write_runs_csv(&reports, &mut w)?;
    w.flush()?;
    if let Some(path) = &a.summary {
        let mut w = output(path)?;
        simulator::write_summary_csv(&reports, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn crossval(a: CrossvalArgs) -> Result<()> {
    let ds = Arc::new(a.data.load()?);
    let model = a.model.model()?;
    let mut w = csv::Writer::from_writer(output(&a.out)?);
    let mut header = [
        "seed",
        "train_fraction",
        "train_size",
        "test_size",
        "q",
        "degenerate_train",
        "auc",
    ]
    .map(String::from)
    .to_vec();
    header.extend(a.ks.iter().map(|k| format!("p@{k}")));
    w.write_record(&header)?;
    for r in 0..a.repeats {
        let seed = a.seed + r;
        let cv = simulator::cross_validate(&ds, &model, a.train_fraction, seed, &a.ks)?;
        let mut row = vec![
            seed.to_string(),
            a.train_fraction.to_string(),
            cv.train_size.to_string(),
            cv.test_size.to_string(),
            format!("{:.2}", cv.q),
            cv.degenerate_train.to_string(),
            format!("{:.6}", cv.auc),
        ];
        row.extend(a.ks.iter().map(|k| format!("{:.6}", cv.precision[k])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        bind: a.bind,
        data_dir: a.data_dir,
        persist: !a.no_persist,
        default_policy: a.policy,
        default_batch_size: a.batch_size,
        embedder: Embedder::from_args(a.embeddings, a.embedding_dim, a.embedding_seed),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = service::bind(&cfg).await?;
        let preload = (a.datasets, a.label);
        let state = tokio::task::spawn_blocking(move || -> Result<Arc<AppState>> {
            let state = AppState::new(cfg)?;
            let (datasets, label) = preload;
            for (id, path) in datasets {
                if state.has_dataset(&id) {
                    continue;
                }
                let mut ds = read_dataset(&path, None)?;
                if label {
                    ds = ds.apply_label_heuristic(&forage_core::KeywordLexicon::default_symptoms())?;
                }
                let embedder = state.config().embedder.clone();
                let ds = embedder.embed(ds)?;
                state
                    .add_dataset(Some(id.clone()), ds, &DatasetMeta { embedder })
                    .map_err(|e| anyhow::anyhow!("registering {id}: {e:?}"))?;
            }
            Ok(state)
        })
        .await??;
        service::serve_with(listener, state, shutdown_signal()).await
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn read_export(path: &Path) -> Result<SessionExport> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SessionExport::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let ds = a.data.load()?;
    let base = a.fixed_ms.map_or(TimeBase::Active, TimeBase::Fixed);
    let mut rows: Vec<SessionMetrics> = Vec::new();
    let mut exports = Vec::new();
    for path in &a.exports {
        let export = read_export(path)?;
        rows.push(
            analytics::session_metrics(&export, &ds, base)
                .with_context(|| format!("metrics for {}", path.display()))?,
        );
        exports.push(export);
    }
    let mut w = output(&a.out)?;
    analytics::write_metrics_csv(&rows, &mut w)?;
    w.flush()?;

    if let Some(path) = &a.compare {
        let (control, active): (Vec<_>, Vec<_>) = rows.iter().cloned().partition(|r| r.group == "control");
        let cmp =
            analytics::compare_groups(&control, &active).context("comparing control with active-search sessions")?;
        let mut w = output(path)?;
        analytics::write_comparison_csv(&cmp, &mut w)?;
        w.flush()?;
    }

    if let Some(path) = &a.curves {
        let lexicon = read_lexicon(a.data.lexicon.as_deref())?;
        let mut w = csv::Writer::from_writer(output(path)?);
        w.write_record(["session_id", "minute", "keywords"])?;
        for export in &exports {
            for (minute, n) in analytics::keyword_discovery_curve(export, &ds, &lexicon)? {
                w.write_record([export.header.session_id.clone(), minute.to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let store = Store::open(&a.data_dir)?;
    let exports = if a.sessions.is_empty() {
        store.load_sessions()?
    } else {
        a.sessions
            .iter()
            .map(|id| store.load_session(id))
            .collect::<Result<Vec<_>>>()?
    };
    let mut w = output(&a.out)?;
    match a.format {
        ExportFormat::Jsonl => {
            for e in &exports {
                e.write_jsonl(&mut w)?;
            }
        }
        ExportFormat::Csv => {
            let mut c = csv::Writer::from_writer(&mut w);
            c.write_record([
                "session_id",
                "index",
                "kind",
                "point_id",
                "at",
                "event_id",
                "q",
                "suggestions",
            ])?;
            for e in &exports {
                for r in &e.records {
                    let kind = serde_json::to_value(r.event.kind)?;
                    c.write_record([
                        e.header.session_id.clone(),
                        r.index.to_string(),
                        kind.as_str().unwrap_or_default().to_owned(),
                        r.event.point_id.map(|p| p.to_string()).unwrap_or_default(),
                        r.event.at.to_string(),
                        r.event.event_id.clone().unwrap_or_default(),
                        format!("{:.2}", r.q),
                        r.suggestions
                            .iter()
                            .map(|s| s.to_string())
                            .collect::<Vec<_>>()
                            .join(" "),
                    ])?;
                }
            }
            c.flush()?;
        }
    }
    w.flush()?;
    Ok(())
}

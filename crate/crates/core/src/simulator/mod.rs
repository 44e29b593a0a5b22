//! Offline evaluation: policy simulations against ground truth, sparse-label
//! cross-validation of the relevance model, and simulated oracle sessions.

mod ranking;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{Dataset, PointId};
use crate::error::{Error, Result};
use crate::policy::{self, step_rng, PolicySpec};
use crate::relevance::{DistanceCache, Observation, ObservationSet, Posterior, RelevanceModel};
use crate::session::{InteractionEvent, Session, SessionConfig, SessionExport};

pub use ranking::{auc_roc, precision_at_k, Scored};

// Stream salts so that seed points, label noise and random policies draw
// from unrelated streams of the same base seed.
const SEED_POINT_SALT: u64 = 0x5eed_0000_0000_0001;
const FLIP_SALT: u64 = 0xf11b_0000_0000_0002;
const POLICY_SALT: u64 = 0x9011_c700_0000_0003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Queries per run.
    pub iterations: usize,
    pub runs: usize,
    pub policy: PolicySpec,
    pub seed: u64,
    /// Probability that a revealed label is flipped before it enters `D`.
    pub flip_probability: f64,
    /// Initial model; `q` is refit after every revealed label.
    pub model: RelevanceModel,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            runs: 50,
            policy: PolicySpec::one_step(),
            seed: 0,
            flip_probability: 0.0,
            model: RelevanceModel::default(),
        }
    }
}

impl SimulationConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.runs == 0 {
            return Err(Error::Config("iterations and runs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        self.policy.validate()?;
        if !self.policy.suggests() {
            return Err(Error::Config("policy none cannot be simulated".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub policy: String,
    pub iterations: usize,
    /// Initial positive for each run.
    pub seed_points: Vec<PointId>,
    /// True positives found per run, excluding the seed point.
    pub per_run_utility: Vec<usize>,
    pub mean: f64,
    /// Student-t 95% half-width; NaN with a single run.
    pub ci95: f64,
}

/// Mean and Student-t 95% confidence half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

fn positive_indices(ds: &Dataset) -> Result<Vec<usize>> {
    if !ds.fully_labeled() {
        return Err(Error::Config("simulation needs ground truth on every point".into()));
    }
    let mut pos: Vec<usize> = (0..ds.len()).filter(|&i| ds.point(i).truth == Some(true)).collect();
    if pos.is_empty() {
        return Err(Error::Config("dataset has no relevant points".into()));
    }
    pos.sort_by_key(|&i| ds.point(i).id);
    Ok(pos)
}

fn auto_cache(ds: &Dataset) -> Option<Arc<DistanceCache>> {
    (ds.len() <= DistanceCache::AUTO_LIMIT).then(|| Arc::new(DistanceCache::build(ds)))
}

/// The seed positive of run `run`, shared by every policy.
fn seed_point(positives: &[usize], base_seed: u64, run: usize) -> usize {
    let mut rng = step_rng(base_seed ^ SEED_POINT_SALT, run as u64);
    positives[rng.random_range(0..positives.len())]
}

fn simulate_run(
    ds: &Arc<Dataset>,
    cache: Option<Arc<DistanceCache>>,
    cfg: &SimulationConfig,
    seed_idx: usize,
    run: usize,
) -> Result<usize> {
    let seed_id = ds.point(seed_idx).id;
    let obs: ObservationSet = std::iter::once(Observation::oracle(seed_id, true)).collect();
    let mut post = Posterior::build(ds.clone(), cfg.model, &obs, cache)?;
    post.refit();
    let mut spec = cfg.policy;
    spec.seed = step_rng(cfg.seed ^ POLICY_SALT ^ spec.seed, run as u64).random();
    let mut flips = step_rng(cfg.seed ^ FLIP_SALT, run as u64);
    let mut utility = 0;
    for step in 0..cfg.iterations {
        let id = match policy::select(&post, &spec, step as u64) {
            Ok(id) => id,
            Err(Error::Exhausted) => break,
            Err(e) => return Err(e),
        };
        let truth = ds.get(id).and_then(|p| p.truth).expect("fully labeled");
        let flipped = flips.random::<f64>() < cfg.flip_probability;
        post.observe(id, truth ^ flipped)?;
        if truth {
            utility += 1;
        }
        post.refit();
    }
    Ok(utility)
}

fn simulate_with(
    ds: &Arc<Dataset>,
    cache: Option<Arc<DistanceCache>>,
    positives: &[usize],
    cfg: &SimulationConfig,
) -> Result<SimulationReport> {
    cfg.validate()?;
    let seeds: Vec<usize> = (0..cfg.runs).map(|r| seed_point(positives, cfg.seed, r)).collect();
    let utilities = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &s)| simulate_run(ds, cache.clone(), cfg, s, r))
        .collect::<Result<Vec<usize>>>()?;
    let as_f64: Vec<f64> = utilities.iter().map(|&u| u as f64).collect();
    let (mean, ci95) = mean_ci95(&as_f64);
    Ok(SimulationReport {
        policy: cfg.policy.to_string(),
        iterations: cfg.iterations,
        seed_points: seeds.iter().map(|&i| ds.point(i).id).collect(),
        per_run_utility: utilities,
        mean,
        ci95,
    })
}

/// Runs `cfg.runs` independent searches of `cfg.iterations` queries each,
/// every one starting from a single random relevant point.
pub fn run_simulation(ds: &Arc<Dataset>, cfg: &SimulationConfig) -> Result<SimulationReport> {
    let positives = positive_indices(ds)?;
    simulate_with(ds, auto_cache(ds), &positives, cfg)
}

/// [`run_simulation`] for several policies with the same seed point in each
/// run. `cfg.policy` is ignored.
pub fn run_benchmark(
    ds: &Arc<Dataset>,
    policies: &[PolicySpec],
    cfg: &SimulationConfig,
) -> Result<Vec<SimulationReport>> {
    let positives = positive_indices(ds)?;
    let cache = auto_cache(ds);
    policies
        .iter()
        .map(|p| {
            let c = SimulationConfig { policy: *p, ..*cfg };
            simulate_with(ds, cache.clone(), &positives, &c)
        })
        .collect()
}

/// One row per (policy, run): `policy,run,seed_point,utility`.
pub fn write_runs_csv<W: Write>(reports: &[SimulationReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "run", "seed_point", "utility"])
        .map_err(csv_err)?;
    for r in reports {
        for (i, (u, s)) in r.per_run_utility.iter().zip(&r.seed_points).enumerate() {
            out.write_record([r.policy.clone(), i.to_string(), s.to_string(), u.to_string()])
                .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One row per policy: `policy,runs,iterations,mean,ci95`.
pub fn write_summary_csv<W: Write>(reports: &[SimulationReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "runs", "iterations", "mean", "ci95"])
        .map_err(csv_err)?;
    for r in reports {
        out.write_record([
            r.policy.clone(),
            r.per_run_utility.len().to_string(),
            r.iterations.to_string(),
            format!("{:.2}", r.mean),
            format!("{:.2}", r.ci95),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub auc: f64,
    /// Precision at each requested k.
    pub precision: BTreeMap<usize, f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub q: f64,
    /// The training split held a single class, so the prior-only model was
    /// used.
    pub degenerate_train: bool,
}

/// Fits on a random `train_fraction` of the points and scores the rest.
pub fn cross_validate(
    ds: &Arc<Dataset>,
    model: &RelevanceModel,
    train_fraction: f64,
    seed: u64,
    ks: &[usize],
) -> Result<CrossValidation> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Range(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    if !ds.fully_labeled() {
        return Err(Error::Config(
            "cross-validation needs ground truth on every point".into(),
        ));
    }
    let n_train = (ds.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= ds.len() {
        return Err(Error::Range(format!(
            "train fraction {train_fraction} of {} points leaves an empty split",
            ds.len()
        )));
    }
    let mut rng = step_rng(seed, 0);
    let train = rand::seq::index::sample(&mut rng, ds.len(), n_train).into_vec();
    let mut in_train = vec![false; ds.len()];
    let mut obs = ObservationSet::new();
    for &i in &train {
        in_train[i] = true;
        let p = ds.point(i);
        obs.upsert(Observation::oracle(p.id, p.truth.expect("fully labeled")));
    }
    let positives = obs.utility();
    let degenerate_train = positives == 0 || positives == obs.len();
    if degenerate_train {
        obs = ObservationSet::new();
    }
    let mut post = Posterior::new(ds.clone(), *model, &obs)?;
    if !degenerate_train {
        post.refit();
    }
    let scored: Vec<Scored> = (0..ds.len())
        .filter(|&i| !in_train[i])
        .map(|i| Scored {
            id: ds.point(i).id,
            score: post.probability(i),
            truth: ds.point(i).truth.expect("fully labeled"),
        })
        .collect();
    let pairs: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.truth)).collect();
    let auc = auc_roc(&pairs)?;
    let precision = ks
        .iter()
        .map(|&k| precision_at_k(&scored, k).map(|p| (k, p)))
        .collect::<Result<_>>()?;
    Ok(CrossValidation {
        auc,
        precision,
        train_size: n_train,
        test_size: scored.len(),
        q: post.q(),
        degenerate_train,
    })
}

/// A scripted user who starts from one bookmarked relevant point and then
/// always inspects the top suggestion, bookmarking it if they judge it
/// relevant and flagging it otherwise. Each judgement is wrong with
/// probability `flip_probability`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSessionConfig {
    pub steps: usize,
    pub flip_probability: f64,
    pub seed: u64,
    pub session: SessionConfig,
    /// Simulated time per inspected point.
    pub step_ms: u64,
}

impl Default for OracleSessionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            flip_probability: 0.0,
            seed: 0,
            session: SessionConfig::default(),
            step_ms: 4_000,
        }
    }
}

/// Drives a [`Session`] with a simulated oracle and returns its export.
pub fn simulate_oracle_session(
    ds: &Arc<Dataset>,
    cache: Option<Arc<DistanceCache>>,
    cfg: &OracleSessionConfig,
) -> Result<SessionExport> {
    let positives = positive_indices(ds)?;
    let mut session_cfg = cfg.session;
    session_cfg.budget_ms = session_cfg
        .budget_ms
        .max(cfg.step_ms.saturating_mul(cfg.steps as u64 + 2));
    let mut s = Session::create_with_cache(
        format!("oracle-{}", cfg.seed),
        "synthetic",
        ds.clone(),
        session_cfg,
        cache,
    )?;
    let mut rng = step_rng(cfg.seed ^ FLIP_SALT, 0);
    let first = ds.point(seed_point(&positives, cfg.seed, 0)).id;
    let dwell = cfg.step_ms / 2;
    s.apply(InteractionEvent::hover_start(first, 0))?;
    s.apply(InteractionEvent::hover_end(first, dwell))?;
    s.apply(InteractionEvent::bookmark_add(first, dwell + 1))?;
    for step in 1..=cfg.steps {
        let Some(&(target, _)) = s.current_suggestions().first() else {
            break;
        };
        let t = step as u64 * cfg.step_ms;
        let truth = ds.get(target).and_then(|p| p.truth).expect("fully labeled");
        let judged = truth ^ (rng.random::<f64>() < cfg.flip_probability);
        s.apply(InteractionEvent::hover_start(target, t))?;
        s.apply(InteractionEvent::hover_end(target, t + dwell))?;
        let label = if judged {
            InteractionEvent::bookmark_add(target, t + dwell + 1)
        } else {
            InteractionEvent::irrelevant_flag(target, t + dwell + 1)
        };
        s.apply(label)?;
    }
    s.apply(InteractionEvent::session_end((cfg.steps as u64 + 1) * cfg.step_ms))?;
    Ok(s.export())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DataPoint, Embedding};
    use crate::synthetic::{clustered, ClusteredConfig};

    fn tiny(labels: &[bool]) -> Arc<Dataset> {
        let pts = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut p = DataPoint::new(i as u64 + 1, [i as f64, 0.0], "").with_truth(y);
                p.embedding = Some(Embedding {
                    values: vec![1.0, 0.0],
                    degenerate: false,
                });
                p
            })
            .collect();
        Arc::new(Dataset::new(pts).unwrap())
    }

    #[test]
    fn saturated_dataset_has_zero_width() {
        let ds = tiny(&[true; 12]);
        let cfg = SimulationConfig {
            iterations: 5,
            runs: 4,
            ..Default::default()
        };
        let rep = run_simulation(&ds, &cfg).unwrap();
        assert_eq!(rep.per_run_utility, vec![5; 4]);
        assert_eq!(rep.mean, 5.0);
        assert_eq!(rep.ci95, 0.0);
    }

    #[test]
    fn utility_is_bounded_by_remaining_positives() {
        let ds = tiny(&[true, false, true, false, false, false]);
        let cfg = SimulationConfig {
            iterations: 50,
            runs: 3,
            ..Default::default()
        };
        let rep = run_simulation(&ds, &cfg).unwrap();
        assert!(rep.per_run_utility.iter().all(|&u| u == 1));
    }

    #[test]
    fn missing_positives_or_truth_is_a_config_error() {
        let ds = tiny(&[false, false]);
        assert!(matches!(
            run_simulation(&ds, &SimulationConfig::default()),
            Err(Error::Config(_))
        ));
        let mut pts: Vec<_> = ds.points().to_vec();
        pts[0].truth = None;
        let ds = Arc::new(Dataset::new(pts).unwrap());
        assert!(matches!(
            run_simulation(&ds, &SimulationConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mean_ci95_matches_hand_computation() {
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // s = sqrt(5/3), t(0.975, 3) = 3.182446305284263
        let expected = 3.182446305284263 * (5.0f64 / 3.0).sqrt() / 2.0;
        assert!((h - expected).abs() < 1e-9, "{h} vs {expected}");
        assert!(mean_ci95(&[3.0]).1.is_nan());
    }

    #[test]
    fn benchmark_shares_seed_points() {
        let ds = Arc::new(
            clustered(&ClusteredConfig {
                n: 150,
                incidence: 0.1,
                ..Default::default()
            })
            .unwrap(),
        );
        let cfg = SimulationConfig {
            iterations: 10,
            runs: 4,
            seed: 3,
            ..Default::default()
        };
        let reps = run_benchmark(&ds, &[PolicySpec::random(0), PolicySpec::one_step()], &cfg).unwrap();
        assert_eq!(reps[0].seed_points, reps[1].seed_points);
        let alone = run_simulation(
            &ds,
            &SimulationConfig {
                policy: PolicySpec::random(0),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(alone, reps[0]);
        let single = run_benchmark(&ds, &[PolicySpec::one_step()], &cfg).unwrap();
        assert_eq!(single, vec![reps[1].clone()]);
    }

    #[test]
    fn csv_exports() {
        let ds = tiny(&[true; 6]);
        let cfg = SimulationConfig {
            iterations: 2,
            runs: 3,
            ..Default::default()
        };
        let reps = run_benchmark(&ds, &[PolicySpec::random(0), PolicySpec::one_step()], &cfg).unwrap();
        let mut runs = Vec::new();
        write_runs_csv(&reps, &mut runs).unwrap();
        let runs = String::from_utf8(runs).unwrap();
        assert_eq!(runs.lines().count(), 1 + 6);
        assert!(runs.starts_with("policy,run,seed_point,utility\n"));
        let mut summary = Vec::new();
        write_summary_csv(&reps, &mut summary).unwrap();
        let summary = String::from_utf8(summary).unwrap();
        assert!(summary.contains("one-step,3,2,2.00,0.00"));
    }

    #[test]
    fn cross_validation_reports_requested_precisions() {
        let ds = Arc::new(
            clustered(&ClusteredConfig {
                n: 300,
                incidence: 0.2,
                ..Default::default()
            })
            .unwrap(),
        );
        let cv = cross_validate(&ds, &RelevanceModel::default(), 0.1, 1, &[1, 5]).unwrap();
        assert_eq!(cv.train_size, 30);
        assert_eq!(cv.test_size, 270);
        assert_eq!(cv.precision.keys().copied().collect::<Vec<_>>(), vec![1, 5]);
        assert!((0.0..=1.0).contains(&cv.auc));
        assert!(matches!(
            cross_validate(&ds, &RelevanceModel::default(), 0.0, 1, &[1]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn single_class_training_falls_back_to_prior() {
        let mut labels = vec![false; 40];
        labels[39] = true;
        labels[38] = true;
        let ds = tiny(&labels);
        // 2 training points out of 40; find a seed whose split is all negative
        let cv = (0..50)
            .map(|s| cross_validate(&ds, &RelevanceModel::default(), 0.05, s, &[1]).unwrap())
            .find(|cv| cv.degenerate_train)
            .unwrap();
        assert_eq!(cv.auc, 0.5);
    }

    #[test]
    fn oracle_session_export_is_replayable() {
        let ds = Arc::new(
            clustered(&ClusteredConfig {
                n: 120,
                incidence: 0.15,
                ..Default::default()
            })
            .unwrap(),
        );
        let cfg = OracleSessionConfig {
            steps: 15,
            flip_probability: 0.2,
            seed: 4,
            ..Default::default()
        };
        let export = simulate_oracle_session(&ds, None, &cfg).unwrap();
        assert_eq!(export, simulate_oracle_session(&ds, None, &cfg).unwrap());
        let replay = Session::replay(&export.header, ds.clone(), None, export.events()).unwrap();
        assert_eq!(replay.export(), export);
    }
}

//! Foraging-throughput metrics over exported sessions and two-group
//! comparisons.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{Dataset, KeywordLexicon, PointId};
use crate::error::{Error, Result};
use crate::policy::PolicyKind;
use crate::session::{EventKind, InteractionEvent, SessionExport};

/// Shortest dwell that counts as an inspection.
pub const VALID_HOVER_MS: u64 = 500;
const MS_PER_MINUTE: f64 = 60_000.0;
const MIN_ACTIVE_MS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hover {
    pub point_id: PointId,
    pub duration_ms: u64,
    pub relevant: bool,
}

fn truth_of(ds: &Dataset, id: PointId) -> Result<bool> {
    ds.get(id)
        .ok_or_else(|| Error::NotFound(format!("point {id}")))?
        .truth
        .ok_or_else(|| Error::Validation(format!("point {id} has no ground truth")))
}

/// Pairs each `hover_end` with the latest open `hover_start` on the same
/// point and keeps intervals of at least [`VALID_HOVER_MS`]. Hovers still
/// open at the end of the log are dropped.
pub fn valid_hovers<'a, I>(log: I, truth: &Dataset) -> Result<Vec<Hover>>
where
    I: IntoIterator<Item = &'a InteractionEvent>,
{
    let mut open: HashMap<PointId, Vec<u64>> = HashMap::new();
    let mut out = Vec::new();
    for (i, e) in log.into_iter().enumerate() {
        let Some(id) = e.point_id else { continue };
        match e.kind {
            EventKind::HoverStart => open.entry(id).or_default().push(e.at),
            EventKind::HoverEnd => {
                let start = open.get_mut(&id).and_then(Vec::pop).ok_or_else(|| Error::Protocol {
                    index: Some(i),
                    message: format!("hover_end on point {id} without an open hover_start"),
                })?;
                let duration_ms = e.at.saturating_sub(start);
                if duration_ms >= VALID_HOVER_MS {
                    out.push(Hover {
                        point_id: id,
                        duration_ms,
                        relevant: truth_of(truth, id)?,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Points bookmarked at the end of the log, in order of their last add.
pub fn net_bookmarks<'a, I>(log: I) -> Vec<PointId>
where
    I: IntoIterator<Item = &'a InteractionEvent>,
{
    let mut order = Vec::new();
    let mut held = HashSet::new();
    for e in log {
        match (e.kind, e.point_id) {
            (EventKind::BookmarkAdd, Some(id)) => {
                if held.insert(id) {
                    order.push(id);
                }
            }
            (EventKind::BookmarkRemove, Some(id)) | (EventKind::IrrelevantFlag, Some(id)) if held.remove(&id) => {
                order.retain(|&p| p != id);
            }
            _ => {}
        }
    }
    order
}

/// How per-minute rates are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBase {
    /// First event to last event, at least one second.
    #[default]
    Active,
    /// A fixed duration in milliseconds, such as the allotted session time.
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputMetrics {
    pub hovers_per_min: f64,
    pub relevant_hovers_per_min: f64,
    pub hover_purity: f64,
    pub bookmarks_per_min: f64,
    pub relevant_bookmarks_per_min: f64,
    pub bookmark_purity: f64,
    pub active_minutes: f64,
    /// False when there were no valid hovers; `hover_purity` is then 0.
    pub hover_purity_defined: bool,
    /// False when no bookmarks were held at the end; `bookmark_purity` is then 0.
    pub bookmark_purity_defined: bool,
}

impl ThroughputMetrics {
    pub const NAMES: [&'static str; 6] = [
        "hovers_per_min",
        "relevant_hovers_per_min",
        "hover_purity",
        "bookmarks_per_min",
        "relevant_bookmarks_per_min",
        "bookmark_purity",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.hovers_per_min,
            self.relevant_hovers_per_min,
            self.hover_purity,
            self.bookmarks_per_min,
            self.relevant_bookmarks_per_min,
            self.bookmark_purity,
        ]
    }
}

fn rates(total: usize, relevant: usize, minutes: f64) -> (f64, f64, f64, bool) {
    let per_min = total as f64 / minutes;
    if total == 0 {
        return (0.0, 0.0, 0.0, false);
    }
    let purity = relevant as f64 / total as f64;
    // purity * per_min rather than relevant / minutes keeps the identity exact
    (per_min, purity * per_min, purity, true)
}

pub fn throughput_metrics(export: &SessionExport, truth: &Dataset, base: TimeBase) -> Result<ThroughputMetrics> {
    let (first, last) = match (export.records.first(), export.records.last()) {
        (Some(f), Some(l)) => (f.event.at, l.event.at),
        _ => return Err(Error::EmptySession),
    };
    let ms = match base {
        TimeBase::Active => (last - first).max(MIN_ACTIVE_MS),
        TimeBase::Fixed(ms) if ms > 0 => ms,
        TimeBase::Fixed(_) => return Err(Error::Config("fixed duration must be positive".into())),
    };
    let minutes = ms as f64 / MS_PER_MINUTE;
    let hovers = valid_hovers(export.events(), truth)?;
    let relevant_hovers = hovers.iter().filter(|h| h.relevant).count();
    let bookmarks = net_bookmarks(export.events());
    let mut relevant_bookmarks = 0;
    for &id in &bookmarks {
        relevant_bookmarks += truth_of(truth, id)? as usize;
    }
    let (hpm, rhpm, hp, hd) = rates(hovers.len(), relevant_hovers, minutes);
    let (bpm, rbpm, bp, bd) = rates(bookmarks.len(), relevant_bookmarks, minutes);
    Ok(ThroughputMetrics {
        hovers_per_min: hpm,
        relevant_hovers_per_min: rhpm,
        hover_purity: hp,
        bookmarks_per_min: bpm,
        relevant_bookmarks_per_min: rbpm,
        bookmark_purity: bp,
        active_minutes: minutes,
        hover_purity_defined: hd,
        bookmark_purity_defined: bd,
    })
}

/// Fraction of distinct suggested points, over all batches, that are relevant.
pub fn suggestion_purity(export: &SessionExport, truth: &Dataset) -> Result<f64> {
    if export.header.config.policy.kind == PolicyKind::None {
        return Err(Error::NotApplicable("control session has no suggestions".into()));
    }
    let shown: BTreeSet<PointId> = export
        .records
        .iter()
        .flat_map(|r| r.suggestions.iter().copied())
        .collect();
    if shown.is_empty() {
        return Err(Error::NotApplicable("no suggestions were shown".into()));
    }
    let mut relevant = 0usize;
    for &id in &shown {
        relevant += truth_of(truth, id)? as usize;
    }
    Ok(relevant as f64 / shown.len() as f64)
}

/// `(minute, distinct lexicon phrases found in bookmarked texts so far)` for
/// every whole minute from 0 up to the first minute at or after the last
/// event. A phrase stays discovered after its bookmark is removed.
pub fn keyword_discovery_curve(
    export: &SessionExport,
    texts: &Dataset,
    lex: &KeywordLexicon,
) -> Result<Vec<(u64, usize)>> {
    let Some(last) = export.records.last() else {
        return Ok(vec![(0, 0)]);
    };
    let minutes = last.event.at.div_ceil(60_000);
    let mut found: HashSet<String> = HashSet::new();
    let mut adds = export
        .events()
        .filter(|e| e.kind == EventKind::BookmarkAdd)
        .filter_map(|e| e.point_id.map(|id| (e.at, id)))
        .peekable();
    let mut curve = Vec::with_capacity(minutes as usize + 1);
    for m in 0..=minutes {
        while let Some(&(at, id)) = adds.peek() {
            if at > m * 60_000 {
                break;
            }
            let p = texts.get(id).ok_or_else(|| Error::NotFound(format!("point {id}")))?;
            found.extend(lex.matched_phrases(&p.tokens));
            adds.next();
        }
        curve.push((m, found.len()));
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    /// Student-t 95% half-width of the mean.
    pub half_width: f64,
}

impl GroupSummary {
    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatTest {
    /// Positive when group a has the larger mean.
    pub t: f64,
    pub p: f64,
    pub df: f64,
    /// Cohen's d with pooled standard deviation, same sign as `t`.
    pub d: f64,
    pub ci95_a: GroupSummary,
    pub ci95_b: GroupSummary,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn t_dist(df: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom")
}

fn summarize(xs: &[f64], mean: f64, var: f64) -> GroupSummary {
    let n = xs.len();
    let q = t_dist((n - 1) as f64).inverse_cdf(0.975);
    GroupSummary {
        n,
        mean,
        half_width: q * (var / n as f64).sqrt(),
    }
}

/// Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<StatTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Range("each group needs at least two values".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Range("group values must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let diff = ma - mb;
    let (t, p, df, d) = if se2 == 0.0 {
        if diff == 0.0 {
            (0.0, 1.0, na + nb - 2.0, 0.0)
        } else {
            let inf = f64::INFINITY.copysign(diff);
            (inf, 0.0, na + nb - 2.0, inf)
        }
    } else {
        let t = diff / se2.sqrt();
        let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        let p = (2.0 * t_dist(df).sf(t.abs())).clamp(0.0, 1.0);
        let d = if pooled == 0.0 { 0.0 } else { diff / pooled };
        (t, p, df, d)
    };
    Ok(StatTest {
        t,
        p,
        df,
        d,
        ci95_a: summarize(a, ma, va),
        ci95_b: summarize(b, mb, vb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: String,
    pub group: String,
    pub metrics: ThroughputMetrics,
}

pub fn session_metrics(export: &SessionExport, truth: &Dataset, base: TimeBase) -> Result<SessionMetrics> {
    Ok(SessionMetrics {
        session_id: export.header.session_id.clone(),
        group: export.header.group().to_string(),
        metrics: throughput_metrics(export, truth, base)?,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One row per session: id, group, active minutes and the six metrics.
pub fn write_metrics_csv<W: Write>(rows: &[SessionMetrics], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["session_id", "group", "active_minutes"];
    head.extend(ThroughputMetrics::NAMES);
    out.write_record(&head).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.session_id.clone(),
            r.group.clone(),
            r.metrics.active_minutes.to_string(),
        ];
        rec.extend(r.metrics.values().iter().map(f64::to_string));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub test: StatTest,
}

/// Compares every metric between two groups of sessions.
pub fn compare_groups(a: &[SessionMetrics], b: &[SessionMetrics]) -> Result<Vec<ComparisonRow>> {
    ThroughputMetrics::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let xa: Vec<f64> = a.iter().map(|s| s.metrics.values()[i]).collect();
            let xb: Vec<f64> = b.iter().map(|s| s.metrics.values()[i]).collect();
            Ok(ComparisonRow {
                metric: name.to_string(),
                test: welch_t_test(&xa, &xb)?,
            })
        })
        .collect()
}

/// `metric,a_mean,a_lo,a_hi,b_mean,b_lo,b_hi,p,t,d`.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "metric", "a_mean", "a_lo", "a_hi", "b_mean", "b_lo", "b_hi", "p", "t", "d",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let (alo, ahi) = r.test.ci95_a.interval();
        let (blo, bhi) = r.test.ci95_b.interval();
        let vals = [
            r.test.ci95_a.mean,
            alo,
            ahi,
            r.test.ci95_b.mean,
            blo,
            bhi,
            r.test.p,
            r.test.t,
            r.test.d,
        ];
        let mut rec = vec![r.metric.clone()];
        rec.extend(vals.iter().map(|v| format!("{v:.6}")));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

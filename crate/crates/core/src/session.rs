//! The interactive labeling loop.
//!
//! A [`Session`] turns interface events into observations: `bookmark_add`
//! labels a point relevant, `irrelevant_flag` (only allowed on a currently
//! suggested point) labels it irrelevant, and `bookmark_remove` drops the
//! label again. After every label change the fusion weight is refit and the
//! suggestion batch is recomputed from the session policy. No suggestions
//! are shown before the first bookmark.
//!
//! Every accepted event is appended to the log together with a snapshot of
//! `q` and the suggestion ids, which is what [`SessionExport`] serializes.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PointId};
use crate::error::{Error, Result};
use crate::policy::{suggest, PolicySpec};
use crate::relevance::{DistanceCache, LabelSource, Observation, ObservationSet, Posterior, RelevanceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    HoverStart,
    HoverEnd,
    BookmarkAdd,
    BookmarkRemove,
    IrrelevantFlag,
    SessionEnd,
}

impl EventKind {
    pub fn changes_labels(self) -> bool {
        matches!(
            self,
            EventKind::BookmarkAdd | EventKind::BookmarkRemove | EventKind::IrrelevantFlag
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_id: Option<PointId>,
    /// Milliseconds since the session started, supplied by the client.
    pub at: u64,
    /// Client-chosen id; resubmitting an event with a known id is a no-op.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
}

impl InteractionEvent {
    pub fn new(kind: EventKind, point_id: PointId, at: u64) -> Self {
        Self {
            kind,
            point_id: Some(point_id),
            at,
            event_id: None,
        }
    }

    pub fn hover_start(point_id: PointId, at: u64) -> Self {
        Self::new(EventKind::HoverStart, point_id, at)
    }

    pub fn hover_end(point_id: PointId, at: u64) -> Self {
        Self::new(EventKind::HoverEnd, point_id, at)
    }

    pub fn bookmark_add(point_id: PointId, at: u64) -> Self {
        Self::new(EventKind::BookmarkAdd, point_id, at)
    }

    pub fn bookmark_remove(point_id: PointId, at: u64) -> Self {
        Self::new(EventKind::BookmarkRemove, point_id, at)
    }

    pub fn irrelevant_flag(point_id: PointId, at: u64) -> Self {
        Self::new(EventKind::IrrelevantFlag, point_id, at)
    }

    pub fn session_end(at: u64) -> Self {
        Self {
            kind: EventKind::SessionEnd,
            point_id: None,
            at,
            event_id: None,
        }
    }

    pub fn with_event_id(mut self, id: impl Into<String>) -> Self {
        self.event_id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub policy: PolicySpec,
    pub batch_size: usize,
    pub budget_ms: u64,
    /// Refresh suggestions only on `bookmark_add`. Flagged points still
    /// leave the batch, without a refill.
    pub strict_refresh: bool,
    /// Initial model; `q` is refit after every label event.
    pub model: RelevanceModel,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            policy: PolicySpec::one_step(),
            batch_size: 10,
            budget_ms: 600_000,
            strict_refresh: false,
            model: RelevanceModel::default(),
        }
    }
}

/// Session metadata written as the first line of an export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub dataset_id: String,
    pub config: SessionConfig,
}

impl SessionHeader {
    /// `control` for sessions without suggestions, `active_search` otherwise.
    pub fn group(&self) -> &'static str {
        if self.config.policy.suggests() {
            "active_search"
        } else {
            "control"
        }
    }
}

/// One accepted event with the model state right after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub index: usize,
    pub event: InteractionEvent,
    pub q: f64,
    pub suggestions: Vec<PointId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub header: SessionHeader,
    pub records: Vec<ExportRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ExportLine {
    Header(SessionHeader),
    Event(ExportRecord),
}

impl SessionExport {
    pub fn events(&self) -> impl Iterator<Item = &InteractionEvent> {
        self.records.iter().map(|r| &r.event)
    }

    /// Header line followed by one line per event.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &ExportLine::Header(self.header.clone())).map_err(json_io)?;
        w.write_all(b"\n")?;
        Self::write_event_lines(&self.records, w)
    }

    /// Event lines only, for appending to an export written earlier.
    pub fn write_event_lines<W: Write>(records: &[ExportRecord], mut w: W) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut w, &ExportLine::Event(r.clone())).map_err(json_io)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ExportLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ExportLine::Header(h) if header.is_none() => header = Some(h),
                ExportLine::Header(_) => {
                    return Err(Error::Parse {
                        line: i as u64 + 1,
                        message: "second header".into(),
                    })
                }
                ExportLine::Event(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing session header".into(),
        })?;
        Ok(Self { header, records })
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

fn json_io(e: serde_json::Error) -> Error {
    Error::Io(e.into())
}

/// Outcome of [`Session::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Applied {
    /// The event id was seen before; nothing changed.
    pub duplicate: bool,
    pub labels_changed: bool,
}

#[derive(Debug, Clone)]
pub struct Session {
    header: SessionHeader,
    ds: Arc<Dataset>,
    posterior: Posterior,
    observations: ObservationSet,
    suggestions: Vec<(PointId, f64)>,
    started: bool,
    ended: bool,
    log: Vec<InteractionEvent>,
    snapshots: Vec<ExportRecord>,
    open_hovers: HashMap<PointId, Vec<u64>>,
    event_ids: HashSet<String>,
    refreshes: u64,
}

impl Session {
    pub fn create(
        session_id: impl Into<String>,
        dataset_id: impl Into<String>,
        ds: Arc<Dataset>,
        config: SessionConfig,
    ) -> Result<Self> {
        let cache = (ds.len() <= DistanceCache::AUTO_LIMIT).then(|| Arc::new(DistanceCache::build(&ds)));
        Self::create_with_cache(session_id, dataset_id, ds, config, cache)
    }

    /// Like [`create`](Self::create) but reuses a distance cache shared
    /// between sessions on the same dataset.
    pub fn create_with_cache(
        session_id: impl Into<String>,
        dataset_id: impl Into<String>,
        ds: Arc<Dataset>,
        config: SessionConfig,
        cache: Option<Arc<DistanceCache>>,
    ) -> Result<Self> {
        config.policy.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let posterior = Posterior::build(ds.clone(), config.model, &ObservationSet::new(), cache)?;
        Ok(Self {
            header: SessionHeader {
                session_id: session_id.into(),
                dataset_id: dataset_id.into(),
                config,
            },
            ds,
            posterior,
            observations: ObservationSet::new(),
            suggestions: Vec::new(),
            started: false,
            ended: false,
            log: Vec::new(),
            snapshots: Vec::new(),
            open_hovers: HashMap::new(),
            event_ids: HashSet::new(),
            refreshes: 0,
        })
    }

    /// Rebuilds a session by applying `events` in order.
    pub fn replay<'a>(
        header: &SessionHeader,
        ds: Arc<Dataset>,
        cache: Option<Arc<DistanceCache>>,
        events: impl IntoIterator<Item = &'a InteractionEvent>,
    ) -> Result<Self> {
        let mut s = Self::create_with_cache(
            header.session_id.clone(),
            header.dataset_id.clone(),
            ds,
            header.config,
            cache,
        )?;
        for (i, e) in events.into_iter().enumerate() {
            s.apply(e.clone()).map_err(|err| match err {
                Error::Protocol { message, .. } => Error::Protocol {
                    index: Some(i),
                    message,
                },
                other => other,
            })?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.header.session_id
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn config(&self) -> &SessionConfig {
        &self.header.config
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.ds
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    pub fn q(&self) -> f64 {
        self.posterior.q()
    }

    /// The current batch with scores from its last refresh, descending.
    pub fn current_suggestions(&self) -> &[(PointId, f64)] {
        &self.suggestions
    }

    /// `u(D)`: bookmarks net of removals.
    pub fn utility(&self) -> usize {
        self.observations.utility()
    }

    pub fn log(&self) -> &[InteractionEvent] {
        &self.log
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    /// Whether label events at time `at` would be past the budget.
    pub fn is_expired_at(&self, at: u64) -> bool {
        at > self.header.config.budget_ms
    }

    pub fn last_at(&self) -> Option<u64> {
        self.log.last().map(|e| e.at)
    }

    pub fn has_event_id(&self, id: &str) -> bool {
        self.event_ids.contains(id)
    }

    /// One record per accepted event, as in [`export`](Self::export).
    pub fn records(&self) -> &[ExportRecord] {
        &self.snapshots
    }

    pub fn export(&self) -> SessionExport {
        SessionExport {
            header: self.header.clone(),
            records: self.snapshots.clone(),
        }
    }

    fn suggested(&self, id: PointId) -> bool {
        self.suggestions.iter().any(|&(s, _)| s == id)
    }

    fn point_index(&self, e: &InteractionEvent) -> Result<(PointId, usize)> {
        let id = e
            .point_id
            .ok_or_else(|| Error::protocol(format!("{:?} event without a point id", e.kind)))?;
        let idx = self
            .ds
            .index_of(id)
            .ok_or_else(|| Error::NotFound(format!("point {id}")))?;
        Ok((id, idx))
    }

    /// Validates and applies one event. Rejected events leave the session
    /// unchanged.
    pub fn apply(&mut self, e: InteractionEvent) -> Result<Applied> {
        if let Some(id) = &e.event_id {
            if self.event_ids.contains(id) {
                return Ok(Applied {
                    duplicate: true,
                    labels_changed: false,
                });
            }
        }
        if let Some(last) = self.last_at() {
            if e.at < last {
                return Err(Error::protocol(format!(
                    "timestamp {} precedes previous event at {last}",
                    e.at
                )));
            }
        }
        if self.ended {
            return Err(Error::protocol("session has ended"));
        }
        if e.kind.changes_labels() && self.is_expired_at(e.at) {
            return Err(Error::Expired);
        }

        let mut labels_changed = false;
        match e.kind {
            EventKind::HoverStart => {
                let (id, _) = self.point_index(&e)?;
                self.open_hovers.entry(id).or_default().push(e.at);
            }
            EventKind::HoverEnd => {
                let (id, _) = self.point_index(&e)?;
                let open = self.open_hovers.get_mut(&id).and_then(Vec::pop);
                if open.is_none() {
                    return Err(Error::protocol(format!("hover_end on {id} without an open hover")));
                }
            }
            EventKind::BookmarkAdd => {
                let (id, idx) = self.point_index(&e)?;
                self.observations.upsert(Observation {
                    point_id: id,
                    label: true,
                    source: LabelSource::Bookmark,
                    at: e.at,
                });
                self.posterior.observe_index(idx, true);
                self.started = true;
                labels_changed = true;
            }
            EventKind::IrrelevantFlag => {
                let (id, idx) = self.point_index(&e)?;
                if !self.suggested(id) {
                    return Err(Error::protocol(format!(
                        "irrelevant_flag on {id}, which is not a current suggestion"
                    )));
                }
                self.observations.upsert(Observation {
                    point_id: id,
                    label: false,
                    source: LabelSource::IrrelevantFlag,
                    at: e.at,
                });
                self.posterior.observe_index(idx, false);
                labels_changed = true;
            }
            EventKind::BookmarkRemove => {
                let (id, idx) = self.point_index(&e)?;
                match self.observations.get(id) {
                    Some(o) if o.source == LabelSource::Bookmark => {}
                    _ => return Err(Error::protocol(format!("point {id} is not bookmarked"))),
                }
                self.observations.remove(id);
                self.posterior.forget_index(idx);
                labels_changed = true;
            }
            EventKind::SessionEnd => self.ended = true,
        }

        if labels_changed {
            self.posterior.refit();
            let refresh = !self.header.config.strict_refresh || e.kind == EventKind::BookmarkAdd;
            if refresh {
                self.refresh_suggestions();
            } else {
                let obs = &self.observations;
                self.suggestions.retain(|(id, _)| !obs.contains(*id));
            }
        }

        if let Some(id) = &e.event_id {
            self.event_ids.insert(id.clone());
        }
        self.snapshots.push(ExportRecord {
            index: self.log.len(),
            event: e.clone(),
            q: self.posterior.q(),
            suggestions: self.suggestions.iter().map(|s| s.0).collect(),
        });
        self.log.push(e);
        Ok(Applied {
            duplicate: false,
            labels_changed,
        })
    }

    fn refresh_suggestions(&mut self) {
        let cfg = &self.header.config;
        if !self.started || !cfg.policy.suggests() {
            self.suggestions.clear();
            return;
        }
        self.suggestions = suggest(&self.posterior, &cfg.policy, cfg.batch_size, self.refreshes);
        self.refreshes += 1;
    }
}

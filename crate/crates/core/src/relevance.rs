//! Posterior relevance `Pr(y = 1 | x, D)` from per-attribute smoothed k-NN
//! models fused by a maximum-likelihood weight.
//!
//! Each attribute model looks at the `min(k, |D|)` labeled points nearest to
//! the query (ties by ascending id) and returns
//! `(gamma * prior + positives) / (gamma + neighbors)`. The text model uses
//! cosine distance between unit embeddings, the location model Euclidean
//! distance between map coordinates. The fused estimate is
//! `q * P_text + (1 - q) * P_location`.
//!
//! Two evaluation paths exist. The free functions ([`knn_probability`],
//! [`fused_probability`], [`fit_fusion_weight`]) evaluate directly from the
//! observation set. [`Posterior`] keeps, for every point, its current k
//! nearest labeled neighbors per attribute so that a new label costs `O(n)`
//! and hypothetical labels can be scored without rebuilding anything.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PointId};
use crate::error::{Error, Result};

/// Grid resolution for the fusion weight: `q` in `{0, 0.01, ..., 1}`.
pub const FUSION_GRID_STEPS: usize = 100;
/// Probabilities are clamped to `[eps, 1 - eps]` inside the log-likelihood.
pub const LIKELIHOOD_CLAMP: f64 = 1e-6;
pub const DEFAULT_FUSION_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Text,
    Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl Attribute {
    pub fn metric(self) -> Metric {
        match self {
            Attribute::Text => Metric::Cosine,
            Attribute::Location => Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Bookmark,
    IrrelevantFlag,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub point_id: PointId,
    pub label: bool,
    pub source: LabelSource,
    /// Milliseconds since the start of the session or simulation.
    pub at: u64,
}

impl Observation {
    pub fn oracle(point_id: PointId, label: bool) -> Self {
        Self {
            point_id,
            label,
            source: LabelSource::Oracle,
            at: 0,
        }
    }
}

/// The labeled set `D`, at most one observation per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    entries: Vec<Observation>,
    index: HashMap<PointId, usize>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the observation for `obs.point_id`, returning the
    /// previous one.
    pub fn upsert(&mut self, obs: Observation) -> Option<Observation> {
        match self.index.get(&obs.point_id) {
            Some(&i) => Some(std::mem::replace(&mut self.entries[i], obs)),
            None => {
                self.index.insert(obs.point_id, self.entries.len());
                self.entries.push(obs);
                None
            }
        }
    }

    pub fn remove(&mut self, id: PointId) -> Option<Observation> {
        let i = self.index.remove(&id)?;
        let obs = self.entries.remove(i);
        for e in &self.entries[i..] {
            *self.index.get_mut(&e.point_id).expect("indexed") -= 1;
        }
        Some(obs)
    }

    pub fn get(&self, id: PointId) -> Option<&Observation> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.entries.iter()
    }

    /// `u(D)`: the number of positive labels.
    pub fn utility(&self) -> usize {
        self.entries.iter().filter(|o| o.label).count()
    }
}

impl FromIterator<Observation> for ObservationSet {
    fn from_iter<T: IntoIterator<Item = Observation>>(iter: T) -> Self {
        let mut set = Self::new();
        for o in iter {
            set.upsert(o);
        }
        set
    }
}

impl<'a> IntoIterator for &'a ObservationSet {
    type Item = &'a Observation;
    type IntoIter = std::slice::Iter<'a, Observation>;

    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}

/// A smoothed k-NN classifier over one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeModel {
    pub attribute: Attribute,
    pub k: usize,
    /// Pseudocount weight on the prior.
    pub gamma: f64,
    /// Prior relevance probability.
    pub prior: f64,
}

impl AttributeModel {
    pub const DEFAULT_K: usize = 50;
    pub const DEFAULT_GAMMA: f64 = 1.0;
    pub const DEFAULT_PRIOR: f64 = 0.05;

    pub fn new(attribute: Attribute, k: usize, gamma: f64, prior: f64) -> Result<Self> {
        let m = Self {
            attribute,
            k,
            gamma,
            prior,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn text() -> Self {
        Self {
            attribute: Attribute::Text,
            k: Self::DEFAULT_K,
            gamma: Self::DEFAULT_GAMMA,
            prior: Self::DEFAULT_PRIOR,
        }
    }

    pub fn location() -> Self {
        Self {
            attribute: Attribute::Location,
            ..Self::text()
        }
    }

    pub fn metric(&self) -> Metric {
        self.attribute.metric()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.prior) {
            return Err(Error::Config(format!("prior must lie in [0, 1], got {}", self.prior)));
        }
        Ok(())
    }

    #[inline]
    fn smoothed(&self, positives: usize, neighbors: usize) -> f64 {
        (self.gamma * self.prior + positives as f64) / (self.gamma + neighbors as f64)
    }
}

/// The text and location models plus the fusion weight `q` on the text model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceModel {
    pub text: AttributeModel,
    pub location: AttributeModel,
    pub q: f64,
}

impl Default for RelevanceModel {
    fn default() -> Self {
        Self {
            text: AttributeModel::text(),
            location: AttributeModel::location(),
            q: DEFAULT_FUSION_WEIGHT,
        }
    }
}

impl RelevanceModel {
    /// Both attribute models with the same `k`, `gamma` and `prior`.
    pub fn uniform(k: usize, gamma: f64, prior: f64) -> Result<Self> {
        Ok(Self {
            text: AttributeModel::new(Attribute::Text, k, gamma, prior)?,
            location: AttributeModel::new(Attribute::Location, k, gamma, prior)?,
            q: DEFAULT_FUSION_WEIGHT,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.attribute != Attribute::Text || self.location.attribute != Attribute::Location {
            return Err(Error::Config("attribute models are swapped".into()));
        }
        self.text.validate()?;
        self.location.validate()?;
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::Config(format!(
                "fusion weight must lie in [0, 1], got {}",
                self.q
            )));
        }
        Ok(())
    }

    pub fn model(&self, attribute: Attribute) -> &AttributeModel {
        match attribute {
            Attribute::Text => &self.text,
            Attribute::Location => &self.location,
        }
    }

    /// The fused estimate with no evidence.
    pub fn prior(&self) -> f64 {
        fuse(self.q, self.text.prior, self.location.prior)
    }
}

/// `q * text + (1 - q) * location`, exact at the endpoints and when the two
/// inputs agree, and never outside `[min, max]` of the inputs.
#[inline]
pub fn fuse(q: f64, text: f64, location: f64) -> f64 {
    if text == location {
        return text;
    }
    let v = q * text + (1.0 - q) * location;
    v.clamp(text.min(location), text.max(location))
}

/// An attribute or fused probability. `fallback` is set when the text model
/// had no usable embedding for the query and returned its prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub probability: f64,
    pub fallback: bool,
}

/// Pairwise distance under `metric`. Points without a usable embedding are
/// treated as the zero vector, so their cosine distance to anything is 1.
#[inline]
pub fn point_distance(ds: &Dataset, metric: Metric, i: usize, j: usize) -> f64 {
    let (a, b) = (ds.point(i), ds.point(j));
    match metric {
        Metric::Euclidean => {
            let dx = a.location[0] - b.location[0];
            let dy = a.location[1] - b.location[1];
            (dx * dx + dy * dy).sqrt()
        }
        Metric::Cosine => match (&a.embedding, &b.embedding) {
            (Some(ea), Some(eb)) => {
                let dot: f64 = ea.values.iter().zip(&eb.values).map(|(x, y)| x * y).sum();
                1.0 - dot
            }
            _ => 1.0,
        },
    }
}

/// Dense pairwise distance matrices for both attributes.
///
/// Memory is `2 * n^2` floats, so this is meant for the few-thousand-point
/// samples that sessions and simulations run on.
#[derive(Debug)]
pub struct DistanceCache {
    n: usize,
    text: Vec<f64>,
    location: Vec<f64>,
}

impl DistanceCache {
    /// Largest dataset for which [`Posterior`] builds a cache automatically.
    pub const AUTO_LIMIT: usize = 6000;

    pub fn build(ds: &Dataset) -> Self {
        let n = ds.len();
        let fill = |metric| {
            let mut m = vec![0.0; n * n];
            m.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
                for (j, d) in row.iter_mut().enumerate() {
                    *d = point_distance(ds, metric, i, j);
                }
            });
            m
        };
        Self {
            n,
            text: fill(Metric::Cosine),
            location: fill(Metric::Euclidean),
        }
    }

    #[inline]
    fn row(&self, attribute: Attribute, i: usize) -> &[f64] {
        let m = match attribute {
            Attribute::Text => &self.text,
            Attribute::Location => &self.location,
        };
        &m[i * self.n..(i + 1) * self.n]
    }
}

/// Distance lookup that uses a cache when one is available.
#[derive(Clone, Copy)]
pub(crate) struct Distances<'a> {
    ds: &'a Dataset,
    cache: Option<&'a DistanceCache>,
}

impl<'a> Distances<'a> {
    pub(crate) fn new(ds: &'a Dataset, cache: Option<&'a DistanceCache>) -> Self {
        Self { ds, cache }
    }

    #[inline]
    pub(crate) fn get(&self, attribute: Attribute, i: usize, j: usize) -> f64 {
        match self.cache {
            Some(c) => c.row(attribute, i)[j],
            None => point_distance(self.ds, attribute.metric(), i, j),
        }
    }

    /// Distances from `i` to every point.
    pub(crate) fn row(&self, attribute: Attribute, i: usize) -> std::borrow::Cow<'a, [f64]> {
        match self.cache {
            Some(c) => std::borrow::Cow::Borrowed(c.row(attribute, i)),
            None => std::borrow::Cow::Owned(
                (0..self.ds.len())
                    .map(|j| point_distance(self.ds, attribute.metric(), i, j))
                    .collect(),
            ),
        }
    }
}

#[inline]
fn neighbor_order(a: (f64, PointId), b: (f64, PointId)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Direct k-NN estimate for the point at `x` given labeled `(index, label)`
/// pairs. `exclude` drops one labeled point (leave-one-out).
pub(crate) fn estimate_at(
    model: &AttributeModel,
    ds: &Dataset,
    dist: Distances<'_>,
    x: usize,
    labeled: &[(usize, bool)],
    exclude: Option<usize>,
) -> Estimate {
    if model.attribute == Attribute::Text && ds.point(x).is_degenerate() {
        return Estimate {
            probability: model.prior,
            fallback: true,
        };
    }
    let mut cands: Vec<(f64, PointId, bool)> = labeled
        .iter()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|&(i, y)| (dist.get(model.attribute, x, i), ds.point(i).id, y))
        .collect();
    let take = model.k.min(cands.len());
    if take < cands.len() {
        cands.select_nth_unstable_by(take, |a, b| neighbor_order((a.0, a.1), (b.0, b.1)));
    }
    let positives = cands[..take].iter().filter(|c| c.2).count();
    Estimate {
        probability: model.smoothed(positives, take),
        fallback: false,
    }
}

fn labeled_indices(ds: &Dataset, obs: &ObservationSet) -> Result<Vec<(usize, bool)>> {
    obs.iter()
        .map(|o| {
            ds.index_of(o.point_id)
                .map(|i| (i, o.label))
                .ok_or_else(|| Error::NotFound(format!("point {}", o.point_id)))
        })
        .collect()
}

fn unlabeled_index(ds: &Dataset, obs: &ObservationSet, x: PointId) -> Result<usize> {
    let i = ds.index_of(x).ok_or_else(|| Error::NotFound(format!("point {x}")))?;
    if obs.contains(x) {
        return Err(Error::Validation(format!("point {x} is already labeled")));
    }
    Ok(i)
}

/// `Pr(y = 1 | x, D)` under a single attribute model. Returns the prior
/// exactly when `D` is empty.
pub fn knn_probability(model: &AttributeModel, ds: &Dataset, obs: &ObservationSet, x: PointId) -> Result<Estimate> {
    let i = unlabeled_index(ds, obs, x)?;
    let labeled = labeled_indices(ds, obs)?;
    Ok(estimate_at(model, ds, Distances::new(ds, None), i, &labeled, None))
}

/// The fused estimate `q * P_text + (1 - q) * P_location`.
pub fn fused_probability(rm: &RelevanceModel, ds: &Dataset, obs: &ObservationSet, x: PointId) -> Result<Estimate> {
    let i = unlabeled_index(ds, obs, x)?;
    let labeled = labeled_indices(ds, obs)?;
    let dist = Distances::new(ds, None);
    let t = estimate_at(&rm.text, ds, dist, i, &labeled, None);
    let l = estimate_at(&rm.location, ds, dist, i, &labeled, None);
    Ok(Estimate {
        probability: fuse(rm.q, t.probability, l.probability),
        fallback: t.fallback,
    })
}

/// Leave-one-out predictions of both attribute models for one labeled point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LooPrediction {
    pub text: f64,
    pub location: f64,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionFit {
    pub q: f64,
    /// Leave-one-out log-likelihood at `q`; zero when uninformed.
    pub log_likelihood: f64,
    /// Set when `D` was empty and `q` is the default.
    pub uninformed: bool,
}

/// Leave-one-out log-likelihood of the fused model at weight `q`.
pub fn loo_log_likelihood(preds: &[LooPrediction], q: f64) -> f64 {
    preds
        .iter()
        .map(|p| {
            let f = fuse(q, p.text, p.location).clamp(LIKELIHOOD_CLAMP, 1.0 - LIKELIHOOD_CLAMP);
            if p.label {
                f.ln()
            } else {
                (1.0 - f).ln()
            }
        })
        .sum()
}

/// The `q` on the grid maximizing [`loo_log_likelihood`]; ties go to the
/// smallest `q`.
pub fn fit_fusion_weight_from_predictions(preds: &[LooPrediction]) -> FusionFit {
    if preds.is_empty() {
        return FusionFit {
            q: DEFAULT_FUSION_WEIGHT,
            log_likelihood: 0.0,
            uninformed: true,
        };
    }
    let mut best = FusionFit {
        q: 0.0,
        log_likelihood: f64::NEG_INFINITY,
        uninformed: false,
    };
    for step in 0..=FUSION_GRID_STEPS {
        let q = step as f64 / FUSION_GRID_STEPS as f64;
        let ll = loo_log_likelihood(preds, q);
        if ll > best.log_likelihood {
            best.q = q;
            best.log_likelihood = ll;
        }
    }
    best
}

pub(crate) fn loo_predictions(
    rm: &RelevanceModel,
    ds: &Dataset,
    dist: Distances<'_>,
    labeled: &[(usize, bool)],
) -> Vec<LooPrediction> {
    labeled
        .iter()
        .map(|&(i, y)| LooPrediction {
            text: estimate_at(&rm.text, ds, dist, i, labeled, Some(i)).probability,
            location: estimate_at(&rm.location, ds, dist, i, labeled, Some(i)).probability,
            label: y,
        })
        .collect()
}

/// Maximum-likelihood fusion weight from leave-one-out predictions over `D`.
pub fn fit_fusion_weight(rm: &RelevanceModel, ds: &Dataset, obs: &ObservationSet) -> Result<FusionFit> {
    let labeled = labeled_indices(ds, obs)?;
    let preds = loo_predictions(rm, ds, Distances::new(ds, None), &labeled);
    Ok(fit_fusion_weight_from_predictions(&preds))
}

/// Every unlabeled point with its fused probability, descending, ties by
/// ascending id.
pub fn rank_unlabeled(rm: &RelevanceModel, ds: &Arc<Dataset>, obs: &ObservationSet) -> Result<Vec<(PointId, f64)>> {
    Ok(Posterior::build(ds.clone(), *rm, obs, None)?.ranking())
}

/// Sorts `(id, score)` pairs by score descending, then id ascending.
pub fn sort_scored(scored: &mut [(PointId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, Copy)]
struct Neighbor {
    dist: f64,
    id: PointId,
    label: bool,
}

impl Neighbor {
    #[inline]
    fn key(&self) -> (f64, PointId) {
        (self.dist, self.id)
    }
}

/// For every point, its `k` nearest labeled points under one attribute,
/// sorted by `(distance, id)`.
#[derive(Debug, Clone)]
struct NeighborTable {
    model: AttributeModel,
    lists: Vec<Vec<Neighbor>>,
    positives: Vec<usize>,
    /// The `k`-th neighbor of each full list, kept flat for the look-ahead
    /// scans.
    last: Vec<Option<Neighbor>>,
}

impl NeighborTable {
    fn new(model: AttributeModel, n: usize) -> Self {
        Self {
            model,
            lists: vec![Vec::new(); n],
            positives: vec![0; n],
            last: vec![None; n],
        }
    }

    fn insert(&mut self, z: usize, nb: Neighbor) {
        let k = self.model.k;
        let list = &mut self.lists[z];
        if let Some(last) = self.last[z] {
            if neighbor_order(nb.key(), last.key()) != Ordering::Less {
                return;
            }
            list.pop();
            if last.label {
                self.positives[z] -= 1;
            }
        }
        let pos = list.partition_point(|e| neighbor_order(e.key(), nb.key()) == Ordering::Less);
        list.insert(pos, nb);
        if nb.label {
            self.positives[z] += 1;
        }
        if list.len() == k {
            self.last[z] = Some(list[k - 1]);
        }
    }

    #[inline]
    fn probability(&self, z: usize) -> f64 {
        self.model.smoothed(self.positives[z], self.lists[z].len())
    }

    /// Whether a newly labeled point with key `(dist, id)` would enter the
    /// neighbor list of `z`.
    #[inline]
    fn admits(&self, z: usize, dist: f64, id: PointId) -> bool {
        match self.last[z] {
            Some(last) => neighbor_order((dist, id), last.key()) == Ordering::Less,
            None => true,
        }
    }

    /// The largest probability `z` can reach after one more positive label.
    #[inline]
    fn optimistic(&self, z: usize) -> f64 {
        let pos = self.positives[z];
        match self.last[z] {
            None => self.model.smoothed(pos + 1, self.lists[z].len() + 1),
            Some(last) => self.model.smoothed(pos - usize::from(last.label) + 1, self.model.k),
        }
    }

    /// Probability at `z` if a point with key `(dist, id)` were labeled
    /// positive and negative respectively.
    #[inline]
    fn conditioned(&self, z: usize, dist: f64, id: PointId) -> (f64, f64) {
        let pos = self.positives[z];
        let m = &self.model;
        match self.last[z] {
            None => {
                let n = self.lists[z].len() + 1;
                (m.smoothed(pos + 1, n), m.smoothed(pos, n))
            }
            Some(last) if neighbor_order((dist, id), last.key()) != Ordering::Less => {
                let p = m.smoothed(pos, m.k);
                (p, p)
            }
            Some(last) => {
                let base = pos - usize::from(last.label);
                (m.smoothed(base + 1, m.k), m.smoothed(base, m.k))
            }
        }
    }
}

/// The relevance model materialized over a dataset for one observation set,
/// updated incrementally as labels arrive.
#[derive(Debug, Clone)]
pub struct Posterior {
    ds: Arc<Dataset>,
    cache: Option<Arc<DistanceCache>>,
    model: RelevanceModel,
    labels: Vec<Option<bool>>,
    labeled: Vec<usize>,
    degenerate: Vec<bool>,
    text: NeighborTable,
    location: NeighborTable,
    fit: Option<FusionFit>,
}

impl Posterior {
    /// Builds the posterior for `obs`. A distance cache is built when the
    /// dataset has at most [`DistanceCache::AUTO_LIMIT`] points and none is
    /// supplied.
    pub fn new(ds: Arc<Dataset>, model: RelevanceModel, obs: &ObservationSet) -> Result<Self> {
        let cache = (ds.len() <= DistanceCache::AUTO_LIMIT).then(|| Arc::new(DistanceCache::build(&ds)));
        Self::build(ds, model, obs, cache)
    }

    /// Builds the posterior with an explicit (possibly absent) cache.
    pub fn build(
        ds: Arc<Dataset>,
        model: RelevanceModel,
        obs: &ObservationSet,
        cache: Option<Arc<DistanceCache>>,
    ) -> Result<Self> {
        model.validate()?;
        if !ds.is_embedded() {
            return Err(Error::Config("dataset has no text embeddings".into()));
        }
        if let Some(c) = &cache {
            if c.n != ds.len() {
                return Err(Error::Config("distance cache does not match dataset".into()));
            }
        }
        let n = ds.len();
        let degenerate = ds.points().iter().map(|p| p.is_degenerate()).collect();
        let mut post = Self {
            text: NeighborTable::new(model.text, n),
            location: NeighborTable::new(model.location, n),
            ds,
            cache,
            model,
            labels: vec![None; n],
            labeled: Vec::new(),
            degenerate,
            fit: None,
        };
        for o in obs {
            let i = post
                .ds
                .index_of(o.point_id)
                .ok_or_else(|| Error::NotFound(format!("point {}", o.point_id)))?;
            post.observe_index(i, o.label);
        }
        Ok(post)
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.ds
    }

    pub fn distance_cache(&self) -> Option<&Arc<DistanceCache>> {
        self.cache.as_ref()
    }

    pub fn model(&self) -> &RelevanceModel {
        &self.model
    }

    pub fn q(&self) -> f64 {
        self.model.q
    }

    pub fn set_q(&mut self, q: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Config(format!("fusion weight must lie in [0, 1], got {q}")));
        }
        self.model.q = q;
        Ok(())
    }

    /// The most recent fit from [`refit`](Self::refit), if any.
    pub fn last_fit(&self) -> Option<FusionFit> {
        self.fit
    }

    pub(crate) fn distances(&self) -> Distances<'_> {
        Distances::new(&self.ds, self.cache.as_deref())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> Option<bool> {
        self.labels[idx]
    }

    pub fn is_labeled(&self, idx: usize) -> bool {
        self.labels[idx].is_some()
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.len()
    }

    pub fn utility(&self) -> usize {
        self.labeled.iter().filter(|&&i| self.labels[i] == Some(true)).count()
    }

    /// Indices of unlabeled points in dataset order.
    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    pub fn id(&self, idx: usize) -> PointId {
        self.ds.point(idx).id
    }

    /// Labels point `idx`. Relabeling with a different label rebuilds the
    /// neighbor tables.
    pub fn observe_index(&mut self, idx: usize, label: bool) {
        match self.labels[idx] {
            Some(l) if l == label => {}
            Some(_) => {
                self.labels[idx] = Some(label);
                self.rebuild();
            }
            None => {
                self.labels[idx] = Some(label);
                self.labeled.push(idx);
                self.insert_labeled(idx, label);
            }
        }
    }

    pub fn observe(&mut self, id: PointId, label: bool) -> Result<()> {
        let i = self
            .ds
            .index_of(id)
            .ok_or_else(|| Error::NotFound(format!("point {id}")))?;
        self.observe_index(i, label);
        Ok(())
    }

    /// Removes the label of point `idx`, if any.
    pub fn forget_index(&mut self, idx: usize) {
        if self.labels[idx].take().is_some() {
            self.labeled.retain(|&i| i != idx);
            self.rebuild();
        }
    }

    fn insert_labeled(&mut self, idx: usize, label: bool) {
        let id = self.ds.point(idx).id;
        let dist = Distances::new(&self.ds, self.cache.as_deref());
        let text_row = dist.row(Attribute::Text, idx);
        let loc_row = dist.row(Attribute::Location, idx);
        for z in 0..self.labels.len() {
            self.text.insert(
                z,
                Neighbor {
                    dist: text_row[z],
                    id,
                    label,
                },
            );
            self.location.insert(
                z,
                Neighbor {
                    dist: loc_row[z],
                    id,
                    label,
                },
            );
        }
    }

    fn rebuild(&mut self) {
        let n = self.labels.len();
        self.text = NeighborTable::new(self.model.text, n);
        self.location = NeighborTable::new(self.model.location, n);
        for i in self.labeled.clone() {
            let label = self.labels[i].expect("labeled");
            self.insert_labeled(i, label);
        }
    }

    pub(crate) fn labeled_pairs(&self) -> Vec<(usize, bool)> {
        self.labeled
            .iter()
            .map(|&i| (i, self.labels[i].expect("labeled")))
            .collect()
    }

    /// Attribute-level probability at point `idx` with its own label, if
    /// any, treated as just another labeled neighbor.
    pub fn attribute_probability(&self, attribute: Attribute, idx: usize) -> f64 {
        match attribute {
            Attribute::Text if self.degenerate[idx] => self.model.text.prior,
            Attribute::Text => self.text.probability(idx),
            Attribute::Location => self.location.probability(idx),
        }
    }

    /// Fused probability at point `idx`.
    #[inline]
    pub fn probability(&self, idx: usize) -> f64 {
        fuse(
            self.model.q,
            self.attribute_probability(Attribute::Text, idx),
            self.attribute_probability(Attribute::Location, idx),
        )
    }

    /// Fused probability at `z` had point `x` been labeled positive and
    /// negative respectively. `text_dist` and `loc_dist` are the distances
    /// from `z` to `x`.
    #[inline]
    pub(crate) fn conditioned(&self, z: usize, x_id: PointId, text_dist: f64, loc_dist: f64) -> (f64, f64) {
        let (t1, t0) = if self.degenerate[z] {
            (self.model.text.prior, self.model.text.prior)
        } else {
            self.text.conditioned(z, text_dist, x_id)
        };
        let (l1, l0) = self.location.conditioned(z, loc_dist, x_id);
        (fuse(self.model.q, t1, l1), fuse(self.model.q, t0, l0))
    }

    /// Upper bound on the positive branch of [`Self::conditioned`] at `z`
    /// over every possible `x`. The negative branch never exceeds
    /// [`Self::probability`].
    #[inline]
    pub(crate) fn optimistic(&self, z: usize) -> f64 {
        let t = if self.degenerate[z] {
            self.model.text.prior
        } else {
            self.text.optimistic(z)
        };
        fuse(self.model.q, t, self.location.optimistic(z))
    }

    /// Whether labeling `x` could change the fused probability at `z`. When
    /// false, [`Self::conditioned`] returns the current probability for both
    /// labels.
    #[inline]
    pub(crate) fn affected_by(&self, z: usize, x_id: PointId, text_dist: f64, loc_dist: f64) -> bool {
        (!self.degenerate[z] && self.text.admits(z, text_dist, x_id)) || self.location.admits(z, loc_dist, x_id)
    }

    /// Refits `q` by grid search over leave-one-out likelihood and stores it.
    pub fn refit(&mut self) -> FusionFit {
        let preds = self.loo_predictions();
        let fit = fit_fusion_weight_from_predictions(&preds);
        self.model.q = fit.q;
        self.fit = Some(fit);
        fit
    }

    pub fn loo_predictions(&self) -> Vec<LooPrediction> {
        loo_predictions(&self.model, &self.ds, self.distances(), &self.labeled_pairs())
    }

    /// All unlabeled points with fused probabilities, descending, ties by
    /// ascending id.
    pub fn ranking(&self) -> Vec<(PointId, f64)> {
        let mut scored: Vec<_> = (0..self.len())
            .filter(|&i| self.labels[i].is_none())
            .map(|i| (self.id(i), self.probability(i)))
            .collect();
        sort_scored(&mut scored);
        scored
    }
}

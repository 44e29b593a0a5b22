//! Query policies: which unlabeled point(s) to surface next.
//!
//! All selections break ties by ascending point id.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PointId};
use crate::error::{Error, Result};
use crate::relevance::{
    estimate_at, fuse, sort_scored, Attribute, Distances, ObservationSet, Posterior, RelevanceModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// No suggestions at all (the control condition).
    None,
    Random,
    OneStep,
    EllStep,
    Ens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Look-ahead horizon for `EllStep` (1 or 2).
    pub ell: usize,
    /// Assumed remaining queries for `Ens`.
    pub budget: usize,
    /// Seed for `Random`.
    pub seed: u64,
    /// `Ens` scores only this many top-probability candidates.
    pub candidate_cap: usize,
}

impl PolicySpec {
    pub const DEFAULT_CANDIDATE_CAP: usize = 500;
    pub const MAX_ELL: usize = 2;

    fn of(kind: PolicyKind) -> Self {
        Self {
            kind,
            ell: 1,
            budget: 1,
            seed: 0,
            candidate_cap: Self::DEFAULT_CANDIDATE_CAP,
        }
    }

    pub fn none() -> Self {
        Self::of(PolicyKind::None)
    }

    pub fn random(seed: u64) -> Self {
        Self {
            seed,
            ..Self::of(PolicyKind::Random)
        }
    }

    pub fn one_step() -> Self {
        Self::of(PolicyKind::OneStep)
    }

    pub fn ell_step(ell: usize) -> Result<Self> {
        let s = Self {
            ell,
            ..Self::of(PolicyKind::EllStep)
        };
        s.validate()?;
        Ok(s)
    }

    pub fn ens(budget: usize) -> Result<Self> {
        let s = Self {
            budget,
            ..Self::of(PolicyKind::Ens)
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_candidate_cap(mut self, cap: usize) -> Self {
        self.candidate_cap = cap;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PolicyKind::EllStep if !(1..=Self::MAX_ELL).contains(&self.ell) => Err(Error::Config(format!(
                "look-ahead horizon must be 1 or 2, got {}",
                self.ell
            ))),
            PolicyKind::Ens if self.budget == 0 => Err(Error::Config("ENS budget must be at least 1".into())),
            PolicyKind::Ens if self.candidate_cap == 0 => Err(Error::Config("candidate cap must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn suggests(&self) -> bool {
        self.kind != PolicyKind::None
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::None => f.write_str("none"),
            PolicyKind::Random => f.write_str("random"),
            PolicyKind::OneStep => f.write_str("one-step"),
            PolicyKind::EllStep => write!(f, "ell-{}", self.ell),
            PolicyKind::Ens => write!(f, "ens-{}", self.budget),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    /// Accepts `none`, `random`, `one-step` (or `greedy`), `two-step`,
    /// `ell-N` and `ens-N`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        let num = |rest: &str| {
            rest.trim_start_matches([':', '-'])
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad policy parameter in {s:?}")))
        };
        match s.as_str() {
            "none" | "control" => Ok(Self::none()),
            "random" => Ok(Self::random(0)),
            "one-step" | "onestep" | "greedy" => Ok(Self::one_step()),
            "two-step" => Self::ell_step(2),
            _ if s.starts_with("ell") => Self::ell_step(num(&s[3..])?),
            _ if s.starts_with("ens") => Self::ens(num(&s[3..])?),
            _ => Err(Error::Config(format!("unknown policy {s:?}"))),
        }
    }
}

/// RNG for draw `step` of a seeded stream.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Unlabeled indices ordered by id.
fn unlabeled_by_id(post: &Posterior) -> Vec<usize> {
    let mut u = post.unlabeled();
    u.sort_by_key(|&i| post.id(i));
    u
}

/// Argmax of `score` with ties going to the smallest id.
fn argmax_by_id(post: &Posterior, items: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    items.fold(None, |best, (i, s)| match best {
        Some((bi, bs)) if bs > s || (bs == s && post.id(bi) < post.id(i)) => Some((bi, bs)),
        _ => Some((i, s)),
    })
}

/// A uniformly random unlabeled point, deterministic in `(seed, step)`.
pub fn select_random(post: &Posterior, seed: u64, step: u64) -> Result<PointId> {
    let u = unlabeled_by_id(post);
    if u.is_empty() {
        return Err(Error::Exhausted);
    }
    let pick = step_rng(seed, step).random_range(0..u.len());
    Ok(post.id(u[pick]))
}

/// The unlabeled point with the highest fused probability.
pub fn select_one_step(post: &Posterior) -> Result<PointId> {
    argmax_by_id(post, post.unlabeled().into_iter().map(|i| (i, post.probability(i))))
        .map(|(i, _)| post.id(i))
        .ok_or(Error::Exhausted)
}

/// Unlabeled points in descending probability order (ties by id), shared by
/// every candidate's look-ahead within one step.
struct Ranked {
    order: Vec<usize>,
    probs: Vec<f64>,
    /// `ceiling[j]`: the largest optimistic probability at or after rank `j`.
    ceiling: Vec<f64>,
}

impl Ranked {
    fn new(post: &Posterior, unlabeled: &[usize]) -> Self {
        let mut scored: Vec<(usize, f64)> = unlabeled.iter().map(|&i| (i, post.probability(i))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(post.id(a.0).cmp(&post.id(b.0))));
        let (order, probs): (Vec<usize>, Vec<f64>) = scored.into_iter().unzip();
        let mut ceiling = vec![f64::NEG_INFINITY; order.len() + 1];
        for j in (0..order.len()).rev() {
            ceiling[j] = ceiling[j + 1].max(post.optimistic(order[j]));
        }
        Self { order, probs, ceiling }
    }
}

/// The `m` largest values pushed so far, kept ascending.
#[derive(Default)]
struct TopM {
    m: usize,
    vals: Vec<f64>,
}

impl TopM {
    fn reset(&mut self, m: usize) {
        self.m = m;
        self.vals.clear();
    }

    #[inline]
    fn full(&self) -> bool {
        self.vals.len() == self.m
    }

    /// Whether no value `<= v` can change the set.
    #[inline]
    fn closed_below(&self, v: f64) -> bool {
        self.full() && (self.m == 0 || v <= self.vals[0])
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if self.vals.len() == self.m {
            if self.m == 0 || v <= self.vals[0] {
                return;
            }
            self.vals.remove(0);
        }
        let at = self.vals.partition_point(|e| e.total_cmp(&v).is_lt());
        self.vals.insert(at, v);
    }

    /// Sum in descending order, so the result does not depend on the order
    /// values were pushed in.
    fn sum(&self) -> f64 {
        self.vals.iter().rev().sum()
    }
}

#[derive(Default)]
struct Scratch {
    pos: TopM,
    neg: TopM,
}

/// ENS expected utility of querying `x` with `budget` queries left:
/// `p (1 + S+) + (1 - p) S-`, where `S+`/`S-` sum the top `budget - 1`
/// probabilities among the other unlabeled points after conditioning on
/// `x` being positive/negative. `q` is held fixed during the look-ahead.
///
/// Points are visited in descending current probability. Conditioning on a
/// negative never raises a probability, and no positive label can lift a
/// point above its optimistic bound, so the scan stops once neither top set
/// can change. Points whose neighbor lists `x` would not enter keep their
/// current probability.
fn ens_score_index(post: &Posterior, x: usize, ranked: &Ranked, budget: usize, s: &mut Scratch) -> f64 {
    let p = post.probability(x);
    if budget <= 1 {
        return p;
    }
    let dist = post.distances();
    let trow = dist.row(Attribute::Text, x);
    let lrow = dist.row(Attribute::Location, x);
    let x_id = post.id(x);
    s.pos.reset(budget - 1);
    s.neg.reset(budget - 1);
    for (j, (&z, &pz)) in ranked.order.iter().zip(&ranked.probs).enumerate() {
        let neg_done = s.neg.closed_below(pz);
        if neg_done && s.pos.closed_below(ranked.ceiling[j]) {
            break;
        }
        if z == x {
            continue;
        }
        if post.affected_by(z, x_id, trow[z], lrow[z]) {
            let (p1, p0) = post.conditioned(z, x_id, trow[z], lrow[z]);
            s.pos.push(p1);
            s.neg.push(p0);
        } else {
            s.pos.push(pz);
            s.neg.push(pz);
        }
    }
    p * (1.0 + s.pos.sum()) + (1.0 - p) * s.neg.sum()
}

/// ENS score of an unlabeled point.
pub fn ens_score(post: &Posterior, x: PointId, budget: usize) -> Result<f64> {
    let i = post
        .dataset()
        .index_of(x)
        .ok_or_else(|| Error::NotFound(format!("point {x}")))?;
    if post.is_labeled(i) {
        return Err(Error::Validation(format!("point {x} is already labeled")));
    }
    if budget == 0 {
        return Err(Error::Config("ENS budget must be at least 1".into()));
    }
    let unlabeled = post.unlabeled();
    let ranked = Ranked::new(post, &unlabeled);
    Ok(ens_score_index(post, i, &ranked, budget, &mut Scratch::default()))
}

/// The top `cap` unlabeled points of `ranked`.
fn candidates(ranked: &Ranked, cap: usize) -> &[usize] {
    &ranked.order[..cap.min(ranked.order.len())]
}

/// ENS scores for the pruned candidate set, as `(index, score)`.
fn ens_scores(post: &Posterior, budget: usize, cap: usize) -> Vec<(usize, f64)> {
    let unlabeled = post.unlabeled();
    let ranked = Ranked::new(post, &unlabeled);
    candidates(&ranked, cap.max(1))
        .par_iter()
        .map_init(Scratch::default, |s, &x| {
            (x, ens_score_index(post, x, &ranked, budget, s))
        })
        .collect()
}

/// The candidate maximizing the ENS score with `spec.budget` queries left.
pub fn select_ens(post: &Posterior, spec: &PolicySpec) -> Result<PointId> {
    if spec.budget == 0 {
        return Err(Error::Config("ENS budget must be at least 1".into()));
    }
    argmax_by_id(post, ens_scores(post, spec.budget, spec.candidate_cap).into_iter())
        .map(|(i, _)| post.id(i))
        .ok_or(Error::Exhausted)
}

/// Exact two-step look-ahead by brute force: for every candidate and both
/// of its labels, rebuild the estimate of every remaining point from the
/// observation set and take the best successor. Cost is `O(n^2 |D|)`, so
/// this is only for small pools. Returns the chosen id and its value.
pub fn select_two_step_exact(rm: &RelevanceModel, ds: &Dataset, obs: &ObservationSet) -> Result<(PointId, f64)> {
    let dist = Distances::new(ds, None);
    let mut labeled = Vec::with_capacity(obs.len() + 1);
    for o in obs {
        let i = ds
            .index_of(o.point_id)
            .ok_or_else(|| Error::NotFound(format!("point {}", o.point_id)))?;
        labeled.push((i, o.label));
    }
    let unlabeled: Vec<usize> = (0..ds.len()).filter(|&i| !obs.contains(ds.point(i).id)).collect();
    let fused_at = |z: usize, labeled: &[(usize, bool)]| {
        fuse(
            rm.q,
            estimate_at(&rm.text, ds, dist, z, labeled, None).probability,
            estimate_at(&rm.location, ds, dist, z, labeled, None).probability,
        )
    };
    let mut best: Option<(PointId, f64)> = None;
    for &x in &unlabeled {
        let p = fused_at(x, &labeled);
        let mut successor = [0.0f64; 2];
        for (slot, y) in [(0, true), (1, false)] {
            let mut extended = labeled.clone();
            extended.push((x, y));
            successor[slot] = unlabeled
                .iter()
                .filter(|&&z| z != x)
                .map(|&z| fused_at(z, &extended))
                .fold(0.0, f64::max);
        }
        let value = p * (1.0 + successor[0]) + (1.0 - p) * successor[1];
        let id = ds.point(x).id;
        best = match best {
            Some((bid, bv)) if bv > value || (bv == value && bid < id) => Some((bid, bv)),
            _ => Some((id, value)),
        };
    }
    best.ok_or(Error::Exhausted)
}

/// One selection under `spec`. `step` indexes the random stream.
pub fn select(post: &Posterior, spec: &PolicySpec, step: u64) -> Result<PointId> {
    match spec.kind {
        PolicyKind::None => Err(Error::NotApplicable("policy none makes no queries".into())),
        PolicyKind::Random => select_random(post, spec.seed, step),
        PolicyKind::OneStep => select_one_step(post),
        PolicyKind::EllStep if spec.ell <= 1 => select_one_step(post),
        PolicyKind::EllStep => select_ens(post, &PolicySpec::ens(spec.ell)?.with_candidate_cap(usize::MAX)),
        PolicyKind::Ens => select_ens(post, spec),
    }
}

/// The top `batch` unlabeled points under `spec`'s scoring, as
/// `(id, score)` descending with ties by id.
///
/// Scores are fused probabilities for `random` and `one-step`, two-step
/// values for `ell-2` and ENS scores for `ens`. The random policy samples
/// its batch from stream `step`.
pub fn suggest(post: &Posterior, spec: &PolicySpec, batch: usize, step: u64) -> Vec<(PointId, f64)> {
    let mut scored: Vec<(PointId, f64)> = match spec.kind {
        PolicyKind::None => return Vec::new(),
        PolicyKind::Random => {
            let u = unlabeled_by_id(post);
            let n = batch.min(u.len());
            let mut rng = step_rng(spec.seed, step);
            rand::seq::index::sample(&mut rng, u.len(), n)
                .into_iter()
                .map(|j| (post.id(u[j]), post.probability(u[j])))
                .collect()
        }
        PolicyKind::OneStep => return post.ranking().into_iter().take(batch).collect(),
        PolicyKind::EllStep if spec.ell <= 1 => return post.ranking().into_iter().take(batch).collect(),
        PolicyKind::EllStep => ens_scores(post, spec.ell, usize::MAX)
            .into_iter()
            .map(|(i, s)| (post.id(i), s))
            .collect(),
        PolicyKind::Ens => ens_scores(post, spec.budget, spec.candidate_cap.max(batch))
            .into_iter()
            .map(|(i, s)| (post.id(i), s))
            .collect(),
    };
    sort_scored(&mut scored);
    scored.truncate(batch);
    scored
}

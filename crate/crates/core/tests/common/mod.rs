//! Random instances and brute-force reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use forage_core::dataset::Embedding;
use forage_core::relevance::{Attribute, AttributeModel, LooPrediction};
use forage_core::{DataPoint, Dataset, Observation, ObservationSet, RelevanceModel};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random points with distinct shuffled ids. With `coarse` set, locations
/// and embeddings come from a small lattice so that distance ties are
/// common. About one text in ten is degenerate.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> Arc<Dataset> {
    let dim = rng.random_range(2..=5);
    let mut ids: Vec<u64> = (1..=(3 * n as u64)).collect();
    ids.shuffle(rng);
    let points = (0..n)
        .map(|i| {
            let location = if coarse {
                [
                    rng.random_range(0..4) as f64 * 0.25,
                    rng.random_range(0..4) as f64 * 0.25,
                ]
            } else {
                [rng.random::<f64>(), rng.random::<f64>()]
            };
            let mut p = DataPoint::new(ids[i], location, "");
            p.embedding = Some(if rng.random_bool(0.1) {
                Embedding::zero(dim)
            } else {
                let raw: Vec<f64> = (0..dim)
                    .map(|_| {
                        if coarse {
                            rng.random_range(-1i32..=1) as f64
                        } else {
                            rng.sample(StandardNormal)
                        }
                    })
                    .collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    Embedding::zero(dim)
                } else {
                    Embedding {
                        values: raw.iter().map(|v| v / norm).collect(),
                        degenerate: false,
                    }
                }
            });
            p
        })
        .collect();
    Arc::new(Dataset::new(points).expect("valid random dataset"))
}

/// Labels a random subset of `m` points, each positive with a random rate.
pub fn random_observations(rng: &mut ChaCha8Rng, ds: &Dataset, m: usize) -> ObservationSet {
    let rate = rng.random_range(0.1..0.9);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    idx[..m]
        .iter()
        .map(|&i| Observation::oracle(ds.point(i).id, rng.random_bool(rate)))
        .collect()
}

pub fn random_model(rng: &mut ChaCha8Rng) -> RelevanceModel {
    let attr = |rng: &mut ChaCha8Rng, a: Attribute| {
        AttributeModel::new(
            a,
            rng.random_range(1..=8),
            rng.random_range(0.1..3.0),
            rng.random_range(0.01..0.99),
        )
        .expect("valid model")
    };
    RelevanceModel {
        text: attr(rng, Attribute::Text),
        location: attr(rng, Attribute::Location),
        q: rng.random::<f64>(),
    }
}

pub fn distance(ds: &Dataset, attribute: Attribute, i: usize, j: usize) -> f64 {
    let (a, b) = (ds.point(i), ds.point(j));
    match attribute {
        Attribute::Location => {
            let dx = a.location[0] - b.location[0];
            let dy = a.location[1] - b.location[1];
            (dx * dx + dy * dy).sqrt()
        }
        Attribute::Text => {
            let (ea, eb) = (a.embedding.as_ref().unwrap(), b.embedding.as_ref().unwrap());
            if ea.degenerate || eb.degenerate {
                return 1.0;
            }
            1.0 - ea.values.iter().zip(&eb.values).map(|(x, y)| x * y).sum::<f64>()
        }
    }
}

/// Smoothed k-NN estimate by fully sorting every labeled point, skipping
/// `exclude`.
pub fn brute_knn(model: &AttributeModel, ds: &Dataset, obs: &ObservationSet, x: usize, exclude: Option<u64>) -> f64 {
    if model.attribute == Attribute::Text && ds.point(x).is_degenerate() {
        return model.prior;
    }
    let mut all: Vec<(f64, u64, bool)> = obs
        .iter()
        .filter(|o| Some(o.point_id) != exclude)
        .map(|o| {
            let j = ds.index_of(o.point_id).unwrap();
            (distance(ds, model.attribute, x, j), o.point_id, o.label)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let taken = model.k.min(all.len());
    let positives = all[..taken].iter().filter(|e| e.2).count();
    (model.gamma * model.prior + positives as f64) / (model.gamma + taken as f64)
}

pub fn brute_loo(rm: &RelevanceModel, ds: &Dataset, obs: &ObservationSet) -> Vec<LooPrediction> {
    obs.iter()
        .map(|o| {
            let i = ds.index_of(o.point_id).unwrap();
            LooPrediction {
                text: brute_knn(&rm.text, ds, obs, i, Some(o.point_id)),
                location: brute_knn(&rm.location, ds, obs, i, Some(o.point_id)),
                label: o.label,
            }
        })
        .collect()
}

/// Leave-one-out log-likelihood with the plain convex combination.
pub fn brute_log_likelihood(preds: &[LooPrediction], q: f64) -> f64 {
    preds
        .iter()
        .map(|p| {
            let f = (q * p.text + (1.0 - q) * p.location).clamp(1e-6, 1.0 - 1e-6);
            if p.label {
                f.ln()
            } else {
                (1.0 - f).ln()
            }
        })
        .sum()
}

/// Pairwise AUC: correctly ordered (positive, negative) pairs plus half the
/// ties, over all pairs.
pub fn brute_auc(scores: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in scores.iter().filter(|s| s.1) {
        for b in scores.iter().filter(|s| !s.1) {
            pairs += 1.0;
            if a.0 > b.0 {
                wins += 1.0;
            } else if a.0 == b.0 {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

//! Synthetic microblog-like datasets with clustered relevant points.
//!
//! Relevant points sit in a few tight spatial clusters, and each cluster
//! talks about its own family of symptoms, so they also cluster in
//! embedding space. Irrelevant points are spread uniformly over the unit
//! square and use everyday vocabulary. Ids are a random permutation so that
//! id order carries no class information.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DataPoint, Dataset, HashEmbedder};
use crate::error::{Error, Result};

const SYMPTOM_FAMILIES: &[&[&str]] = &[
    &[
        "cough",
        "fever",
        "sore throat",
        "chills",
        "short of breath",
        "pneumonia",
        "flu",
    ],
    &["diarrhea", "nausea", "vomiting", "stomach ache", "fatigue"],
    &["headache", "fever", "fatigue", "sick"],
];

const FILLER: &[&str] = &[
    "coffee", "traffic", "downtown", "weekend", "movie", "lunch", "music", "friends", "game", "store", "rain", "sunny",
    "park", "bus", "office", "meeting", "pizza", "concert", "beach", "shopping", "dinner", "morning", "night", "party",
    "weather", "school", "work", "river", "bridge", "phone", "football", "train", "market", "garden", "library",
    "birthday", "dog", "cat", "festival", "museum", "bakery", "bike", "parade", "church", "mall", "street", "city",
    "news", "happy", "tired", "great", "love", "funny", "busy", "cold", "warm", "late", "early", "tonight", "tomorrow",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteredConfig {
    pub n: usize,
    /// Fraction of relevant points.
    pub incidence: f64,
    pub clusters: usize,
    /// Standard deviation of each cluster in map units.
    pub spread: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for ClusteredConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            incidence: 0.05,
            clusters: 2,
            spread: 0.04,
            embedding_dim: 32,
            seed: 7,
        }
    }
}

fn sentence(rng: &mut ChaCha8Rng, words: usize, extra: &[&str]) -> String {
    let mut parts: Vec<&str> = (0..words).map(|_| *FILLER.choose(rng).expect("filler")).collect();
    for e in extra {
        let at = rng.random_range(0..=parts.len());
        parts.insert(at, e);
    }
    parts.join(" ")
}

/// Generates a fully ground-truth-labeled, embedded dataset.
pub fn clustered(cfg: &ClusteredConfig) -> Result<Dataset> {
    if cfg.n == 0 || cfg.clusters == 0 {
        return Err(Error::Config("need at least one point and one cluster".into()));
    }
    if !(0.0..=1.0).contains(&cfg.incidence) {
        return Err(Error::Config(format!("incidence {} outside [0, 1]", cfg.incidence)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positives = (cfg.n as f64 * cfg.incidence).round() as usize;
    let centers: Vec<[f64; 2]> = (0..cfg.clusters)
        .map(|_| [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)])
        .collect();
    let jitter = Normal::new(0.0, cfg.spread).map_err(|e| Error::Config(e.to_string()))?;

    let mut ids: Vec<u64> = (1..=cfg.n as u64).collect();
    ids.shuffle(&mut rng);

    let mut points = Vec::with_capacity(cfg.n);
    for (i, &id) in ids.iter().enumerate() {
        let (location, text, truth) = if i < positives {
            let c = i % cfg.clusters;
            let family = SYMPTOM_FAMILIES[c % SYMPTOM_FAMILIES.len()];
            let loc = [
                (centers[c][0] + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                (centers[c][1] + jitter.sample(&mut rng)).clamp(0.0, 1.0),
            ];
            let k = rng.random_range(2..=3);
            let symptoms: Vec<&str> = family.choose_multiple(&mut rng, k).copied().collect();
            let filler = rng.random_range(1..=2);
            (loc, sentence(&mut rng, filler, &symptoms), true)
        } else {
            let loc = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let filler = rng.random_range(3..=6);
            (loc, sentence(&mut rng, filler, &[]), false)
        };
        points.push(DataPoint::new(id, location, text).with_truth(truth));
    }
    points.shuffle(&mut rng);
    let embedder = HashEmbedder {
        dim: cfg.embedding_dim,
        seed: cfg.seed,
    };
    Dataset::new(points)?.embed(&embedder)
}

//! Per-action rewards: reciprocal great-circle distance, category word-vector
//! similarity, and exact-hit indicator, combined as a weighted sum (`r1`) or
//! baseline-subtracted sum (`r2`), plus first-quartile baseline calibration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::environment::{apply_event, build_state, EnvState, GateParams, Strategy};
use crate::error::{Error, Result};
use crate::ingest::{CheckinEvent, ContextTimeline};
use crate::math;
use crate::spatial_kg::SpatialKg;

const EARTH_RADIUS_KM: f64 = 6371.0;
/// Distance floor: exact hits would otherwise blow up the reciprocal.
const MIN_DISTANCE_KM: f64 = 0.01;

/// Which combination the training loop pays out: the raw weighted sum or the
/// baseline-subtracted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    R1,
    R2,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(RewardKind::R1),
            "r2" => Ok(RewardKind::R2),
            other => Err(Error::Config(format!("unknown reward kind `{other}`"))),
        }
    }
}

/// Dispatch on [`RewardKind`]; `r1` ignores the baselines.
pub fn reward(
    kind: RewardKind,
    c: &RewardComponents,
    w: &RewardWeights,
    b: &RewardBaselines,
) -> Result<f64> {
    match kind {
        RewardKind::R1 => reward_r1(c, w),
        RewardKind::R2 => reward_r2(c, w, b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_d, self.lambda_c, self.lambda_p];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("reward weights must be finite and >= 0".into()));
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("at least one reward weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBaselines {
    pub b_d: f64,
    pub b_c: f64,
    pub b_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardComponents {
    pub r_d: f64,
    pub r_c: f64,
    pub r_p: f64,
}

/// Great-circle (haversine) distance in kilometers between (lat, lon) pairs.
pub fn distance_km(real: (f64, f64), pred: (f64, f64)) -> f64 {
    let (lat1, lon1) = (real.0.to_radians(), real.1.to_radians());
    let (lat2, lon2) = (pred.0.to_radians(), pred.1.to_radians());
    let half_dlat = (lat2 - lat1) / 2.0;
    let half_dlon = (lon2 - lon1) / 2.0;
    let h = half_dlat.sin().powi(2) + lat1.cos() * lat2.cos() * half_dlon.sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.min(1.0).sqrt().asin()
}

/// 1 / max(distance, 0.01 km), so the range is (0, 100].
pub fn r_d(real: (f64, f64), pred: (f64, f64)) -> f64 {
    1.0 / distance_km(real, pred).max(MIN_DISTANCE_KM)
}

/// Cosine similarity of the two categories' word vectors; zero vectors
/// (out-of-vocabulary names) yield 0.
pub fn r_c(cat_real: usize, cat_pred: usize, vectors: &CategoryVectors) -> f64 {
    math::cosine(&vectors.vecs[cat_real], &vectors.vecs[cat_pred])
}

/// Exact-hit indicator.
pub fn r_p(poi_real: usize, poi_pred: usize) -> f64 {
    if poi_real == poi_pred {
        1.0
    } else {
        0.0
    }
}

/// All three components for a (true POI, predicted POI) pair.
pub fn poi_components(
    kg: &SpatialKg,
    real_poi: usize,
    pred_poi: usize,
    vectors: &CategoryVectors,
) -> RewardComponents {
    RewardComponents {
        r_d: r_d(kg.poi_coords[real_poi], kg.poi_coords[pred_poi]),
        r_c: r_c(kg.poi_category[real_poi], kg.poi_category[pred_poi], vectors),
        r_p: r_p(real_poi, pred_poi),
    }
}

/// λ_d r_d + λ_c r_c + λ_p r_p.
pub fn reward_r1(c: &RewardComponents, w: &RewardWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.lambda_d * c.r_d + w.lambda_c * c.r_c + w.lambda_p * c.r_p)
}

/// λ_d (r_d − b_d) + λ_c (r_c − b_c) + λ_p (r_p − b_p): positive for
/// better-than-baseline actions.
pub fn reward_r2(c: &RewardComponents, w: &RewardWeights, b: &RewardBaselines) -> Result<f64> {
    w.validate()?;
    Ok(w.lambda_d * (c.r_d - b.b_d) + w.lambda_c * (c.r_c - b.b_c) + w.lambda_p * (c.r_p - b.b_p))
}

/// Pre-trained word vectors in plain-text format: one token per line
/// followed by its coefficients, whitespace-separated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordVectors {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut dim = 0usize;
        let mut table = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap().to_lowercase();
            let coeffs: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::parse(path, format!("line {}: bad coefficient `{p}`", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if coeffs.is_empty() {
                return Err(Error::parse(path, format!("line {}: token without coefficients", lineno + 1)));
            }
            if dim == 0 {
                dim = coeffs.len();
            } else if coeffs.len() != dim {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected {dim} coefficients, got {}", lineno + 1, coeffs.len()),
                ));
            }
            table.entry(token).or_insert(coeffs);
        }
        if table.is_empty() {
            return Err(Error::parse(path, "no word vectors found"));
        }
        Ok(WordVectors { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lowercase, split on whitespace, average the in-vocabulary token
    /// vectors; a fully out-of-vocabulary name gives the zero vector.
    pub fn phrase_vector(&self, name: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut hits = 0usize;
        for token in name.to_lowercase().split_whitespace() {
            if let Some(v) = self.table.get(token) {
                math::axpy(&mut acc, 1.0, v);
                hits += 1;
            }
        }
        if hits > 0 {
            math::scale(&mut acc, 1.0 / hits as f64);
        }
        acc
    }
}

/// One word vector per category (indexed like the KG's category table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVectors {
    pub dim: usize,
    pub vecs: Vec<Vec<f64>>,
}

impl CategoryVectors {
    pub fn build(category_names: &[String], words: &WordVectors) -> Self {
        CategoryVectors {
            dim: words.dim(),
            vecs: category_names.iter().map(|n| words.phrase_vector(n)).collect(),
        }
    }
}

/// Nearest-rank first quartile: the value at 1-based index ⌈n/4⌉ of the
/// ascending-sorted samples.
pub fn first_quartile(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot take a quartile of zero samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let rank = (0.25 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rounds: usize,
    pub samples_per_component: usize,
    pub skipped_events: usize,
    pub baselines: RewardBaselines,
}

/// Run an untrained policy for `rounds` episodes (one pass over `events`
/// each) on a clone of the environment, collect every per-step component,
/// and return the first quartile of each as the baselines. The caller's
/// environment is untouched.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_baselines(
    env: &EnvState,
    kg: &SpatialKg,
    params: &GateParams,
    strategy: Strategy,
    timeline: &ContextTimeline,
    events: &[CheckinEvent],
    vectors: &CategoryVectors,
    mut policy: impl FnMut(&[f64], &mut ChaCha8Rng) -> usize,
    rounds: usize,
    seed: u64,
) -> Result<(RewardBaselines, CalibrationReport)> {
    if rounds < 4 {
        return Err(Error::Config(format!("calibration needs >= 4 rounds, got {rounds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Vec::new();
    let mut cs = Vec::new();
    let mut ps = Vec::new();
    let mut skipped = 0usize;

    for _ in 0..rounds {
        let mut sandbox = env.clone();
        for event in events {
            let Some(user_vec) = sandbox.users.get(&event.user_id) else {
                skipped += 1;
                continue;
            };
            let Ok(real_poi) = kg.poi_index(&event.poi_id) else {
                skipped += 1;
                continue;
            };
            let state = build_state(user_vec, &sandbox.kg_state);
            let action = policy(&state, &mut rng);
            let c = poi_components(kg, real_poi, action, vectors);
            ds.push(c.r_d);
            cs.push(c.r_c);
            ps.push(c.r_p);
            let ctx = timeline.at(event.timestamp);
            apply_event(&mut sandbox, kg, &event.user_id, &event.poi_id, ctx, params, strategy)?;
        }
    }

    if ds.is_empty() {
        return Err(Error::Invalid("calibration collected zero samples".into()));
    }
    let baselines = RewardBaselines {
        b_d: first_quartile(&ds)?,
        b_c: first_quartile(&cs)?,
        b_p: first_quartile(&ps)?,
    };
    let report = CalibrationReport {
        rounds,
        samples_per_component: ds.len(),
        skipped_events: skipped,
        baselines,
    };
    Ok((baselines, report))
}

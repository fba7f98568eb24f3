//! Initial user vectors from the earliest slice of each user's trajectory.
//!
//! Each user's first visits become a category-transition graph; the default
//! initializer turns its stationary category frequencies into a unit vector
//! plus a little noise. Initializers are pluggable by name so a run can swap
//! in anything that maps graphs to fixed-dimension vectors.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CheckinEvent;
use crate::math;

/// Directed category-transition graph for one user. Node order is ascending
/// category id; `weights` is a dense k x k row-major count matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityGraph {
    pub nodes: Vec<String>,
    pub weights: Vec<f64>,
}

impl MobilityGraph {
    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[from * self.nodes.len() + to]
    }
}

/// Build the transition graph from the earliest `ceil(fraction * n)` events
/// of one user (events must already be time-sorted). Consecutive visit pairs
/// increment the edge between their categories; a slice with fewer than two
/// events yields nodes but no edges.
pub fn build_mobility_graph(events: &[CheckinEvent], fraction: f64) -> Result<MobilityGraph> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "slice fraction must be in (0, 1], got {fraction}"
        )));
    }
    let take = ((fraction * events.len() as f64).ceil() as usize).min(events.len());
    let slice = &events[..take];

    let mut nodes: Vec<String> = slice.iter().map(|e| e.category_id.clone()).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let index: BTreeMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let k = nodes.len();
    let mut weights = vec![0.0; k * k];
    for pair in slice.windows(2) {
        let a = index[pair[0].category_id.as_str()];
        let b = index[pair[1].category_id.as_str()];
        weights[a * k + b] += 1.0;
    }
    Ok(MobilityGraph { nodes, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    SpectralLite,
    Random,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral-lite" => Ok(InitMethod::SpectralLite),
            "random" => Ok(InitMethod::Random),
            other => Err(Error::Config(format!("unknown initializer `{other}`"))),
        }
    }
}

/// Stationary category frequencies of the graph's random walk, laid out in
/// node order, padded or truncated to `n` entries, L2-normalized. Zero rows
/// become self-loops; iterate averaging makes periodic walks (cycles)
/// converge too. This is the pre-noise "spectral-lite" profile.
pub fn spectral_profile(graph: &MobilityGraph, n: usize) -> Vec<f64> {
    let k = graph.nodes.len();
    let mut out = vec![0.0; n];
    if k == 0 {
        return out;
    }

    // Row-stochastic transition matrix.
    let mut t = vec![0.0; k * k];
    for i in 0..k {
        let row = &graph.weights[i * k..(i + 1) * k];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for j in 0..k {
                t[i * k + j] = row[j] / total;
            }
        } else {
            t[i * k + i] = 1.0;
        }
    }

    let mut pi = vec![1.0 / k as f64; k];
    let mut avg = vec![0.0; k];
    let iters = 500;
    for _ in 0..iters {
        pi = math::matvec_t(&t, k, k, &pi);
        math::axpy(&mut avg, 1.0, &pi);
    }
    let total: f64 = avg.iter().sum();
    if total > 0.0 {
        math::scale(&mut avg, 1.0 / total);
    }

    for (i, v) in avg.iter().take(n).enumerate() {
        out[i] = *v;
    }
    math::normalize(&mut out);
    out
}

/// One `n`-vector per user. "spectral-lite" is the stationary profile plus
/// Gaussian noise (sigma 0.01); "random" is pure Gaussian with sigma
/// 1/sqrt(n). The i-th user in ascending id order draws from `seed + i`, so
/// users with identical graphs differ only by their noise streams.
pub fn init_user_states(
    graphs: &BTreeMap<String, MobilityGraph>,
    n: usize,
    method: InitMethod,
    seed: u64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if n < 2 {
        return Err(Error::Config("user dimension must be >= 2".into()));
    }
    let mut out = BTreeMap::new();
    for (i, (user, graph)) in graphs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let vec = match method {
            InitMethod::SpectralLite => {
                let noise = Normal::new(0.0, 0.01).unwrap();
                let mut v = spectral_profile(graph, n);
                for x in v.iter_mut() {
                    *x += noise.sample(&mut rng);
                }
                v
            }
            InitMethod::Random => {
                let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).unwrap();
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        if !math::all_finite(&vec) {
            return Err(Error::NonFinite(format!("initial state for user `{user}`")));
        }
        out.insert(user.clone(), vec);
    }
    Ok(out)
}

//! Spatial knowledge graph over POIs, categories, and grid zones, plus
//! translation-based embedding training (dynamic-projection scoring) used to
//! initialize the mutable KG state.

use std::collections::BTreeMap;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{cell_of, CheckinEvent, GridSpec};
use crate::math;

pub const REL_BELONG_TO: usize = 0;
pub const REL_LOCATE_AT: usize = 1;
pub const RELATION_IDS: [&str; 2] = ["belong_to", "locate_at"];

pub fn relation_index(id: &str) -> Result<usize> {
    match id {
        "belong_to" => Ok(REL_BELONG_TO),
        "locate_at" => Ok(REL_LOCATE_AT),
        other => Err(Error::Lookup(format!("unknown relation `{other}`"))),
    }
}

/// POIs, categories, and occupied grid cells, with one `belong_to` and one
/// `locate_at` triplet per POI. Index order is ascending id (POIs and
/// categories lexicographic, zones by cell index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialKg {
    pub poi_ids: Vec<String>,
    pub category_ids: Vec<String>,
    /// Display name per category (first one observed).
    pub category_names: Vec<String>,
    /// Grid cells containing at least one POI, ascending.
    pub zone_cells: Vec<usize>,
    /// POI index -> category index (majority category, ties -> smallest id).
    pub poi_category: Vec<usize>,
    /// POI index -> zone index (position in `zone_cells`).
    pub poi_zone: Vec<usize>,
    /// POI index -> (lat, lon) from its earliest event.
    pub poi_coords: Vec<(f64, f64)>,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KgBuildReport {
    /// POIs whose coordinates fell outside the bbox and were clamped to the
    /// nearest boundary cell.
    pub clamped_pois: usize,
}

/// A (head entity, relation, tail entity) edge over flat entity indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl SpatialKg {
    pub fn n_pois(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_ids.len()
    }

    pub fn n_zones(&self) -> usize {
        self.zone_cells.len()
    }

    pub fn entity_count(&self) -> usize {
        self.n_pois() + self.n_categories() + self.n_zones()
    }

    /// Flat entity index layout: POIs, then categories, then zones.
    pub fn poi_entity(&self, poi: usize) -> usize {
        poi
    }

    pub fn category_entity(&self, cat: usize) -> usize {
        self.n_pois() + cat
    }

    pub fn zone_entity(&self, zone: usize) -> usize {
        self.n_pois() + self.n_categories() + zone
    }

    pub fn poi_index(&self, poi_id: &str) -> Result<usize> {
        self.poi_ids
            .binary_search_by(|p| p.as_str().cmp(poi_id))
            .map_err(|_| Error::Lookup(format!("unknown poi `{poi_id}`")))
    }

    /// Both triplets of every POI: all `belong_to`, then all `locate_at`.
    pub fn triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::with_capacity(2 * self.n_pois());
        for (p, &c) in self.poi_category.iter().enumerate() {
            out.push(Triplet {
                head: self.poi_entity(p),
                relation: REL_BELONG_TO,
                tail: self.category_entity(c),
            });
        }
        for (p, &z) in self.poi_zone.iter().enumerate() {
            out.push(Triplet {
                head: self.poi_entity(p),
                relation: REL_LOCATE_AT,
                tail: self.zone_entity(z),
            });
        }
        out
    }

    /// Entity id string for a flat index (`poi:`/`cat:`/`zone:` prefixed).
    pub fn entity_id(&self, entity: usize) -> String {
        let (p, c) = (self.n_pois(), self.n_categories());
        if entity < p {
            format!("poi:{}", self.poi_ids[entity])
        } else if entity < p + c {
            format!("cat:{}", self.category_ids[entity - p])
        } else {
            format!("zone:{}", self.zone_cells[entity - p - c])
        }
    }
}

/// Group check-ins into a KG. A POI keeps its most frequent category
/// (ties -> lexicographically smallest category id) and the coordinates of
/// its earliest event; out-of-bbox POIs are clamped to the nearest boundary
/// cell and tallied.
pub fn build_spatial_kg(
    events: &[CheckinEvent],
    grid: &GridSpec,
) -> Result<(SpatialKg, KgBuildReport)> {
    grid.validate()?;
    if events.is_empty() {
        return Err(Error::Invalid("cannot build a KG from zero events".into()));
    }

    // Per POI: category counts, earliest coordinates.
    let mut cat_counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut coords: BTreeMap<&str, (i64, f64, f64)> = BTreeMap::new();
    let mut cat_names: BTreeMap<&str, &str> = BTreeMap::new();
    for e in events {
        *cat_counts
            .entry(&e.poi_id)
            .or_default()
            .entry(&e.category_id)
            .or_insert(0) += 1;
        coords
            .entry(&e.poi_id)
            .and_modify(|slot| {
                if e.timestamp < slot.0 {
                    *slot = (e.timestamp, e.lat, e.lon);
                }
            })
            .or_insert((e.timestamp, e.lat, e.lon));
        cat_names.entry(&e.category_id).or_insert(&e.category_name);
    }

    let poi_ids: Vec<String> = cat_counts.keys().map(|s| s.to_string()).collect();
    let category_ids: Vec<String> = cat_names.keys().map(|s| s.to_string()).collect();
    let cat_index: BTreeMap<&str, usize> = category_ids
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let category_names: Vec<String> = category_ids
        .iter()
        .map(|c| cat_names[c.as_str()].to_string())
        .collect();

    let mut report = KgBuildReport::default();
    let mut poi_category = Vec::with_capacity(poi_ids.len());
    let mut poi_coords = Vec::with_capacity(poi_ids.len());
    let mut poi_cell = Vec::with_capacity(poi_ids.len());
    for id in &poi_ids {
        let counts = &cat_counts[id.as_str()];
        // Max count; BTreeMap iteration gives the smallest id on ties.
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| *c)
            .unwrap();
        poi_category.push(cat_index[best]);

        let (_, lat, lon) = coords[id.as_str()];
        poi_coords.push((lat, lon));
        let cell = match cell_of(lat, lon, grid) {
            Some(c) => c,
            None => {
                report.clamped_pois += 1;
                let (clat, clon) = grid.clamp(lat, lon);
                cell_of(clat, clon, grid).expect("clamped point is inside the bbox")
            }
        };
        poi_cell.push(cell);
    }

    let mut zone_cells: Vec<usize> = poi_cell.clone();
    zone_cells.sort_unstable();
    zone_cells.dedup();
    let poi_zone: Vec<usize> = poi_cell
        .iter()
        .map(|c| zone_cells.binary_search(c).unwrap())
        .collect();

    Ok((
        SpatialKg {
            poi_ids,
            category_ids,
            category_names,
            zone_cells,
            poi_category,
            poi_zone,
            poi_coords,
            grid: *grid,
        },
        report,
    ))
}

/// Entity/relation vectors with their dynamic-projection vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEmbeddings {
    pub dim: usize,
    /// Prefixed ids (`poi:`/`cat:`/`zone:`) in flat entity order.
    pub entity_ids: Vec<String>,
    pub entity_vecs: Vec<Vec<f64>>,
    pub entity_projs: Vec<Vec<f64>>,
    /// Indexed by `REL_BELONG_TO` / `REL_LOCATE_AT`.
    pub relation_vecs: Vec<Vec<f64>>,
    pub relation_projs: Vec<Vec<f64>>,
    pub seed: u64,
}

impl KgEmbeddings {
    pub fn entity_index(&self, id: &str) -> Result<usize> {
        self.entity_ids
            .iter()
            .position(|e| e == id)
            .ok_or_else(|| Error::Lookup(format!("unknown entity `{id}`")))
    }
}

/// h + (p_e . e) p_r, the dynamically projected entity vector.
pub fn project(e: &[f64], p_e: &[f64], p_r: &[f64]) -> Vec<f64> {
    let s = math::dot(p_e, e);
    e.iter().zip(p_r).map(|(ev, pr)| ev + s * pr).collect()
}

fn score_idx(emb: &KgEmbeddings, t: Triplet) -> f64 {
    let rp = &emb.relation_projs[t.relation];
    let h = project(&emb.entity_vecs[t.head], &emb.entity_projs[t.head], rp);
    let tl = project(&emb.entity_vecs[t.tail], &emb.entity_projs[t.tail], rp);
    let r = &emb.relation_vecs[t.relation];
    let mut sq = 0.0;
    for i in 0..emb.dim {
        let d = h[i] + r[i] - tl[i];
        sq += d * d;
    }
    -sq
}

/// Plausibility of (head, relation, tail) given by the negated squared
/// translation residual of the projected vectors; higher is more plausible.
pub fn transd_score(head: &str, relation: &str, tail: &str, emb: &KgEmbeddings) -> Result<f64> {
    let t = Triplet {
        head: emb.entity_index(head)?,
        relation: relation_index(relation)?,
        tail: emb.entity_index(tail)?,
    };
    Ok(score_idx(emb, t))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransDConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    /// Negatives drawn per positive triplet per epoch.
    pub neg_per_pos: usize,
    pub seed: u64,
}

impl Default for TransDConfig {
    fn default() -> Self {
        TransDConfig {
            dim: 200,
            epochs: 100,
            lr: 0.01,
            margin: 1.0,
            neg_per_pos: 1,
            seed: 7,
        }
    }
}

/// Fresh embeddings: entity and relation vectors uniform in [-6/sqrt(d),
/// +6/sqrt(d)]; projection vectors uniform in a range shrunk by 10x so the
/// initial mapping starts near (but not exactly at) the identity. An exactly
/// zero projection init is a stationary point of the margin loss - every
/// projection gradient carries a factor of some projection vector - so the
/// projections would never leave zero.
pub fn init_embeddings(kg: &SpatialKg, dim: usize, seed: u64) -> KgEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 6.0 / (dim as f64).sqrt();
    let proj_bound = bound * 0.1;
    let sample = |rng: &mut ChaCha8Rng, b: f64| -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-b..=b)).collect()
    };

    let n = kg.entity_count();
    let mut entity_vecs = Vec::with_capacity(n);
    let mut entity_projs = Vec::with_capacity(n);
    for _ in 0..n {
        entity_vecs.push(sample(&mut rng, bound));
        entity_projs.push(sample(&mut rng, proj_bound));
    }
    let mut relation_vecs = Vec::with_capacity(2);
    let mut relation_projs = Vec::with_capacity(2);
    for _ in 0..2 {
        relation_vecs.push(sample(&mut rng, bound));
        relation_projs.push(sample(&mut rng, proj_bound));
    }

    KgEmbeddings {
        dim,
        entity_ids: (0..n).map(|e| kg.entity_id(e)).collect(),
        entity_vecs,
        entity_projs,
        relation_vecs,
        relation_projs,
        seed,
    }
}

/// Sparse gradients of the margin loss for one (positive, negative) pair.
#[derive(Debug, Default, Clone)]
pub struct PairGrads {
    pub entity_vecs: BTreeMap<usize, Vec<f64>>,
    pub entity_projs: BTreeMap<usize, Vec<f64>>,
    pub relation_vecs: BTreeMap<usize, Vec<f64>>,
    pub relation_projs: BTreeMap<usize, Vec<f64>>,
}

impl PairGrads {
    fn add(map: &mut BTreeMap<usize, Vec<f64>>, idx: usize, dim: usize, delta: &[f64]) {
        let slot = map.entry(idx).or_insert_with(|| vec![0.0; dim]);
        math::axpy(slot, 1.0, delta);
    }
}

/// max(0, margin - score(pos) + score(neg)).
pub fn margin_pair_loss(emb: &KgEmbeddings, pos: Triplet, neg: Triplet, margin: f64) -> f64 {
    (margin - score_idx(emb, pos) + score_idx(emb, neg)).max(0.0)
}

/// Analytic gradients of `margin_pair_loss` with respect to every vector the
/// pair touches. Zero when the margin is not violated.
pub fn margin_pair_grads(emb: &KgEmbeddings, pos: Triplet, neg: Triplet, margin: f64) -> PairGrads {
    let mut grads = PairGrads::default();
    if margin_pair_loss(emb, pos, neg, margin) <= 0.0 {
        return grads;
    }
    // d(loss)/d(residual) is 2*residual for the positive triplet and
    // -2*residual for the negative one.
    for (triplet, sign) in [(pos, 1.0), (neg, -1.0)] {
        let Triplet { head, relation, tail } = triplet;
        let (h, hp) = (&emb.entity_vecs[head], &emb.entity_projs[head]);
        let (t, tp) = (&emb.entity_vecs[tail], &emb.entity_projs[tail]);
        let r = &emb.relation_vecs[relation];
        let rp = &emb.relation_projs[relation];

        let h_proj = project(h, hp, rp);
        let t_proj = project(t, tp, rp);
        let delta: Vec<f64> = (0..emb.dim)
            .map(|i| 2.0 * sign * (h_proj[i] + r[i] - t_proj[i]))
            .collect();

        let rp_dot = math::dot(rp, &delta);
        let mut g_h = delta.clone();
        math::axpy(&mut g_h, rp_dot, hp);
        let g_hp: Vec<f64> = h.iter().map(|v| rp_dot * v).collect();
        let mut g_t: Vec<f64> = delta.iter().map(|v| -v).collect();
        math::axpy(&mut g_t, -rp_dot, tp);
        let g_tp: Vec<f64> = t.iter().map(|v| -rp_dot * v).collect();
        let scale = math::dot(hp, h) - math::dot(tp, t);
        let g_rp: Vec<f64> = delta.iter().map(|v| scale * v).collect();

        let dim = emb.dim;
        PairGrads::add(&mut grads.entity_vecs, head, dim, &g_h);
        PairGrads::add(&mut grads.entity_projs, head, dim, &g_hp);
        PairGrads::add(&mut grads.entity_vecs, tail, dim, &g_t);
        PairGrads::add(&mut grads.entity_projs, tail, dim, &g_tp);
        PairGrads::add(&mut grads.relation_vecs, relation, dim, &delta);
        PairGrads::add(&mut grads.relation_projs, relation, dim, &g_rp);
    }
    grads
}

fn apply_grads(emb: &mut KgEmbeddings, grads: &PairGrads, lr: f64) {
    for (&i, g) in &grads.entity_vecs {
        math::axpy(&mut emb.entity_vecs[i], -lr, g);
    }
    for (&i, g) in &grads.entity_projs {
        math::axpy(&mut emb.entity_projs[i], -lr, g);
    }
    for (&i, g) in &grads.relation_vecs {
        math::axpy(&mut emb.relation_vecs[i], -lr, g);
    }
    for (&i, g) in &grads.relation_projs {
        math::axpy(&mut emb.relation_projs[i], -lr, g);
    }
}

/// Uniform draw from `0..n` excluding `skip` (requires n >= 2).
fn sample_excluding(rng: &mut ChaCha8Rng, n: usize, skip: usize) -> usize {
    let pick = rng.gen_range(0..n - 1);
    if pick >= skip {
        pick + 1
    } else {
        pick
    }
}

/// Corrupt the tail with probability 0.5 (uniform over entities of the
/// tail's type), otherwise the head (uniform over POIs), always excluding
/// the true entity. Falls back to the other side when a side has no
/// alternative; `None` when neither side does.
fn corrupt(kg: &SpatialKg, t: Triplet, rng: &mut ChaCha8Rng) -> Option<Triplet> {
    let tail_pool = match t.relation {
        REL_BELONG_TO => kg.n_categories(),
        _ => kg.n_zones(),
    };
    let tail_base = match t.relation {
        REL_BELONG_TO => kg.n_pois(),
        _ => kg.n_pois() + kg.n_categories(),
    };
    let head_pool = kg.n_pois();

    let mut corrupt_tail = rng.gen_bool(0.5);
    if corrupt_tail && tail_pool < 2 {
        corrupt_tail = false;
    }
    if !corrupt_tail && head_pool < 2 {
        if tail_pool < 2 {
            return None;
        }
        corrupt_tail = true;
    }

    if corrupt_tail {
        let tail = tail_base + sample_excluding(rng, tail_pool, t.tail - tail_base);
        Some(Triplet { tail, ..t })
    } else {
        let head = sample_excluding(rng, head_pool, t.head);
        Some(Triplet { head, ..t })
    }
}

/// Margin-ranking training with uniform corruption. Entity vectors are
/// renormalized to unit norm after each epoch. Returns the embeddings and
/// the mean pair loss per epoch.
pub fn train_transd(kg: &SpatialKg, cfg: &TransDConfig) -> Result<(KgEmbeddings, Vec<f64>)> {
    if cfg.dim < 2 {
        return Err(Error::Config("embedding dim must be >= 2".into()));
    }
    if kg.n_pois() == 0 {
        return Err(Error::Invalid("cannot train embeddings on an empty KG".into()));
    }

    let mut emb = init_embeddings(kg, cfg.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = kg.triplets();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for &pos in &order {
            for _ in 0..cfg.neg_per_pos {
                let Some(neg) = corrupt(kg, pos, &mut rng) else {
                    continue;
                };
                let loss = margin_pair_loss(&emb, pos, neg, cfg.margin);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "margin loss diverged at epoch {epoch}"
                    )));
                }
                total += loss;
                pairs += 1;
                if loss > 0.0 {
                    let grads = margin_pair_grads(&emb, pos, neg, cfg.margin);
                    apply_grads(&mut emb, &grads, cfg.lr);
                }
            }
        }
        for v in &mut emb.entity_vecs {
            math::normalize(v);
        }
        epoch_losses.push(if pairs > 0 { total / pairs as f64 } else { 0.0 });
    }

    Ok((emb, epoch_losses))
}

/// The mutable KG half of the interaction state: projected POI heads,
/// projected category/zone tails, and the (immutable) relation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgState {
    pub dim: usize,
    pub poi_vecs: Vec<Vec<f64>>,
    pub cat_vecs: Vec<Vec<f64>>,
    pub zone_vecs: Vec<Vec<f64>>,
    /// Indexed by `REL_BELONG_TO` / `REL_LOCATE_AT`; never updated after
    /// export.
    pub rel_vecs: Vec<Vec<f64>>,
}

/// Deep-copied initial state: categories are projected under `belong_to`,
/// zones under `locate_at`, and each POI head is the average of its
/// projections under the two relations (a head participates in both triplet
/// groups but the state keeps a single vector per POI).
pub fn export_initial_state(emb: &KgEmbeddings, kg: &SpatialKg) -> KgState {
    let project_entity = |entity: usize, relation: usize| -> Vec<f64> {
        project(
            &emb.entity_vecs[entity],
            &emb.entity_projs[entity],
            &emb.relation_projs[relation],
        )
    };

    let poi_vecs = (0..kg.n_pois())
        .map(|p| {
            let e = kg.poi_entity(p);
            let a = project_entity(e, REL_BELONG_TO);
            let b = project_entity(e, REL_LOCATE_AT);
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
        })
        .collect();
    let cat_vecs = (0..kg.n_categories())
        .map(|c| project_entity(kg.category_entity(c), REL_BELONG_TO))
        .collect();
    let zone_vecs = (0..kg.n_zones())
        .map(|z| project_entity(kg.zone_entity(z), REL_LOCATE_AT))
        .collect();

    KgState {
        dim: emb.dim,
        poi_vecs,
        cat_vecs,
        zone_vecs,
        rel_vecs: emb.relation_vecs.clone(),
    }
}

//! The interaction state (user vectors + mutable KG vectors) and the per-visit
//! update rules.
//!
//! Applying a visit event runs four gated updates in order: the user vector,
//! the visited POI vector, that POI's category/zone tails, and finally every
//! sibling POI sharing the category or zone (category pass before zone pass,
//! ascending POI index, sequentially chained). Each update blends the old
//! vector with a candidate through a sigmoid gate ("up2"); the "up1" strategy
//! runs the same chain with every gate fixed at 0.5.
//!
//! `apply_event_traced` records the intermediates so `backward_event` can
//! push a loss gradient on the post-event state back into the gate/interaction
//! parameters of that single transition (no backprop through earlier events).

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TemporalContext;
use crate::math;
use crate::spatial_kg::{KgState, SpatialKg, REL_BELONG_TO, REL_LOCATE_AT};

const GATE_MIN: f64 = 1e-6;
const GATE_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Equal-blend: every gate fixed at 0.5.
    Up1,
    /// Gated long-short-term blending.
    Up2,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up1" => Ok(Strategy::Up1),
            "up2" => Ok(Strategy::Up2),
            other => Err(Error::Config(format!("unknown update strategy `{other}`"))),
        }
    }
}

/// Mutable interaction state: one vector per user, the evolving KG vectors,
/// and the number of events applied so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub users: BTreeMap<String, Vec<f64>>,
    pub kg_state: KgState,
    pub step: u64,
}

impl EnvState {
    /// User and KG vectors share one dimension: the update rules mix them
    /// elementwise, so mismatched dims are rejected up front.
    pub fn new(users: BTreeMap<String, Vec<f64>>, kg_state: KgState) -> Result<Self> {
        let dim = kg_state.dim;
        for (id, v) in &users {
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "user `{id}` has dim {} but the KG state has dim {dim}",
                    v.len()
                )));
            }
        }
        Ok(EnvState {
            users,
            kg_state,
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.kg_state.dim
    }
}

/// Gate weights/biases, the two interaction matrices, and the context
/// projection. One shared dimension N; the context projection maps the
/// flattened m x 3 traffic matrix into R^N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub dim: usize,
    pub ctx_cols: usize,
    /// User gate over u_old.
    pub w_gate_u: Vec<f64>,
    pub b_gate_u: f64,
    /// Visited-POI gate over h_old.
    pub w_gate_p: Vec<f64>,
    pub b_gate_p: f64,
    /// Tail gate over t_old (shared by category and zone tails).
    pub w_gate_t: Vec<f64>,
    pub b_gate_t: f64,
    /// Sibling gate over each sibling's current h.
    pub w_gate_s: Vec<f64>,
    pub b_gate_s: f64,
    /// N x N, candidate for the user update: W_u (h ⊙ T̃).
    pub w_user: Vec<f64>,
    /// N x N, candidate for the visited-POI update: W_p (u ⊙ T̃).
    pub w_poi: Vec<f64>,
    /// N x ctx_cols context projection.
    pub w_ctx: Vec<f64>,
}

impl GateParams {
    pub fn init(dim: usize, ctx_cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
        };
        let gate_bound = 1.0 / (dim as f64).sqrt();
        let ctx_bound = 1.0 / (ctx_cols as f64).sqrt();
        GateParams {
            dim,
            ctx_cols,
            w_gate_u: uniform(dim, gate_bound),
            b_gate_u: 0.0,
            w_gate_p: uniform(dim, gate_bound),
            b_gate_p: 0.0,
            w_gate_t: uniform(dim, gate_bound),
            b_gate_t: 0.0,
            w_gate_s: uniform(dim, gate_bound),
            b_gate_s: 0.0,
            w_user: uniform(dim * dim, gate_bound),
            w_poi: uniform(dim * dim, gate_bound),
            w_ctx: uniform(dim * ctx_cols, ctx_bound),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            (self.w_gate_u.len(), self.dim),
            (self.w_gate_p.len(), self.dim),
            (self.w_gate_t.len(), self.dim),
            (self.w_gate_s.len(), self.dim),
            (self.w_user.len(), self.dim * self.dim),
            (self.w_poi.len(), self.dim * self.dim),
            (self.w_ctx.len(), self.dim * self.ctx_cols),
        ];
        if shapes.iter().any(|(got, want)| got != want) {
            return Err(Error::Config("gate parameter shape mismatch".into()));
        }
        let finite = self
            .w_gate_u
            .iter()
            .chain(&self.w_gate_p)
            .chain(&self.w_gate_t)
            .chain(&self.w_gate_s)
            .chain(&self.w_user)
            .chain(&self.w_poi)
            .chain(&self.w_ctx)
            .all(|x| x.is_finite())
            && [self.b_gate_u, self.b_gate_p, self.b_gate_t, self.b_gate_s]
                .iter()
                .all(|b| b.is_finite());
        if !finite {
            return Err(Error::NonFinite("gate parameters".into()));
        }
        Ok(())
    }
}

/// T̃ = L2-normalized W_ctx · flatten(T); an all-zero projection stays zero.
pub fn project_context(ctx: &TemporalContext, params: &GateParams) -> Result<Vec<f64>> {
    if ctx.counts.len() != params.ctx_cols {
        return Err(Error::Config(format!(
            "context has {} entries but the projection expects {}",
            ctx.counts.len(),
            params.ctx_cols
        )));
    }
    let mut y = math::matvec(&params.w_ctx, params.dim, params.ctx_cols, &ctx.counts);
    math::normalize(&mut y);
    Ok(y)
}

/// W · (x ⊙ ctx): the candidate a gated update blends toward.
pub fn interact(x: &[f64], ctx: &[f64], w: &[f64], dim: usize) -> Vec<f64> {
    math::matvec(w, dim, dim, &math::hadamard(x, ctx))
}

/// σ(w·x + b) clamped into [1e-6, 1 − 1e-6].
pub fn gate(x: &[f64], w: &[f64], b: f64) -> f64 {
    math::sigmoid(math::dot(w, x) + b).clamp(GATE_MIN, GATE_MAX)
}

/// Gate value plus dσ/dz (zero under up1 and at the clamp rails).
fn gate_eval(x: &[f64], w: &[f64], b: f64, strategy: Strategy) -> (f64, f64) {
    match strategy {
        Strategy::Up1 => (0.5, 0.0),
        Strategy::Up2 => {
            let s = math::sigmoid(math::dot(w, x) + b);
            let a = s.clamp(GATE_MIN, GATE_MAX);
            let deriv = if s == a { a * (1.0 - a) } else { 0.0 };
            (a, deriv)
        }
    }
}

fn blend(old: &[f64], cand: &[f64], alpha: f64) -> Vec<f64> {
    old.iter()
        .zip(cand)
        .map(|(o, c)| alpha * o + (1.0 - alpha) * c)
        .collect()
}

/// u_new = α_u u_old + (1 − α_u) W_u (h ⊙ T̃), with α_u gated on u_old.
pub fn update_user(
    u_old: &[f64],
    h_poi: &[f64],
    t_tilde: &[f64],
    params: &GateParams,
    strategy: Strategy,
) -> Vec<f64> {
    let (alpha, _) = gate_eval(u_old, &params.w_gate_u, params.b_gate_u, strategy);
    let cand = interact(h_poi, t_tilde, &params.w_user, params.dim);
    blend(u_old, &cand, alpha)
}

/// h_new = α_p h_old + (1 − α_p) W_p (u ⊙ T̃), with α_p gated on h_old.
pub fn update_visited_poi(
    h_old: &[f64],
    u_old: &[f64],
    t_tilde: &[f64],
    params: &GateParams,
    strategy: Strategy,
) -> Vec<f64> {
    let (alpha, _) = gate_eval(h_old, &params.w_gate_p, params.b_gate_p, strategy);
    let cand = interact(u_old, t_tilde, &params.w_poi, params.dim);
    blend(h_old, &cand, alpha)
}

/// Both tails pulled toward the fresh translation h_new + rel, each with its
/// own gate evaluation on its old vector.
pub fn update_tails(
    h_new: &[f64],
    rel_belong: &[f64],
    rel_locate: &[f64],
    t_old_cat: &[f64],
    t_old_zone: &[f64],
    params: &GateParams,
    strategy: Strategy,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(2);
    for (t_old, rel) in [(t_old_cat, rel_belong), (t_old_zone, rel_locate)] {
        let (alpha, _) = gate_eval(t_old, &params.w_gate_t, params.b_gate_t, strategy);
        let cand: Vec<f64> = h_new.iter().zip(rel).map(|(h, r)| h + r).collect();
        out.push(blend(t_old, &cand, alpha));
    }
    let zone = out.pop().unwrap();
    (out.pop().unwrap(), zone)
}

/// One sibling update inside a pass.
#[derive(Debug, Clone)]
pub struct SiblingStep {
    pub poi: usize,
    /// The sibling's vector as read at this step (after any earlier pass).
    pub input: Vec<f64>,
    pub alpha: f64,
    pub alpha_deriv: f64,
}

fn sibling_pass(
    kg_state: &mut KgState,
    siblings: impl Iterator<Item = usize>,
    cand: &[f64],
    params: &GateParams,
    strategy: Strategy,
) -> Vec<SiblingStep> {
    let mut steps = Vec::new();
    for s in siblings {
        let input = kg_state.poi_vecs[s].clone();
        let (alpha, alpha_deriv) = gate_eval(&input, &params.w_gate_s, params.b_gate_s, strategy);
        kg_state.poi_vecs[s] = blend(&input, cand, alpha);
        steps.push(SiblingStep {
            poi: s,
            input,
            alpha,
            alpha_deriv,
        });
    }
    steps
}

fn cat_siblings(kg: &SpatialKg, poi: usize) -> impl Iterator<Item = usize> + '_ {
    let cat = kg.poi_category[poi];
    (0..kg.n_pois()).filter(move |&i| i != poi && kg.poi_category[i] == cat)
}

fn zone_siblings(kg: &SpatialKg, poi: usize) -> impl Iterator<Item = usize> + '_ {
    let zone = kg.poi_zone[poi];
    (0..kg.n_pois()).filter(move |&i| i != poi && kg.poi_zone[i] == zone)
}

/// Pull every sibling of `poi` toward the reverse translation t_new − rel:
/// category pass first, then zone pass, ascending POI index, each step
/// reading the sibling's current vector. Returns the distinct updated POIs.
pub fn update_sibling_pois(
    kg: &SpatialKg,
    kg_state: &mut KgState,
    poi: usize,
    tc_new: &[f64],
    tz_new: &[f64],
    params: &GateParams,
    strategy: Strategy,
) -> Vec<usize> {
    let cand_cat: Vec<f64> = tc_new
        .iter()
        .zip(&kg_state.rel_vecs[REL_BELONG_TO])
        .map(|(t, r)| t - r)
        .collect();
    let cand_zone: Vec<f64> = tz_new
        .iter()
        .zip(&kg_state.rel_vecs[REL_LOCATE_AT])
        .map(|(t, r)| t - r)
        .collect();
    let cat = sibling_pass(kg_state, cat_siblings(kg, poi), &cand_cat, params, strategy);
    let zone = sibling_pass(kg_state, zone_siblings(kg, poi), &cand_zone, params, strategy);
    let mut ids: Vec<usize> = cat.iter().chain(&zone).map(|s| s.poi).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Everything `backward_event` needs to differentiate one applied event.
#[derive(Debug, Clone)]
pub struct EventTrace {
    pub user_id: String,
    pub poi: usize,
    pub cat: usize,
    pub zone: usize,
    pub n_pois: usize,
    pub n_cats: usize,
    pub n_zones: usize,
    pub t_flat: Vec<f64>,
    /// ‖W_ctx · t_flat‖ before normalization (0 when T̃ = 0).
    pub ctx_norm: f64,
    pub t_tilde: Vec<f64>,
    pub u_old: Vec<f64>,
    pub h_old: Vec<f64>,
    pub cand_u: Vec<f64>,
    pub cand_p: Vec<f64>,
    pub alpha_u: f64,
    pub alpha_u_deriv: f64,
    pub alpha_p: f64,
    pub alpha_p_deriv: f64,
    pub tc_old: Vec<f64>,
    pub tz_old: Vec<f64>,
    pub alpha_tc: f64,
    pub alpha_tc_deriv: f64,
    pub alpha_tz: f64,
    pub alpha_tz_deriv: f64,
    pub h_new: Vec<f64>,
    /// Tail candidates h_new + rel.
    pub cand_tail_cat: Vec<f64>,
    pub cand_tail_zone: Vec<f64>,
    /// Sibling candidates t_new − rel.
    pub cand_cat: Vec<f64>,
    pub cand_zone: Vec<f64>,
    pub cat_pass: Vec<SiblingStep>,
    pub zone_pass: Vec<SiblingStep>,
    pub strategy: Strategy,
}

/// Apply one visit event and record every intermediate.
pub fn apply_event_traced(
    state: &mut EnvState,
    kg: &SpatialKg,
    user_id: &str,
    poi_id: &str,
    ctx: &TemporalContext,
    params: &GateParams,
    strategy: Strategy,
) -> Result<EventTrace> {
    let poi = kg.poi_index(poi_id)?;
    if !state.users.contains_key(user_id) {
        return Err(Error::Lookup(format!("unknown user `{user_id}`")));
    }
    let dim = params.dim;
    if state.dim() != dim {
        return Err(Error::Config(format!(
            "state dim {} does not match gate dim {dim}",
            state.dim()
        )));
    }

    let y = math::matvec(&params.w_ctx, dim, params.ctx_cols, {
        if ctx.counts.len() != params.ctx_cols {
            return Err(Error::Config(format!(
                "context has {} entries but the projection expects {}",
                ctx.counts.len(),
                params.ctx_cols
            )));
        }
        &ctx.counts
    });
    let ctx_norm = math::l2_norm(&y);
    let mut t_tilde = y;
    math::normalize(&mut t_tilde);

    let u_old = state.users[user_id].clone();
    let h_old = state.kg_state.poi_vecs[poi].clone();

    let (alpha_u, alpha_u_deriv) = gate_eval(&u_old, &params.w_gate_u, params.b_gate_u, strategy);
    let cand_u = interact(&h_old, &t_tilde, &params.w_user, dim);
    let u_new = blend(&u_old, &cand_u, alpha_u);

    let (alpha_p, alpha_p_deriv) = gate_eval(&h_old, &params.w_gate_p, params.b_gate_p, strategy);
    let cand_p = interact(&u_old, &t_tilde, &params.w_poi, dim);
    let h_new = blend(&h_old, &cand_p, alpha_p);

    if !math::all_finite(&u_new) || !math::all_finite(&h_new) {
        return Err(Error::NonFinite(format!(
            "state update for user `{user_id}` at step {}",
            state.step
        )));
    }
    state.users.insert(user_id.to_string(), u_new);
    state.kg_state.poi_vecs[poi] = h_new.clone();

    let cat = kg.poi_category[poi];
    let zone = kg.poi_zone[poi];
    let tc_old = state.kg_state.cat_vecs[cat].clone();
    let tz_old = state.kg_state.zone_vecs[zone].clone();
    let rel_b = state.kg_state.rel_vecs[REL_BELONG_TO].clone();
    let rel_l = state.kg_state.rel_vecs[REL_LOCATE_AT].clone();

    let (alpha_tc, alpha_tc_deriv) = gate_eval(&tc_old, &params.w_gate_t, params.b_gate_t, strategy);
    let cand_tail_cat: Vec<f64> = h_new.iter().zip(&rel_b).map(|(h, r)| h + r).collect();
    let tc_new = blend(&tc_old, &cand_tail_cat, alpha_tc);

    let (alpha_tz, alpha_tz_deriv) = gate_eval(&tz_old, &params.w_gate_t, params.b_gate_t, strategy);
    let cand_tail_zone: Vec<f64> = h_new.iter().zip(&rel_l).map(|(h, r)| h + r).collect();
    let tz_new = blend(&tz_old, &cand_tail_zone, alpha_tz);

    state.kg_state.cat_vecs[cat] = tc_new.clone();
    state.kg_state.zone_vecs[zone] = tz_new.clone();

    let cand_cat: Vec<f64> = tc_new.iter().zip(&rel_b).map(|(t, r)| t - r).collect();
    let cand_zone: Vec<f64> = tz_new.iter().zip(&rel_l).map(|(t, r)| t - r).collect();
    let cat_pass = sibling_pass(
        &mut state.kg_state,
        cat_siblings(kg, poi),
        &cand_cat,
        params,
        strategy,
    );
    let zone_pass = sibling_pass(
        &mut state.kg_state,
        zone_siblings(kg, poi),
        &cand_zone,
        params,
        strategy,
    );

    state.step += 1;

    Ok(EventTrace {
        user_id: user_id.to_string(),
        poi,
        cat,
        zone,
        n_pois: state.kg_state.poi_vecs.len(),
        n_cats: state.kg_state.cat_vecs.len(),
        n_zones: state.kg_state.zone_vecs.len(),
        t_flat: ctx.counts.clone(),
        ctx_norm,
        t_tilde,
        u_old,
        h_old,
        cand_u,
        cand_p,
        alpha_u,
        alpha_u_deriv,
        alpha_p,
        alpha_p_deriv,
        tc_old,
        tz_old,
        alpha_tc,
        alpha_tc_deriv,
        alpha_tz,
        alpha_tz_deriv,
        h_new,
        cand_tail_cat,
        cand_tail_zone,
        cand_cat,
        cand_zone,
        cat_pass,
        zone_pass,
        strategy,
    })
}

/// Apply one visit event (user → visited POI → tails → siblings; step + 1).
pub fn apply_event(
    state: &mut EnvState,
    kg: &SpatialKg,
    user_id: &str,
    poi_id: &str,
    ctx: &TemporalContext,
    params: &GateParams,
    strategy: Strategy,
) -> Result<()> {
    apply_event_traced(state, kg, user_id, poi_id, ctx, params, strategy).map(|_| ())
}

/// Graph readout: average all node vectors of the belonging graph (POI heads
/// + category tails) and of the location graph (POI heads + zone tails), then
/// average the two. An empty branch contributes a zero vector.
pub fn pool_kg(kg_state: &KgState) -> Vec<f64> {
    let dim = kg_state.dim;
    let branch = |tails: &[Vec<f64>]| -> Vec<f64> {
        let n = kg_state.poi_vecs.len() + tails.len();
        let mut acc = vec![0.0; dim];
        if n == 0 {
            return acc;
        }
        for v in kg_state.poi_vecs.iter().chain(tails) {
            math::axpy(&mut acc, 1.0, v);
        }
        math::scale(&mut acc, 1.0 / n as f64);
        acc
    };
    let a = branch(&kg_state.cat_vecs);
    let b = branch(&kg_state.zone_vecs);
    a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// The agent's state vector: user vector followed by the pooled KG readout.
pub fn build_state(user_vec: &[f64], kg_state: &KgState) -> Vec<f64> {
    let mut s = user_vec.to_vec();
    s.extend(pool_kg(kg_state));
    s
}

/// Gradient accumulator shaped like `GateParams`.
#[derive(Debug, Clone)]
pub struct GateGrads {
    pub w_gate_u: Vec<f64>,
    pub b_gate_u: f64,
    pub w_gate_p: Vec<f64>,
    pub b_gate_p: f64,
    pub w_gate_t: Vec<f64>,
    pub b_gate_t: f64,
    pub w_gate_s: Vec<f64>,
    pub b_gate_s: f64,
    pub w_user: Vec<f64>,
    pub w_poi: Vec<f64>,
    pub w_ctx: Vec<f64>,
}

impl GateGrads {
    pub fn zeros(dim: usize, ctx_cols: usize) -> Self {
        GateGrads {
            w_gate_u: vec![0.0; dim],
            b_gate_u: 0.0,
            w_gate_p: vec![0.0; dim],
            b_gate_p: 0.0,
            w_gate_t: vec![0.0; dim],
            b_gate_t: 0.0,
            w_gate_s: vec![0.0; dim],
            b_gate_s: 0.0,
            w_user: vec![0.0; dim * dim],
            w_poi: vec![0.0; dim * dim],
            w_ctx: vec![0.0; dim * ctx_cols],
        }
    }
}

/// One reversed sibling pass: consumes the pending deltas of its outputs,
/// accumulates sibling-gate gradients, adds the candidate share to the tail
/// delta, and leaves each sibling's input delta pending for the pass before.
fn reverse_sibling_pass(
    pass: &[SiblingStep],
    cand: &[f64],
    params: &GateParams,
    grads: &mut GateGrads,
    pending: &mut BTreeMap<usize, Vec<f64>>,
    delta_tail: &mut [f64],
) {
    for step in pass.iter().rev() {
        let delta_out = pending
            .remove(&step.poi)
            .expect("every pass output has a pending delta");
        let diff: Vec<f64> = step.input.iter().zip(cand).map(|(i, c)| i - c).collect();
        let coeff = math::dot(&delta_out, &diff) * step.alpha_deriv;
        math::axpy(&mut grads.w_gate_s, coeff, &step.input);
        grads.b_gate_s += coeff;
        math::axpy(delta_tail, 1.0 - step.alpha, &delta_out);
        let mut delta_in: Vec<f64> = delta_out.iter().map(|d| step.alpha * d).collect();
        math::axpy(&mut delta_in, coeff, &params.w_gate_s);
        pending.insert(step.poi, delta_in);
    }
}

/// Accumulate d(loss)/d(params) for one traced event, given the loss gradient
/// on the post-event user vector (`delta_user`) and on the pooled KG readout
/// (`delta_pool`). Only this event's update path is differentiated; the
/// pre-event vectors are treated as constants.
pub fn backward_event(
    trace: &EventTrace,
    params: &GateParams,
    delta_user: &[f64],
    delta_pool: &[f64],
    grads: &mut GateGrads,
) {
    let dim = params.dim;
    let belong_n = (trace.n_pois + trace.n_cats) as f64;
    let locate_n = (trace.n_pois + trace.n_zones) as f64;
    // Pool readout coefficients: each POI vector appears in both branch
    // means, each tail in one.
    let c_poi = 0.5 * (1.0 / belong_n + 1.0 / locate_n);
    let c_cat = 0.5 / belong_n;
    let c_zone = 0.5 / locate_n;

    let scaled = |c: f64| -> Vec<f64> { delta_pool.iter().map(|d| c * d).collect() };
    let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for step in trace.cat_pass.iter().chain(&trace.zone_pass) {
        pending.entry(step.poi).or_insert_with(|| scaled(c_poi));
    }
    let mut delta_tc = scaled(c_cat);
    let mut delta_tz = scaled(c_zone);
    let mut delta_h_new = scaled(c_poi);

    reverse_sibling_pass(
        &trace.zone_pass,
        &trace.cand_zone,
        params,
        grads,
        &mut pending,
        &mut delta_tz,
    );
    reverse_sibling_pass(
        &trace.cat_pass,
        &trace.cand_cat,
        params,
        grads,
        &mut pending,
        &mut delta_tc,
    );
    // What's left pending sits on pre-event sibling vectors: constants.

    for (delta_t, alpha, alpha_deriv, t_old, cand_tail) in [
        (&delta_tc, trace.alpha_tc, trace.alpha_tc_deriv, &trace.tc_old, &trace.cand_tail_cat),
        (&delta_tz, trace.alpha_tz, trace.alpha_tz_deriv, &trace.tz_old, &trace.cand_tail_zone),
    ] {
        let diff: Vec<f64> = t_old.iter().zip(cand_tail).map(|(t, c)| t - c).collect();
        let coeff = math::dot(delta_t, &diff) * alpha_deriv;
        math::axpy(&mut grads.w_gate_t, coeff, t_old);
        grads.b_gate_t += coeff;
        math::axpy(&mut delta_h_new, 1.0 - alpha, delta_t);
    }

    // Visited POI: h_new = α_p h_old + (1 − α_p) W_p (u_old ⊙ T̃).
    let diff_p: Vec<f64> = trace
        .h_old
        .iter()
        .zip(&trace.cand_p)
        .map(|(h, c)| h - c)
        .collect();
    let coeff_p = math::dot(&delta_h_new, &diff_p) * trace.alpha_p_deriv;
    math::axpy(&mut grads.w_gate_p, coeff_p, &trace.h_old);
    grads.b_gate_p += coeff_p;
    let delta_cand_p: Vec<f64> = delta_h_new.iter().map(|d| (1.0 - trace.alpha_p) * d).collect();
    let had_u = math::hadamard(&trace.u_old, &trace.t_tilde);
    math::add_outer(&mut grads.w_poi, &delta_cand_p, &had_u, 1.0);
    let mut delta_ttilde = math::hadamard(
        &math::matvec_t(&params.w_poi, dim, dim, &delta_cand_p),
        &trace.u_old,
    );

    // User: u_new = α_u u_old + (1 − α_u) W_u (h_old ⊙ T̃).
    let diff_u: Vec<f64> = trace
        .u_old
        .iter()
        .zip(&trace.cand_u)
        .map(|(u, c)| u - c)
        .collect();
    let coeff_u = math::dot(delta_user, &diff_u) * trace.alpha_u_deriv;
    math::axpy(&mut grads.w_gate_u, coeff_u, &trace.u_old);
    grads.b_gate_u += coeff_u;
    let delta_cand_u: Vec<f64> = delta_user.iter().map(|d| (1.0 - trace.alpha_u) * d).collect();
    let had_h = math::hadamard(&trace.h_old, &trace.t_tilde);
    math::add_outer(&mut grads.w_user, &delta_cand_u, &had_h, 1.0);
    let delta_from_user = math::hadamard(
        &math::matvec_t(&params.w_user, dim, dim, &delta_cand_u),
        &trace.h_old,
    );
    math::axpy(&mut delta_ttilde, 1.0, &delta_from_user);

    // Context projection through the normalization: with y = W_ctx t_flat and
    // T̃ = y/‖y‖, dL/dy = (dL/dT̃ − T̃ (T̃ · dL/dT̃)) / ‖y‖.
    if trace.ctx_norm > 0.0 {
        let along = math::dot(&trace.t_tilde, &delta_ttilde);
        let delta_y: Vec<f64> = delta_ttilde
            .iter()
            .zip(&trace.t_tilde)
            .map(|(d, t)| (d - t * along) / trace.ctx_norm)
            .collect();
        math::add_outer(&mut grads.w_ctx, &delta_y, &trace.t_flat, 1.0);
    }
}

/// SGD step: params -= lr * grads.
pub fn apply_gate_grads(params: &mut GateParams, grads: &GateGrads, lr: f64) {
    math::axpy(&mut params.w_gate_u, -lr, &grads.w_gate_u);
    params.b_gate_u -= lr * grads.b_gate_u;
    math::axpy(&mut params.w_gate_p, -lr, &grads.w_gate_p);
    params.b_gate_p -= lr * grads.b_gate_p;
    math::axpy(&mut params.w_gate_t, -lr, &grads.w_gate_t);
    params.b_gate_t -= lr * grads.b_gate_t;
    math::axpy(&mut params.w_gate_s, -lr, &grads.w_gate_s);
    params.b_gate_s -= lr * grads.b_gate_s;
    math::axpy(&mut params.w_user, -lr, &grads.w_user);
    math::axpy(&mut params.w_poi, -lr, &grads.w_poi);
    math::axpy(&mut params.w_ctx, -lr, &grads.w_ctx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::CheckinEvent;
    use crate::spatial_kg::build_spatial_kg;
    use crate::ingest::GridSpec;

    fn event(poi: &str, cat: &str, lat: f64, lon: f64) -> CheckinEvent {
        CheckinEvent {
            user_id: "u1".into(),
            poi_id: poi.into(),
            category_id: cat.into(),
            category_name: cat.into(),
            lat,
            lon,
            timestamp: 0,
        }
    }

    fn grid_1x2() -> GridSpec {
        GridSpec {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
            rows: 1,
            cols: 2,
        }
    }

    /// p0: cat c0, zone 0. p1: cat c0, zone 1. p2: cat c1, zone 0.
    /// Visiting p0 -> category sibling p1, zone sibling p2.
    fn tiny_kg() -> SpatialKg {
        let events = vec![
            event("p0", "c0", 0.5, 0.1),
            event("p1", "c0", 0.5, 0.8),
            event("p2", "c1", 0.5, 0.2),
        ];
        build_spatial_kg(&events, &grid_1x2()).unwrap().0
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_state(kg: &SpatialKg, dim: usize, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kg_state = KgState {
            dim,
            poi_vecs: (0..kg.n_pois()).map(|_| rand_vec(&mut rng, dim)).collect(),
            cat_vecs: (0..kg.n_categories()).map(|_| rand_vec(&mut rng, dim)).collect(),
            zone_vecs: (0..kg.n_zones()).map(|_| rand_vec(&mut rng, dim)).collect(),
            rel_vecs: vec![rand_vec(&mut rng, dim), rand_vec(&mut rng, dim)],
        };
        let users = BTreeMap::from([
            ("u1".to_string(), rand_vec(&mut rng, dim)),
            ("u2".to_string(), rand_vec(&mut rng, dim)),
        ]);
        EnvState::new(users, kg_state).unwrap()
    }

    fn ctx_with(counts: Vec<f64>) -> TemporalContext {
        TemporalContext {
            window_id: 0,
            start: 0,
            end: 3600,
            counts,
        }
    }

    const DIM: usize = 4;
    const CTX: usize = 6; // 2 cells x 3

    #[test]
    fn project_context_zero_traffic_is_zero() {
        let params = GateParams::init(DIM, CTX, 1);
        let t = project_context(&ctx_with(vec![0.0; CTX]), &params).unwrap();
        assert_eq!(t, vec![0.0; DIM]);
    }

    #[test]
    fn project_context_selector_rows() {
        // One-cell grid (3 context entries), W_ctx = [I3; 0]: T̃ is the
        // normalized (inner, in, out) padded with a zero.
        let mut params = GateParams::init(DIM, 3, 1);
        params.w_ctx = vec![0.0; DIM * 3];
        for i in 0..3 {
            params.w_ctx[i * 3 + i] = 1.0;
        }
        let t = project_context(&ctx_with(vec![3.0, 0.0, 4.0]), &params).unwrap();
        assert!((t[0] - 0.6).abs() < 1e-12);
        assert_eq!(t[1], 0.0);
        assert!((t[2] - 0.8).abs() < 1e-12);
        assert_eq!(t[3], 0.0);
    }

    #[test]
    fn project_context_norm_is_zero_or_one() {
        let params = GateParams::init(DIM, CTX, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let counts: Vec<f64> = (0..CTX).map(|_| rng.gen_range(0.0..30.0f64).floor()).collect();
            let t = project_context(&ctx_with(counts), &params).unwrap();
            let n = math::l2_norm(&t);
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn project_context_dim_mismatch_is_config_error() {
        let params = GateParams::init(DIM, CTX, 1);
        assert!(matches!(
            project_context(&ctx_with(vec![0.0; 9]), &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn interact_zero_context_is_zero() {
        let params = GateParams::init(DIM, CTX, 1);
        let out = interact(&[1.0; DIM], &[0.0; DIM], &params.w_user, DIM);
        assert_eq!(out, vec![0.0; DIM]);
    }

    #[test]
    fn interact_identity_passes_through() {
        let mut w = vec![0.0; DIM * DIM];
        for i in 0..DIM {
            w[i * DIM + i] = 1.0;
        }
        let h = [0.3, -0.7, 0.2, 0.9];
        assert_eq!(interact(&h, &[1.0; DIM], &w, DIM), h.to_vec());
    }

    #[test]
    fn interact_matches_loop_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_vec(&mut rng, DIM * DIM);
        let x = rand_vec(&mut rng, DIM);
        let c = rand_vec(&mut rng, DIM);
        let got = interact(&x, &c, &w, DIM);
        for i in 0..DIM {
            let mut want = 0.0;
            for j in 0..DIM {
                want += w[i * DIM + j] * x[j] * c[j];
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_at_zero_is_half() {
        assert_eq!(gate(&[1.0, 2.0], &[0.0, 0.0], 0.0), 0.5);
    }

    #[test]
    fn gate_clamps_extremes() {
        assert_eq!(gate(&[0.0, 0.0], &[0.0, 0.0], 20.0), GATE_MAX);
        assert_eq!(gate(&[0.0, 0.0], &[0.0, 0.0], -20.0), GATE_MIN);
    }

    #[test]
    fn gate_matches_direct_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let x = rand_vec(&mut rng, DIM);
            let w = rand_vec(&mut rng, DIM);
            let b = rng.gen_range(-1.0..1.0);
            let want = 1.0 / (1.0 + (-(math::dot(&w, &x) + b)).exp());
            assert!((gate(&x, &w, b) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn update_user_identity_when_gate_saturates() {
        let mut params = GateParams::init(DIM, CTX, 1);
        params.b_gate_u = 20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = rand_vec(&mut rng, DIM);
        let h = rand_vec(&mut rng, DIM);
        let t = rand_vec(&mut rng, DIM);
        let out = update_user(&u, &h, &t, &params, Strategy::Up2);
        for i in 0..DIM {
            assert!((out[i] - u[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn update_user_zero_context_halves() {
        let mut params = GateParams::init(DIM, CTX, 1);
        params.w_gate_u = vec![0.0; DIM];
        params.b_gate_u = 0.0;
        let u = [0.4, -1.2, 0.0, 2.0];
        let out = update_user(&u, &[1.0; DIM], &[0.0; DIM], &params, Strategy::Up2);
        let want: Vec<f64> = u.iter().map(|x| 0.5 * x).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn updates_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = GateParams::init(DIM, CTX, 3);
        for _ in 0..200 {
            let u = rand_vec(&mut rng, DIM);
            let h = rand_vec(&mut rng, DIM);
            let mut t = rand_vec(&mut rng, DIM);
            math::normalize(&mut t);
            let cand = interact(&h, &t, &params.w_user, DIM);
            let out = update_user(&u, &h, &t, &params, Strategy::Up2);
            for i in 0..DIM {
                let (lo, hi) = (u[i].min(cand[i]), u[i].max(cand[i]));
                assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn update_tails_saturated_gate_keeps_tails() {
        let mut params = GateParams::init(DIM, CTX, 1);
        params.b_gate_t = 20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = rand_vec(&mut rng, DIM);
        let rb = rand_vec(&mut rng, DIM);
        let rl = rand_vec(&mut rng, DIM);
        let tc = rand_vec(&mut rng, DIM);
        let tz = rand_vec(&mut rng, DIM);
        let (nc, nz) = update_tails(&h, &rb, &rl, &tc, &tz, &params, Strategy::Up2);
        for i in 0..DIM {
            assert!((nc[i] - tc[i]).abs() < 1e-4);
            assert!((nz[i] - tz[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn update_tails_open_gate_is_translation() {
        let mut params = GateParams::init(DIM, CTX, 1);
        params.b_gate_t = -20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = rand_vec(&mut rng, DIM);
        let rb = rand_vec(&mut rng, DIM);
        let rl = rand_vec(&mut rng, DIM);
        let tc = rand_vec(&mut rng, DIM);
        let tz = rand_vec(&mut rng, DIM);
        let (nc, nz) = update_tails(&h, &rb, &rl, &tc, &tz, &params, Strategy::Up2);
        for i in 0..DIM {
            assert!((nc[i] - (h[i] + rb[i])).abs() < 1e-4);
            assert!((nz[i] - (h[i] + rl[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn lone_poi_has_no_siblings() {
        let events = vec![event("p0", "c0", 0.5, 0.1), event("p1", "c1", 0.5, 0.8)];
        let kg = build_spatial_kg(&events, &grid_1x2()).unwrap().0;
        let mut state = rand_state(&kg, DIM, 1);
        let before = state.kg_state.clone();
        let params = GateParams::init(DIM, CTX, 1);
        let tc = vec![0.1; DIM];
        let tz = vec![0.2; DIM];
        let updated = update_sibling_pois(&kg, &mut state.kg_state, 0, &tc, &tz, &params, Strategy::Up2);
        assert!(updated.is_empty());
        assert_eq!(state.kg_state, before);
    }

    #[test]
    fn sibling_updates_match_hand_stepping() {
        let kg = tiny_kg();
        let mut state = rand_state(&kg, DIM, 2);
        let params = GateParams::init(DIM, CTX, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tc_new = rand_vec(&mut rng, DIM);
        let tz_new = rand_vec(&mut rng, DIM);

        // Independent sequential replication: category pass (p1), then zone
        // pass (p2), reading current vectors.
        let mut expect = state.kg_state.poi_vecs.clone();
        for (sib, t_new, rel) in [
            (1usize, &tc_new, &state.kg_state.rel_vecs[REL_BELONG_TO]),
            (2usize, &tz_new, &state.kg_state.rel_vecs[REL_LOCATE_AT]),
        ] {
            let old = expect[sib].clone();
            let a = gate(&old, &params.w_gate_s, params.b_gate_s);
            for i in 0..DIM {
                expect[sib][i] = a * old[i] + (1.0 - a) * (t_new[i] - rel[i]);
            }
        }

        update_sibling_pois(&kg, &mut state.kg_state, 0, &tc_new, &tz_new, &params, Strategy::Up2);
        assert_eq!(state.kg_state.poi_vecs, expect);
    }

    #[test]
    fn apply_event_unknown_ids_are_lookup_errors() {
        let kg = tiny_kg();
        let mut state = rand_state(&kg, DIM, 3);
        let params = GateParams::init(DIM, CTX, 1);
        let ctx = ctx_with(vec![0.0; CTX]);
        let err = apply_event(&mut state, &kg, "ghost", "p0", &ctx, &params, Strategy::Up2);
        assert!(matches!(err, Err(Error::Lookup(_))));
        let err = apply_event(&mut state, &kg, "u1", "p9", &ctx, &params, Strategy::Up2);
        assert!(matches!(err, Err(Error::Lookup(_))));
    }

    #[test]
    fn up1_zero_context_closed_form() {
        let kg = tiny_kg();
        let mut state = rand_state(&kg, DIM, 4);
        let before = state.clone();
        let params = GateParams::init(DIM, CTX, 6);
        let ctx = ctx_with(vec![0.0; CTX]);
        apply_event(&mut state, &kg, "u1", "p0", &ctx, &params, Strategy::Up1).unwrap();

        // With T̃ = 0 both interaction candidates vanish and every α is 0.5.
        let rel_b = &before.kg_state.rel_vecs[REL_BELONG_TO];
        let rel_l = &before.kg_state.rel_vecs[REL_LOCATE_AT];
        let u_old = &before.users["u1"];
        let h_old = &before.kg_state.poi_vecs[0];
        for i in 0..DIM {
            let u_new = 0.5 * u_old[i];
            assert!((state.users["u1"][i] - u_new).abs() < 1e-12);
            let h_new = 0.5 * h_old[i];
            assert!((state.kg_state.poi_vecs[0][i] - h_new).abs() < 1e-12);
            let tc_new = 0.5 * before.kg_state.cat_vecs[0][i] + 0.5 * (h_new + rel_b[i]);
            assert!((state.kg_state.cat_vecs[0][i] - tc_new).abs() < 1e-12);
            let tz_new = 0.5 * before.kg_state.zone_vecs[0][i] + 0.5 * (h_new + rel_l[i]);
            assert!((state.kg_state.zone_vecs[0][i] - tz_new).abs() < 1e-12);
            // Category sibling p1, then zone sibling p2.
            let p1 = 0.5 * before.kg_state.poi_vecs[1][i] + 0.5 * (tc_new - rel_b[i]);
            assert!((state.kg_state.poi_vecs[1][i] - p1).abs() < 1e-12);
            let p2 = 0.5 * before.kg_state.poi_vecs[2][i] + 0.5 * (tz_new - rel_l[i]);
            assert!((state.kg_state.poi_vecs[2][i] - p2).abs() < 1e-12);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn saturated_gates_freeze_the_state() {
        let kg = tiny_kg();
        let mut state = rand_state(&kg, DIM, 5);
        let before = state.clone();
        let mut params = GateParams::init(DIM, CTX, 7);
        params.b_gate_u = 20.0;
        params.b_gate_p = 20.0;
        params.b_gate_t = 20.0;
        params.b_gate_s = 20.0;
        let ctx = ctx_with(vec![2.0, 1.0, 0.0, 3.0, 5.0, 1.0]);
        apply_event(&mut state, &kg, "u1", "p0", &ctx, &params, Strategy::Up2).unwrap();

        assert_eq!(state.step, before.step + 1);
        for (a, b) in state.users["u1"].iter().zip(&before.users["u1"]) {
            assert!((a - b).abs() < 1e-4);
        }
        for (va, vb) in state.kg_state.poi_vecs.iter().zip(&before.kg_state.poi_vecs) {
            for (a, b) in va.iter().zip(vb) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn repeat_application_keeps_evolving() {
        let kg = tiny_kg();
        let mut once = rand_state(&kg, DIM, 6);
        let params = GateParams::init(DIM, CTX, 8);
        let ctx = ctx_with(vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
        let mut twice = once.clone();
        apply_event(&mut once, &kg, "u1", "p0", &ctx, &params, Strategy::Up2).unwrap();
        apply_event(&mut twice, &kg, "u1", "p0", &ctx, &params, Strategy::Up2).unwrap();
        apply_event(&mut twice, &kg, "u1", "p0", &ctx, &params, Strategy::Up2).unwrap();
        assert_ne!(once.users["u1"], twice.users["u1"]);
        assert_ne!(once.kg_state.poi_vecs[0], twice.kg_state.poi_vecs[0]);
    }

    #[test]
    fn apply_event_is_local() {
        // Two disjoint components: {p0, p1} share c0/cell0, {p2, p3} share
        // c1/cell1. Visiting p0 must leave p2, p3, c1, zone1, u2 and every
        // rel vector bit-identical.
        let events = vec![
            event("p0", "c0", 0.5, 0.1),
            event("p1", "c0", 0.5, 0.2),
            event("p2", "c1", 0.5, 0.8),
            event("p3", "c1", 0.5, 0.9),
        ];
        let kg = build_spatial_kg(&events, &grid_1x2()).unwrap().0;
        let mut state = rand_state(&kg, DIM, 7);
        let before = state.clone();
        let params = GateParams::init(DIM, CTX, 9);
        let ctx = ctx_with(vec![1.0, 2.0, 0.0, 0.0, 4.0, 1.0]);
        apply_event(&mut state, &kg, "u1", "p0", &ctx, &params, Strategy::Up2).unwrap();

        assert_eq!(state.kg_state.poi_vecs[2], before.kg_state.poi_vecs[2]);
        assert_eq!(state.kg_state.poi_vecs[3], before.kg_state.poi_vecs[3]);
        assert_eq!(state.kg_state.cat_vecs[1], before.kg_state.cat_vecs[1]);
        assert_eq!(state.kg_state.zone_vecs[1], before.kg_state.zone_vecs[1]);
        assert_eq!(state.users["u2"], before.users["u2"]);
        assert_eq!(state.kg_state.rel_vecs, before.kg_state.rel_vecs);
        assert_ne!(state.kg_state.poi_vecs[0], before.kg_state.poi_vecs[0]);
        assert_ne!(state.kg_state.poi_vecs[1], before.kg_state.poi_vecs[1]);
    }

    #[test]
    fn pool_of_equal_vectors_is_that_vector() {
        let v = vec![0.25, -1.5, 3.0, 0.0];
        let kg_state = KgState {
            dim: DIM,
            poi_vecs: vec![v.clone(); 3],
            cat_vecs: vec![v.clone(); 2],
            zone_vecs: vec![v.clone(); 2],
            rel_vecs: vec![vec![0.0; DIM]; 2],
        };
        let g = pool_kg(&kg_state);
        for i in 0..DIM {
            assert!((g[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_matches_brute_force_average() {
        let kg = tiny_kg();
        let state = rand_state(&kg, DIM, 8);
        let g = pool_kg(&state.kg_state);
        for i in 0..DIM {
            let belong: f64 = state
                .kg_state
                .poi_vecs
                .iter()
                .chain(&state.kg_state.cat_vecs)
                .map(|v| v[i])
                .sum::<f64>()
                / (kg.n_pois() + kg.n_categories()) as f64;
            let locate: f64 = state
                .kg_state
                .poi_vecs
                .iter()
                .chain(&state.kg_state.zone_vecs)
                .map(|v| v[i])
                .sum::<f64>()
                / (kg.n_pois() + kg.n_zones()) as f64;
            assert!((g[i] - 0.5 * (belong + locate)).abs() < 1e-12);
        }
    }

    /// J(params) = c_u · u_new + c_g · pool(kg after event): finite
    /// differences over every parameter entry must match `backward_event`.
    #[test]
    fn backward_matches_finite_differences() {
        let kg = tiny_kg();
        let base_state = rand_state(&kg, DIM, 9);
        let base_params = GateParams::init(DIM, CTX, 10);
        let ctx = ctx_with(vec![1.0, 2.0, 0.0, 3.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c_u = rand_vec(&mut rng, DIM);
        let c_g = rand_vec(&mut rng, DIM);

        let objective = |params: &GateParams, strategy: Strategy| -> f64 {
            let mut st = base_state.clone();
            apply_event(&mut st, &kg, "u1", "p0", &ctx, params, strategy).unwrap();
            math::dot(&c_u, &st.users["u1"]) + math::dot(&c_g, &pool_kg(&st.kg_state))
        };

        for strategy in [Strategy::Up2, Strategy::Up1] {
            let mut st = base_state.clone();
            let trace =
                apply_event_traced(&mut st, &kg, "u1", "p0", &ctx, &base_params, strategy).unwrap();
            let mut grads = GateGrads::zeros(DIM, CTX);
            backward_event(&trace, &base_params, &c_u, &c_g, &mut grads);

            let step = 1e-5;
            let check = |name: &str,
                             edit: &dyn Fn(&mut GateParams, usize, f64),
                             len: usize,
                             analytic: &dyn Fn(&GateGrads, usize) -> f64| {
                for i in 0..len {
                    let mut up = base_params.clone();
                    edit(&mut up, i, step);
                    let mut dn = base_params.clone();
                    edit(&mut dn, i, -step);
                    let fd = (objective(&up, strategy) - objective(&dn, strategy)) / (2.0 * step);
                    let a = analytic(&grads, i);
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                    assert!(
                        rel <= 1e-4,
                        "{strategy:?} {name}[{i}]: fd={fd} analytic={a}"
                    );
                }
            };

            check("w_gate_u", &|p, i, d| p.w_gate_u[i] += d, DIM, &|g, i| g.w_gate_u[i]);
            check("b_gate_u", &|p, _, d| p.b_gate_u += d, 1, &|g, _| g.b_gate_u);
            check("w_gate_p", &|p, i, d| p.w_gate_p[i] += d, DIM, &|g, i| g.w_gate_p[i]);
            check("b_gate_p", &|p, _, d| p.b_gate_p += d, 1, &|g, _| g.b_gate_p);
            check("w_gate_t", &|p, i, d| p.w_gate_t[i] += d, DIM, &|g, i| g.w_gate_t[i]);
            check("b_gate_t", &|p, _, d| p.b_gate_t += d, 1, &|g, _| g.b_gate_t);
            check("w_gate_s", &|p, i, d| p.w_gate_s[i] += d, DIM, &|g, i| g.w_gate_s[i]);
            check("b_gate_s", &|p, _, d| p.b_gate_s += d, 1, &|g, _| g.b_gate_s);
            check("w_user", &|p, i, d| p.w_user[i] += d, DIM * DIM, &|g, i| g.w_user[i]);
            check("w_poi", &|p, i, d| p.w_poi[i] += d, DIM * DIM, &|g, i| g.w_poi[i]);
            check("w_ctx", &|p, i, d| p.w_ctx[i] += d, DIM * CTX, &|g, i| g.w_ctx[i]);
        }
    }

    #[test]
    fn up1_backward_has_no_gate_gradients() {
        let kg = tiny_kg();
        let mut state = rand_state(&kg, DIM, 11);
        let params = GateParams::init(DIM, CTX, 12);
        let ctx = ctx_with(vec![1.0, 0.0, 2.0, 1.0, 0.0, 1.0]);
        let trace =
            apply_event_traced(&mut state, &kg, "u1", "p0", &ctx, &params, Strategy::Up1).unwrap();
        let mut grads = GateGrads::zeros(DIM, CTX);
        backward_event(&trace, &params, &[1.0; DIM], &[1.0; DIM], &mut grads);
        assert!(grads.w_gate_u.iter().all(|&x| x == 0.0));
        assert!(grads.w_gate_s.iter().all(|&x| x == 0.0));
        assert_eq!(grads.b_gate_t, 0.0);
        assert!(grads.w_user.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn mismatched_user_dim_rejected() {
        let kg = tiny_kg();
        let state = rand_state(&kg, DIM, 12);
        let mut users = state.users.clone();
        users.insert("u3".into(), vec![0.0; DIM + 1]);
        assert!(EnvState::new(users, state.kg_state.clone()).is_err());
    }
}

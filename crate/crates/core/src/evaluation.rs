//! Chronological split, greedy rollout over the held-out shard, and the four
//! report metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::QNetwork;
use crate::environment::{apply_event, build_state, EnvState, GateParams, Strategy};
use crate::ingest::{CheckinEvent, ContextTimeline};
use crate::math;
use crate::reward::{distance_km, CategoryVectors};
use crate::spatial_kg::SpatialKg;
use crate::{Error, Result};

/// Per user, the earliest ⌈frac·n⌉ events form the train shard and the
/// remainder the test shard; both come back merged in global time order
/// (ties keep stream order).
pub fn split_chronological(
    events: &[CheckinEvent],
    train_frac: f64,
) -> Result<(Vec<CheckinEvent>, Vec<CheckinEvent>)> {
    if !(train_frac.is_finite() && (0.0..=1.0).contains(&train_frac)) {
        return Err(Error::Config(format!(
            "train_frac {train_frac} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| events[i].timestamp);

    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for ev in events {
        *totals.entry(ev.user_id.as_str()).or_insert(0) += 1;
    }
    let cuts: BTreeMap<&str, usize> = totals
        .iter()
        .map(|(&u, &n)| (u, (train_frac * n as f64).ceil() as usize))
        .collect();

    let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in order {
        let ev = &events[i];
        let seen = taken.entry(ev.user_id.as_str()).or_insert(0);
        *seen += 1;
        if *seen <= cuts[ev.user_id.as_str()] {
            train.push(ev.clone());
        } else {
            test.push(ev.clone());
        }
    }
    Ok((train, test))
}

fn weighted_over_classes(
    pairs: &[(usize, usize)],
    term: impl Fn(f64, f64, f64) -> f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no (real, predicted) pairs to score".into()));
    }
    // per class: true positives, false positives, support
    let mut classes: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
    for &(real, pred) in pairs {
        classes.entry(real).or_default()[2] += 1.0;
        if real == pred {
            classes.entry(real).or_default()[0] += 1.0;
        } else {
            classes.entry(pred).or_default()[1] += 1.0;
        }
    }
    // one trailing division keeps the all-correct case exactly 1
    let weighted: f64 = classes.values().map(|c| c[2] * term(c[0], c[1], c[2])).sum();
    Ok(weighted / pairs.len() as f64)
}

/// Support-weighted one-vs-rest precision over (real, predicted) category
/// pairs: Σ_k (n_k/n)·TP_k/(TP_k+FP_k), empty-denominator terms scoring 0.
pub fn prec_cat(pairs: &[(usize, usize)]) -> Result<f64> {
    weighted_over_classes(pairs, |tp, fp, _| if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 })
}

/// Support-weighted one-vs-rest recall; a class's denominator is its support.
pub fn rec_cat(pairs: &[(usize, usize)]) -> Result<f64> {
    weighted_over_classes(pairs, |tp, _, support| if support > 0.0 { tp / support } else { 0.0 })
}

/// Mean cosine between real and predicted category vectors.
pub fn avg_sim(pairs: &[(usize, usize)], vectors: &CategoryVectors) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no (real, predicted) pairs to score".into()));
    }
    let vec_of = |cat: usize| {
        vectors
            .vecs
            .get(cat)
            .ok_or_else(|| Error::Lookup(format!("no vector for category index {cat}")))
    };
    let mut total = 0.0;
    for &(real, pred) in pairs {
        total += math::cosine(vec_of(real)?, vec_of(pred)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Mean haversine distance between real and predicted POI coordinates.
pub fn avg_dist(pairs: &[(usize, usize)], kg: &SpatialKg) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no (real, predicted) pairs to score".into()));
    }
    let coords_of = |poi: usize| {
        kg.poi_coords
            .get(poi)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no coordinates for POI index {poi}")))
    };
    let mut total = 0.0;
    for &(real, pred) in pairs {
        total += distance_km(coords_of(real)?, coords_of(pred)?);
    }
    Ok(total / pairs.len() as f64)
}

/// How the next POI is chosen during the test rollout.
pub enum Predictor<'a> {
    /// argmax over the online Q head.
    Greedy(&'a QNetwork),
    /// Always answers the true next POI; protocol sanity check.
    Oracle,
}

/// One logged prediction; enough to recompute every metric offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredPair {
    pub user_id: String,
    pub timestamp: i64,
    pub real_poi: usize,
    pub pred_poi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub events: usize,
    pub prec_cat: f64,
    pub rec_cat: f64,
    pub avg_sim: f64,
    pub avg_dist_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prec_cat: f64,
    pub rec_cat: f64,
    pub avg_sim: f64,
    pub avg_dist_km: f64,
    pub events: usize,
    pub skipped_users: usize,
    pub per_user: BTreeMap<String, UserEval>,
    pub fingerprint: String,
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub pairs: Vec<PredPair>,
}

fn scores(
    pairs: &[&PredPair],
    kg: &SpatialKg,
    vectors: &CategoryVectors,
) -> Result<(f64, f64, f64, f64)> {
    let cat_pairs: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (kg.poi_category[p.real_poi], kg.poi_category[p.pred_poi]))
        .collect();
    let poi_pairs: Vec<(usize, usize)> = pairs.iter().map(|p| (p.real_poi, p.pred_poi)).collect();
    Ok((
        prec_cat(&cat_pairs)?,
        rec_cat(&cat_pairs)?,
        avg_sim(&cat_pairs, vectors)?,
        avg_dist(&poi_pairs, kg)?,
    ))
}

/// Roll the predictor over the test stream against a private copy of the
/// environment. After each prediction the true event is applied, so later
/// predictions see the up-to-date state; the caller's environment is
/// untouched. Users without a trained state are skipped and tallied.
pub fn evaluate(
    predictor: Predictor,
    env: &EnvState,
    kg: &SpatialKg,
    timeline: &ContextTimeline,
    params: &GateParams,
    strategy: Strategy,
    test: &[CheckinEvent],
    vectors: &CategoryVectors,
    fingerprint: &str,
) -> Result<EvalOutput> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test stream".into()));
    }
    let mut env = env.clone();
    let mut pairs: Vec<PredPair> = Vec::new();
    let mut skipped: BTreeSet<String> = BTreeSet::new();
    for ev in test {
        let real = kg.poi_index(&ev.poi_id)?;
        if !env.users.contains_key(&ev.user_id) {
            skipped.insert(ev.user_id.clone());
            continue;
        }
        let pred = match predictor {
            Predictor::Greedy(net) => {
                let s = build_state(&env.users[&ev.user_id], &env.kg_state);
                math::argmax(&net.forward(&s))
            }
            Predictor::Oracle => real,
        };
        pairs.push(PredPair {
            user_id: ev.user_id.clone(),
            timestamp: ev.timestamp,
            real_poi: real,
            pred_poi: pred,
        });
        apply_event(
            &mut env,
            kg,
            &ev.user_id,
            &ev.poi_id,
            timeline.at(ev.timestamp),
            params,
            strategy,
        )?;
    }
    if pairs.is_empty() {
        return Err(Error::Invalid(
            "every test user was unseen during training; nothing to score".into(),
        ));
    }

    let all: Vec<&PredPair> = pairs.iter().collect();
    let (prec, rec, sim, dist) = scores(&all, kg, vectors)?;
    let mut per_user = BTreeMap::new();
    let users: BTreeSet<&str> = pairs.iter().map(|p| p.user_id.as_str()).collect();
    for user in users {
        let mine: Vec<&PredPair> = pairs.iter().filter(|p| p.user_id == user).collect();
        let (p, r, s, d) = scores(&mine, kg, vectors)?;
        per_user.insert(
            user.to_string(),
            UserEval { events: mine.len(), prec_cat: p, rec_cat: r, avg_sim: s, avg_dist_km: d },
        );
    }
    Ok(EvalOutput {
        report: EvalReport {
            prec_cat: prec,
            rec_cat: rec,
            avg_sim: sim,
            avg_dist_km: dist,
            events: pairs.len(),
            skipped_users: skipped.len(),
            per_user,
            fingerprint: fingerprint.to_string(),
        },
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{GridSpec, TemporalContext};
    use crate::spatial_kg::{build_spatial_kg, KgState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn ev(user: &str, poi: &str, cat: &str, lat: f64, lon: f64, ts: i64) -> CheckinEvent {
        CheckinEvent {
            user_id: user.into(),
            poi_id: poi.into(),
            category_id: cat.into(),
            category_name: cat.into(),
            lat,
            lon,
            timestamp: ts,
        }
    }

    #[test]
    fn split_ten_events_gives_nine_one() {
        let events: Vec<_> = (0..10)
            .map(|i| ev("u", &format!("p{i}"), "c", 40.1, -73.9, i * 10))
            .collect();
        let (train, test) = split_chronological(&events, 0.9).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].timestamp, 90);
    }

    #[test]
    fn split_single_event_goes_to_train() {
        let events = vec![ev("u", "p", "c", 40.1, -73.9, 5)];
        let (train, test) = split_chronological(&events, 0.9).unwrap();
        assert_eq!(train.len(), 1);
        assert!(test.is_empty());
    }

    #[test]
    fn split_shards_are_disjoint_and_time_ordered() {
        let mut events = Vec::new();
        for i in 0..7 {
            events.push(ev("a", &format!("p{i}"), "c", 40.1, -73.9, 100 - i * 3));
            events.push(ev("b", &format!("q{i}"), "c", 40.2, -73.8, i * 5));
        }
        let (train, test) = split_chronological(&events, 0.5).unwrap();
        assert_eq!(train.len() + test.len(), events.len());
        for shard in [&train, &test] {
            assert!(shard.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
        // every event lands in exactly one shard
        let key = |e: &CheckinEvent| (e.user_id.clone(), e.poi_id.clone(), e.timestamp);
        let mut all: Vec<_> = train.iter().chain(&test).map(key).collect();
        all.sort();
        let mut orig: Vec<_> = events.iter().map(key).collect();
        orig.sort();
        assert_eq!(all, orig);
        // per user, everything in train predates everything in test
        for user in ["a", "b"] {
            let last_train = train.iter().filter(|e| e.user_id == user).map(|e| e.timestamp).max();
            let first_test = test.iter().filter(|e| e.user_id == user).map(|e| e.timestamp).min();
            if let (Some(lt), Some(ft)) = (last_train, first_test) {
                assert!(lt <= ft);
            }
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_chronological(&[], 1.5).is_err());
        assert!(split_chronological(&[], f64::NAN).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let pairs = vec![(0, 0), (1, 1), (2, 2), (1, 1)];
        assert_eq!(prec_cat(&pairs).unwrap(), 1.0);
        assert_eq!(rec_cat(&pairs).unwrap(), 1.0);
    }

    #[test]
    fn mixed_pairs_match_hand_confusion_matrix() {
        // real [A,A,B], pred [A,B,B]: prec = (2/3)·1 + (1/3)·(1/2) = 5/6,
        // rec = (2/3)·(1/2) + (1/3)·1 = 2/3.
        let pairs = vec![(0, 0), (0, 1), (1, 1)];
        assert!((prec_cat(&pairs).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((rec_cat(&pairs).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_all_wrong_scores_zero() {
        let pairs = vec![(0, 1), (0, 1)];
        assert_eq!(prec_cat(&pairs).unwrap(), 0.0);
        assert_eq!(rec_cat(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn metric_helpers_reject_empty_input() {
        let vectors = CategoryVectors { dim: 2, vecs: vec![] };
        assert!(prec_cat(&[]).is_err());
        assert!(rec_cat(&[]).is_err());
        assert!(avg_sim(&[], &vectors).is_err());
    }

    #[test]
    fn avg_sim_identical_and_orthogonal() {
        let vectors = CategoryVectors {
            dim: 2,
            vecs: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
        };
        assert!((avg_sim(&[(0, 0), (1, 1)], &vectors).unwrap() - 1.0).abs() < 1e-12);
        assert!(avg_sim(&[(0, 1)], &vectors).unwrap().abs() < 1e-12);
    }

    #[test]
    fn avg_sim_matches_per_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vectors = CategoryVectors {
            dim: 3,
            vecs: (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        };
        let pairs = vec![(0, 1), (2, 3), (3, 3), (1, 0)];
        let by_hand: f64 = pairs
            .iter()
            .map(|&(a, b)| math::cosine(&vectors.vecs[a], &vectors.vecs[b]))
            .sum::<f64>()
            / pairs.len() as f64;
        assert!((avg_sim(&pairs, &vectors).unwrap() - by_hand).abs() < 1e-12);
    }

    fn three_poi_world() -> (SpatialKg, EnvState, GateParams, ContextTimeline, CategoryVectors, Vec<CheckinEvent>)
    {
        let grid = GridSpec {
            lat_min: 40.0,
            lat_max: 41.0,
            lon_min: -74.0,
            lon_max: -73.0,
            rows: 2,
            cols: 2,
        };
        let events = vec![
            ev("a", "p0", "c0", 40.2, -73.8, 0),
            ev("a", "p1", "c1", 40.8, -73.2, 10),
            ev("b", "p2", "c0", 40.3, -73.7, 20),
            ev("a", "p2", "c0", 40.3, -73.7, 30),
            ev("b", "p0", "c0", 40.2, -73.8, 40),
        ];
        let (kg, _) = build_spatial_kg(&events, &grid).unwrap();
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut vec4 = || (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
        let kg_state = KgState {
            dim,
            poi_vecs: (0..kg.poi_ids.len()).map(|_| vec4()).collect(),
            cat_vecs: (0..kg.category_ids.len()).map(|_| vec4()).collect(),
            zone_vecs: (0..kg.zone_cells.len()).map(|_| vec4()).collect(),
            rel_vecs: vec![vec4(), vec4()],
        };
        let mut users = BTreeMap::new();
        users.insert("a".to_string(), vec4());
        users.insert("b".to_string(), vec4());
        let env = EnvState::new(users, kg_state).unwrap();
        let cells = grid.cell_count();
        let params = GateParams::init(dim, cells * 3, 31);
        let mut ctx = TemporalContext::zeros(0, 0, 1000, cells);
        ctx.counts[2] = 1.0;
        let timeline = ContextTimeline::new(vec![ctx], cells);
        let vectors = CategoryVectors {
            dim: 2,
            vecs: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        (kg, env, params, timeline, vectors, events)
    }

    #[test]
    fn avg_dist_zero_on_exact_and_mean_otherwise() {
        let (kg, ..) = three_poi_world();
        assert_eq!(avg_dist(&[(0, 0), (1, 1)], &kg).unwrap(), 0.0);
        let d01 = distance_km(kg.poi_coords[0], kg.poi_coords[1]);
        let d02 = distance_km(kg.poi_coords[0], kg.poi_coords[2]);
        let got = avg_dist(&[(0, 1), (0, 2)], &kg).unwrap();
        assert!((got - (d01 + d02) / 2.0).abs() < 1e-12);
        // order of pairs is irrelevant
        assert_eq!(got, avg_dist(&[(0, 2), (0, 1)], &kg).unwrap());
    }

    #[test]
    fn oracle_rollout_reports_perfect_metrics() {
        let (kg, env, params, timeline, vectors, events) = three_poi_world();
        let out = evaluate(
            Predictor::Oracle,
            &env,
            &kg,
            &timeline,
            &params,
            Strategy::Up2,
            &events,
            &vectors,
            "fp",
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(
            (r.prec_cat, r.rec_cat, r.avg_sim, r.avg_dist_km),
            (1.0, 1.0, 1.0, 0.0)
        );
        assert_eq!(r.events, events.len());
        assert_eq!(r.skipped_users, 0);
        assert_eq!(r.fingerprint, "fp");
        assert!(out.pairs.iter().all(|p| p.real_poi == p.pred_poi));
    }

    #[test]
    fn empty_test_stream_is_an_error() {
        let (kg, env, params, timeline, vectors, _) = three_poi_world();
        assert!(evaluate(
            Predictor::Oracle,
            &env,
            &kg,
            &timeline,
            &params,
            Strategy::Up2,
            &[],
            &vectors,
            "",
        )
        .is_err());
    }

    #[test]
    fn unknown_test_user_is_skipped_and_tallied() {
        let (kg, mut env, params, timeline, vectors, events) = three_poi_world();
        env.users.remove("b");
        let out = evaluate(
            Predictor::Oracle,
            &env,
            &kg,
            &timeline,
            &params,
            Strategy::Up2,
            &events,
            &vectors,
            "",
        )
        .unwrap();
        assert_eq!(out.report.skipped_users, 1);
        assert_eq!(out.report.events, 3);
        assert!(out.pairs.iter().all(|p| p.user_id == "a"));
        assert!(!out.report.per_user.contains_key("b"));
    }

    #[test]
    fn caller_environment_is_untouched() {
        let (kg, env, params, timeline, vectors, events) = three_poi_world();
        let before = env.clone();
        let _ = evaluate(
            Predictor::Oracle,
            &env,
            &kg,
            &timeline,
            &params,
            Strategy::Up2,
            &events,
            &vectors,
            "",
        )
        .unwrap();
        assert_eq!(env, before);
    }

    #[test]
    fn greedy_report_matches_recomputation_from_pairs() {
        let (kg, env, params, timeline, vectors, events) = three_poi_world();
        let net = QNetwork::new(2 * env.dim(), &[8], kg.poi_ids.len(), 17);
        let out = evaluate(
            Predictor::Greedy(&net),
            &env,
            &kg,
            &timeline,
            &params,
            Strategy::Up2,
            &events,
            &vectors,
            "",
        )
        .unwrap();
        let cat_pairs: Vec<_> = out
            .pairs
            .iter()
            .map(|p| (kg.poi_category[p.real_poi], kg.poi_category[p.pred_poi]))
            .collect();
        let poi_pairs: Vec<_> = out.pairs.iter().map(|p| (p.real_poi, p.pred_poi)).collect();
        assert_eq!(out.report.prec_cat, prec_cat(&cat_pairs).unwrap());
        assert_eq!(out.report.rec_cat, rec_cat(&cat_pairs).unwrap());
        assert_eq!(out.report.avg_sim, avg_sim(&cat_pairs, &vectors).unwrap());
        assert_eq!(out.report.avg_dist_km, avg_dist(&poi_pairs, &kg).unwrap());
    }

    #[test]
    fn metrics_ignore_user_relabeling() {
        let (kg, env, params, timeline, vectors, events) = three_poi_world();
        let rename = |e: &CheckinEvent, from: &str, to: &str| {
            let mut e = e.clone();
            if e.user_id == from {
                e.user_id = to.to_string();
            }
            e
        };
        let renamed: Vec<_> = events
            .iter()
            .map(|e| rename(&rename(e, "a", "x"), "b", "y"))
            .collect();
        let mut env2 = env.clone();
        let ua = env2.users.remove("a").unwrap();
        let ub = env2.users.remove("b").unwrap();
        env2.users.insert("x".to_string(), ua);
        env2.users.insert("y".to_string(), ub);

        let net = QNetwork::new(2 * env.dim(), &[8], kg.poi_ids.len(), 17);
        let run = |env: &EnvState, evs: &[CheckinEvent]| {
            evaluate(
                Predictor::Greedy(&net),
                env,
                &kg,
                &timeline,
                &params,
                Strategy::Up2,
                evs,
                &vectors,
                "",
            )
            .unwrap()
            .report
        };
        let a = run(&env, &events);
        let b = run(&env2, &renamed);
        assert_eq!(
            (a.prec_cat, a.rec_cat, a.avg_sim, a.avg_dist_km),
            (b.prec_cat, b.rec_cat, b.avg_sim, b.avg_dist_km)
        );
    }
}

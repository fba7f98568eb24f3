//! The five pipeline stages behind the subcommands. Every artifact lands in
//! `run.out_dir`, carries the fingerprint and seed it was produced under,
//! and is written deterministically: equal fingerprints mean byte-identical
//! files.
//!
//! Seed layout: `run.seed` drives the KG embedding trainer and the Q-network
//! stack (which internally derives its action/replay streams); the pipeline
//! adds fixed offsets for its own stages — +11 user-profile init, +12 reward
//! calibration, +13 gate-parameter init — so no two stages share a stream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use nextvisit::agent::{EpisodeRecord, Trainer};
use nextvisit::environment::{EnvState, GateParams};
use nextvisit::evaluation::{evaluate, split_chronological, EvalReport, PredPair, Predictor};
use nextvisit::ingest::{
    compute_temporal_contexts, parse_checkins, parse_taxi, CheckinEvent, ContextTimeline,
    ParseReport,
};
use nextvisit::reward::{
    calibrate_baselines, CategoryVectors, RewardBaselines, WordVectors,
};
use nextvisit::spatial_kg::{
    build_spatial_kg, export_initial_state, train_transd, KgBuildReport, KgEmbeddings, SpatialKg,
    TransDConfig,
};
use nextvisit::{Error, Result};

use crate::config::{build_fingerprint, config_fingerprint, BaselineSource, RunConfig};

const SEED_USERS: u64 = 11;
const SEED_CALIBRATE: u64 = 12;
const SEED_GATES: u64 = 13;

/// Everything the data/build stage produces, cached under the build
/// fingerprint so training knobs don't force a re-ingest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildArtifacts {
    pub fingerprint: String,
    pub seed: u64,
    pub events: Vec<CheckinEvent>,
    pub checkin_report: ParseReport,
    pub taxi_report: ParseReport,
    pub timeline: ContextTimeline,
    pub kg: SpatialKg,
    pub kg_report: KgBuildReport,
    pub embeddings: KgEmbeddings,
    pub epoch_losses: Vec<f64>,
    pub env: EnvState,
    pub vectors: CategoryVectors,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub fingerprint: String,
    pub seed: u64,
    pub rounds: usize,
    pub samples_per_component: usize,
    pub skipped_events: usize,
    pub baselines: RewardBaselines,
}

/// Checkpoint: the whole trainer plus the per-episode log so a resumed run
/// rewrites the same episode CSV an uninterrupted one would.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub fingerprint: String,
    pub seed: u64,
    pub trainer: Trainer,
    pub records: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub fingerprint: String,
    pub seed: u64,
    pub report: EvalReport,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `NEXTVISIT_CACHE_DIR` if set, `out_dir/cache` otherwise.
pub fn cache_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("NEXTVISIT_CACHE_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.run.out_dir.join("cache"),
    }
}

pub fn build_cache_path(cfg: &RunConfig) -> PathBuf {
    cache_dir(cfg).join(format!("build-{}.json", build_fingerprint(cfg)))
}

pub fn baselines_path(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join(format!("baselines-{}.json", config_fingerprint(cfg)))
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join(format!("checkpoint-{}.json", config_fingerprint(cfg)))
}

pub fn episodes_path(cfg: &RunConfig) -> PathBuf {
    cfg.run.out_dir.join(format!("episodes-{}.csv", config_fingerprint(cfg)))
}

fn mode_tag(oracle: bool) -> &'static str {
    if oracle {
        "-oracle"
    } else {
        ""
    }
}

pub fn report_json_path(cfg: &RunConfig, oracle: bool) -> PathBuf {
    cfg.run
        .out_dir
        .join(format!("report-{}{}.json", config_fingerprint(cfg), mode_tag(oracle)))
}

pub fn report_tsv_path(cfg: &RunConfig, oracle: bool) -> PathBuf {
    cfg.run
        .out_dir
        .join(format!("report-{}{}.tsv", config_fingerprint(cfg), mode_tag(oracle)))
}

pub fn pairs_path(cfg: &RunConfig, oracle: bool) -> PathBuf {
    cfg.run
        .out_dir
        .join(format!("pairs-{}{}.csv", config_fingerprint(cfg), mode_tag(oracle)))
}

/// Run the data stage, or reload it from cache. Returns the artifacts and
/// whether they came from cache.
pub fn ensure_build(cfg: &RunConfig) -> Result<(BuildArtifacts, bool)> {
    let fp = build_fingerprint(cfg);
    let cache = build_cache_path(cfg);
    if cache.is_file() {
        let arts: BuildArtifacts = read_json(&cache)?;
        if arts.fingerprint == fp {
            return Ok((arts, true));
        }
    }
    let arts = run_build(cfg, fp)?;
    write_json(&cache, &arts)?;
    Ok((arts, false))
}

fn run_build(cfg: &RunConfig, fingerprint: String) -> Result<BuildArtifacts> {
    let format = cfg.data.format.to_csv_format()?;
    let (events, checkin_report) =
        parse_checkins(&cfg.data.checkins, &format, &cfg.data.checkin_columns)?;
    if events.is_empty() {
        return Err(Error::Invalid(format!(
            "no usable check-ins in {}",
            cfg.data.checkins.display()
        )));
    }
    let (trips, taxi_report) = parse_taxi(&cfg.data.taxi, &format, &cfg.data.taxi_columns)?;
    let contexts = compute_temporal_contexts(&trips, &cfg.grid, cfg.context.window_len)?;
    let timeline = ContextTimeline::new(contexts, cfg.grid.cell_count());

    let (kg, kg_report) = build_spatial_kg(&events, &cfg.grid)?;
    let tcfg = TransDConfig {
        dim: cfg.dims.n_kg,
        epochs: cfg.kg.epochs,
        lr: cfg.kg.lr,
        margin: cfg.kg.margin,
        neg_per_pos: cfg.kg.neg_per_pos,
        seed: cfg.run.seed,
    };
    let (embeddings, epoch_losses) = train_transd(&kg, &tcfg)?;
    let kg_state = export_initial_state(&embeddings, &kg);

    let words = WordVectors::load(&cfg.data.word_vectors)?;
    if words.dim() != cfg.dims.d_w {
        return Err(Error::Config(format!(
            "word vectors in {} have dim {} but d_w is {}",
            cfg.data.word_vectors.display(),
            words.dim(),
            cfg.dims.d_w
        )));
    }
    let vectors = CategoryVectors::build(&kg.category_names, &words);

    let mut per_user: BTreeMap<String, Vec<CheckinEvent>> = BTreeMap::new();
    for ev in &events {
        per_user.entry(ev.user_id.clone()).or_default().push(ev.clone());
    }
    let mut graphs = BTreeMap::new();
    for (user, mut evs) in per_user {
        evs.sort_by_key(|e| e.timestamp);
        let graph = nextvisit::profile_init::build_mobility_graph(&evs, cfg.profile.fraction)?;
        graphs.insert(user, graph);
    }
    let users = nextvisit::profile_init::init_user_states(
        &graphs,
        cfg.dims.n_user,
        cfg.profile.method,
        cfg.run.seed + SEED_USERS,
    )?;
    let env = EnvState::new(users, kg_state)?;

    Ok(BuildArtifacts {
        fingerprint,
        seed: cfg.run.seed,
        events,
        checkin_report,
        taxi_report,
        timeline,
        kg,
        kg_report,
        embeddings,
        epoch_losses,
        env,
        vectors,
    })
}

pub fn init_gates(cfg: &RunConfig) -> GateParams {
    GateParams::init(
        cfg.dims.n_kg,
        cfg.grid.cell_count() * 3,
        cfg.run.seed + SEED_GATES,
    )
}

/// Calibrate on the train shard with a uniform-random policy and persist the
/// result under the config fingerprint.
pub fn run_calibration(cfg: &RunConfig, arts: &BuildArtifacts) -> Result<BaselineArtifact> {
    let (train, _test) = split_chronological(&arts.events, cfg.train.train_frac)?;
    if train.is_empty() {
        return Err(Error::Invalid("the train shard is empty".into()));
    }
    let rounds = match cfg.reward.baselines {
        BaselineSource::Calibrate { rounds } => rounds,
        BaselineSource::Fixed { .. } => 8,
    };
    let n_pois = arts.kg.n_pois();
    let params = init_gates(cfg);
    let (baselines, report) = calibrate_baselines(
        &arts.env,
        &arts.kg,
        &params,
        cfg.env.strategy,
        &arts.timeline,
        &train,
        &arts.vectors,
        |_state, rng| rng.gen_range(0..n_pois),
        rounds,
        cfg.run.seed + SEED_CALIBRATE,
    )?;
    let artifact = BaselineArtifact {
        fingerprint: config_fingerprint(cfg),
        seed: cfg.run.seed,
        rounds: report.rounds,
        samples_per_component: report.samples_per_component,
        skipped_events: report.skipped_events,
        baselines,
    };
    write_json(&baselines_path(cfg), &artifact)?;
    Ok(artifact)
}

/// Resolve the baselines the reward needs: fixed constants straight from the
/// config, or the calibration artifact (computing it on first use). r1 runs
/// never read the baselines, so they get the zero default without touching
/// disk.
pub fn ensure_baselines(cfg: &RunConfig, arts: &BuildArtifacts) -> Result<RewardBaselines> {
    use nextvisit::reward::RewardKind;
    match cfg.reward.baselines {
        BaselineSource::Fixed { b_d, b_c, b_p } => Ok(RewardBaselines { b_d, b_c, b_p }),
        BaselineSource::Calibrate { .. } => {
            if cfg.reward.kind == RewardKind::R1 {
                return Ok(RewardBaselines::default());
            }
            let path = baselines_path(cfg);
            if path.is_file() {
                let artifact: BaselineArtifact = read_json(&path)?;
                if artifact.fingerprint == config_fingerprint(cfg) {
                    return Ok(artifact.baselines);
                }
            }
            Ok(run_calibration(cfg, arts)?.baselines)
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub resumed_from: usize,
    /// False when `--pause-after` stopped the run before the last episode.
    pub finished: bool,
}

/// Train (or finish training) the configured number of episodes, saving a
/// checkpoint every `checkpoint_every` episodes and at exit. `pause_after`
/// caps how many episodes this invocation may run.
pub fn run_training(
    cfg: &RunConfig,
    arts: &BuildArtifacts,
    pause_after: Option<usize>,
    mut on_episode: impl FnMut(&EpisodeRecord),
) -> Result<TrainOutcome> {
    let cfgfp = config_fingerprint(cfg);
    let (train, _test) = split_chronological(&arts.events, cfg.train.train_frac)?;
    if train.is_empty() {
        return Err(Error::Invalid("the train shard is empty".into()));
    }
    let baselines = ensure_baselines(cfg, arts)?;

    let ckpt = checkpoint_path(cfg);
    let mut state = if ckpt.is_file() {
        let state: TrainState = read_json(&ckpt)?;
        if state.fingerprint != cfgfp {
            return Err(Error::Invalid(format!(
                "checkpoint {} was written under fingerprint {} but the config hashes to {cfgfp}",
                ckpt.display(),
                state.fingerprint
            )));
        }
        state
    } else {
        let trainer = Trainer::new(
            cfg.training_config(baselines),
            arts.env.clone(),
            init_gates(cfg),
            arts.kg.n_pois(),
        )?;
        TrainState { fingerprint: cfgfp, seed: cfg.run.seed, trainer, records: Vec::new() }
    };

    let resumed_from = state.trainer.episode;
    let mut ran = 0usize;
    while state.trainer.episode < cfg.train.episodes {
        if let Some(cap) = pause_after {
            if ran >= cap {
                break;
            }
        }
        let record =
            state.trainer.run_episode(&arts.kg, &arts.timeline, &train, &arts.vectors)?;
        on_episode(&record);
        state.records.push(record);
        ran += 1;
        if state.trainer.episode % cfg.train.checkpoint_every == 0 {
            write_json(&ckpt, &state)?;
        }
    }
    write_json(&ckpt, &state)?;
    write_episode_csv(&episodes_path(cfg), &state)?;
    let finished = state.trainer.episode >= cfg.train.episodes;
    Ok(TrainOutcome { state, resumed_from, finished })
}

fn write_episode_csv(path: &Path, state: &TrainState) -> Result<()> {
    let mut out = String::from("fingerprint,seed,episode,steps,mean_loss,mean_reward,accuracy\n");
    for r in &state.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            state.fingerprint, state.seed, r.episode, r.steps, r.mean_loss, r.mean_reward,
            r.accuracy
        ));
    }
    write_text(path, &out)
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub pairs: Vec<PredPair>,
}

/// Score the held-out shard. Greedy evaluation continues from the trained
/// checkpoint's environment; the oracle needs no checkpoint and starts from
/// the built initial state.
pub fn run_eval(cfg: &RunConfig, arts: &BuildArtifacts, oracle: bool) -> Result<EvalOutcome> {
    let cfgfp = config_fingerprint(cfg);
    let (_train, test) = split_chronological(&arts.events, cfg.train.train_frac)?;
    if test.is_empty() {
        return Err(Error::Invalid(
            "the test shard is empty; lower train.train_frac".into(),
        ));
    }

    let out = if oracle {
        let params = init_gates(cfg);
        evaluate(
            Predictor::Oracle,
            &arts.env,
            &arts.kg,
            &arts.timeline,
            &params,
            cfg.env.strategy,
            &test,
            &arts.vectors,
            &cfgfp,
        )?
    } else {
        let ckpt = checkpoint_path(cfg);
        if !ckpt.is_file() {
            return Err(Error::Invalid(format!(
                "no checkpoint for this config; run `nextvisit train` first (expected {})",
                ckpt.display()
            )));
        }
        let state: TrainState = read_json(&ckpt)?;
        if state.fingerprint != cfgfp {
            return Err(Error::Invalid(format!(
                "checkpoint {} was written under fingerprint {} but the config hashes to {cfgfp}",
                ckpt.display(),
                state.fingerprint
            )));
        }
        evaluate(
            Predictor::Greedy(&state.trainer.q_e),
            &state.trainer.env,
            &arts.kg,
            &arts.timeline,
            &state.trainer.params,
            cfg.env.strategy,
            &test,
            &arts.vectors,
            &cfgfp,
        )?
    };

    let artifact = ReportArtifact {
        fingerprint: cfgfp.clone(),
        seed: cfg.run.seed,
        report: out.report.clone(),
    };
    write_json(&report_json_path(cfg, oracle), &artifact)?;
    write_text(&report_tsv_path(cfg, oracle), &report_tsv(&artifact))?;
    write_pairs_csv(&pairs_path(cfg, oracle), &cfgfp, cfg.run.seed, &out.pairs)?;
    Ok(EvalOutcome { report: out.report, pairs: out.pairs })
}

pub const REPORT_TSV_HEADER: &str =
    "fingerprint\tseed\tevents\tskipped_users\tprec_cat\trec_cat\tavg_sim\tavg_dist_km";

pub fn report_tsv_row(artifact: &ReportArtifact) -> String {
    let r = &artifact.report;
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        artifact.fingerprint,
        artifact.seed,
        r.events,
        r.skipped_users,
        r.prec_cat,
        r.rec_cat,
        r.avg_sim,
        r.avg_dist_km
    )
}

fn report_tsv(artifact: &ReportArtifact) -> String {
    format!("{}\n{}\n", REPORT_TSV_HEADER, report_tsv_row(artifact))
}

fn write_pairs_csv(path: &Path, fingerprint: &str, seed: u64, pairs: &[PredPair]) -> Result<()> {
    let mut out = String::from("fingerprint,seed,user_id,timestamp,real_poi,pred_poi\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fingerprint, seed, p.user_id, p.timestamp, p.real_poi, p.pred_poi
        ));
    }
    write_text(path, &out)
}

/// One sweep axis: a dotted config key and the raw values to try.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_axis(raw: &str) -> Result<SweepAxis> {
    let (key, values) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--axis `{raw}` is not key=v1,v2,...")))?;
    let values: Vec<String> =
        values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if key.is_empty() || values.is_empty() {
        return Err(Error::Config(format!("--axis `{raw}` has no values")));
    }
    Ok(SweepAxis { key: key.to_string(), values })
}

/// Cartesian product in axis order; each point is the `key=value` list to
/// append to the base overrides.
pub fn sweep_points(axes: &[SweepAxis]) -> Result<Vec<Vec<String>>> {
    if axes.is_empty() {
        return Err(Error::Config("a sweep needs at least one --axis".into()));
    }
    let mut points: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for point in &points {
            for v in &axis.values {
                let mut p = point.clone();
                p.push(format!("{}={}", axis.key, v));
                next.push(p);
            }
        }
        points = next;
    }
    Ok(points)
}

pub const SWEEP_CSV_HEADER: &str = "point,fingerprint,seed,metric,value";

/// Long-form rows for one evaluated sweep point.
pub fn sweep_rows(point: &[String], artifact: &ReportArtifact) -> Vec<String> {
    let label = point.join(";");
    let r = &artifact.report;
    [
        ("prec_cat", r.prec_cat),
        ("rec_cat", r.rec_cat),
        ("avg_sim", r.avg_sim),
        ("avg_dist_km", r.avg_dist_km),
    ]
    .iter()
    .map(|(metric, value)| {
        format!("{},{},{},{},{}", label, artifact.fingerprint, artifact.seed, metric, value)
    })
    .collect()
}

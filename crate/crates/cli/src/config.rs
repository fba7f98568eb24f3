//! Declarative run configuration: one TOML file describes the whole
//! pipeline, scalar fields can be overridden with `--set key.path=value`,
//! and every artifact is keyed by a fingerprint of the resulting config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nextvisit::agent::{AgentConfig, TrainingConfig, Variant};
use nextvisit::environment::Strategy;
use nextvisit::ingest::{CheckinColumns, CsvFormat, GridSpec, TaxiColumns};
use nextvisit::profile_init::InitMethod;
use nextvisit::replay::PriorityKind;
use nextvisit::reward::{RewardBaselines, RewardKind, RewardWeights};
use nextvisit::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub grid: GridSpec,
    pub context: ContextSection,
    pub dims: DimsSection,
    pub kg: KgSection,
    pub profile: ProfileSection,
    pub reward: RewardSection,
    pub env: EnvSection,
    pub agent: AgentSection,
    pub train: TrainSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            grid: GridSpec {
                lat_min: 0.0,
                lat_max: 1.0,
                lon_min: 0.0,
                lon_max: 1.0,
                rows: 1,
                cols: 1,
            },
            context: ContextSection::default(),
            dims: DimsSection::default(),
            kg: KgSection::default(),
            profile: ProfileSection::default(),
            reward: RewardSection::default(),
            env: EnvSection::default(),
            agent: AgentSection::default(),
            train: TrainSection::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub checkins: PathBuf,
    pub taxi: PathBuf,
    pub word_vectors: PathBuf,
    pub format: FormatSection,
    pub checkin_columns: CheckinColumns,
    pub taxi_columns: TaxiColumns,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatSection {
    pub delimiter: String,
    pub has_header: bool,
}

impl Default for FormatSection {
    fn default() -> Self {
        FormatSection { delimiter: ",".into(), has_header: true }
    }
}

impl FormatSection {
    pub fn to_csv_format(&self) -> Result<CsvFormat> {
        let bytes = self.delimiter.as_bytes();
        if bytes.len() != 1 {
            return Err(Error::Config(format!(
                "delimiter `{}` must be a single byte",
                self.delimiter
            )));
        }
        Ok(CsvFormat { delimiter: bytes[0], has_header: self.has_header })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    /// Window length in seconds.
    pub window_len: i64,
}

impl Default for ContextSection {
    fn default() -> Self {
        ContextSection { window_len: 3600 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsSection {
    pub n_user: usize,
    pub n_kg: usize,
    /// Word-vector dimensionality the vectors file must match.
    pub d_w: usize,
}

impl Default for DimsSection {
    fn default() -> Self {
        DimsSection { n_user: 16, n_kg: 16, d_w: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgSection {
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub neg_per_pos: usize,
}

impl Default for KgSection {
    fn default() -> Self {
        KgSection { epochs: 100, lr: 0.01, margin: 1.0, neg_per_pos: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub method: InitMethod,
    /// Share of each user's earliest events feeding the mobility graph.
    pub fraction: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection { method: InitMethod::SpectralLite, fraction: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub kind: RewardKind,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub baselines: BaselineSource,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            kind: RewardKind::R2,
            lambda_d: 1.0,
            lambda_c: 1.0,
            lambda_p: 1.0,
            baselines: BaselineSource::default(),
        }
    }
}

impl RewardSection {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            lambda_d: self.lambda_d,
            lambda_c: self.lambda_c,
            lambda_p: self.lambda_p,
        }
    }
}

/// Where r2's baseline vector comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum BaselineSource {
    /// Random-policy rollouts; first quartile of each component.
    Calibrate { rounds: usize },
    Fixed { b_d: f64, b_c: f64, b_p: f64 },
}

impl Default for BaselineSource {
    fn default() -> Self {
        BaselineSource::Calibrate { rounds: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub strategy: Strategy,
    /// Step size for gate/context-projection updates.
    pub lr: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection { strategy: Strategy::Up2, lr: 1e-5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let a = AgentConfig::default();
        AgentSection {
            variant: a.variant,
            hidden: a.hidden,
            gamma: a.gamma,
            lr: a.lr,
            sync_every: a.sync_every,
            eps_start: a.eps_start,
            eps_end: a.eps_end,
        }
    }
}

impl AgentSection {
    pub fn to_agent_config(&self) -> AgentConfig {
        AgentConfig {
            variant: self.variant,
            hidden: self.hidden.clone(),
            gamma: self.gamma,
            lr: self.lr,
            sync_every: self.sync_every,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub episodes: usize,
    pub batch_size: usize,
    pub train_every: u64,
    pub replay_capacity: usize,
    pub priority: PriorityKind,
    /// Per-user share of events in the train shard.
    pub train_frac: f64,
    /// Persist a checkpoint every this many episodes (and at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            episodes: 10,
            batch_size: 32,
            train_every: 1,
            replay_capacity: 50_000,
            priority: PriorityKind::Td,
            train_frac: 0.9,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 7, out_dir: PathBuf::from("runs/default") }
    }
}

impl RunConfig {
    /// Parse `path`, apply `--set key.path=value` overrides, validate.
    pub fn load(path: &Path, sets: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        for set in sets {
            apply_set(&mut value, set)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        if let Some(dir) = path.parent() {
            cfg.anchor(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve relative paths against the directory holding the config file,
    /// so runs behave the same from any working directory.
    fn anchor(&mut self, dir: &Path) {
        for p in [
            &mut self.data.checkins,
            &mut self.data.taxi,
            &mut self.data.word_vectors,
            &mut self.run.out_dir,
        ] {
            if p.is_relative() {
                *p = dir.join(&p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.data.format.to_csv_format()?;
        if self.dims.n_user != self.dims.n_kg {
            return Err(Error::Config(format!(
                "the gated update couples user and KG vectors elementwise, so n_user ({}) must equal n_kg ({})",
                self.dims.n_user, self.dims.n_kg
            )));
        }
        if self.dims.d_w == 0 {
            return Err(Error::Config("d_w must be >= 1".into()));
        }
        if self.context.window_len <= 0 {
            return Err(Error::Config("window_len must be > 0".into()));
        }
        if !(self.profile.fraction > 0.0 && self.profile.fraction <= 1.0) {
            return Err(Error::Config("profile.fraction must be in (0, 1]".into()));
        }
        if !(self.train.train_frac > 0.0 && self.train.train_frac <= 1.0) {
            return Err(Error::Config("train.train_frac must be in (0, 1]".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if let BaselineSource::Calibrate { rounds } = self.reward.baselines {
            if rounds < 4 {
                return Err(Error::Config("calibration needs >= 4 rounds".into()));
            }
        }
        self.reward.weights().validate()?;
        for (name, path) in [
            ("data.checkins", &self.data.checkins),
            ("data.taxi", &self.data.taxi),
            ("data.word_vectors", &self.data.word_vectors),
        ] {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "{name} does not exist: {}",
                    path.display()
                )));
            }
        }
        self.training_config(RewardBaselines::default()).validate()
    }

    /// Core training configuration with the resolved baselines plugged in.
    pub fn training_config(&self, baselines: RewardBaselines) -> TrainingConfig {
        TrainingConfig {
            agent: self.agent.to_agent_config(),
            strategy: self.env.strategy,
            reward_kind: self.reward.kind,
            weights: self.reward.weights(),
            baselines,
            priority: self.train.priority,
            replay_capacity: self.train.replay_capacity,
            batch_size: self.train.batch_size,
            train_every: self.train.train_every,
            env_lr: self.env.lr,
            episodes: self.train.episodes,
            seed: self.run.seed,
        }
    }
}

/// `key.path=value`: descend dotted tables (creating them as needed) and
/// replace the leaf. The value is parsed as a TOML literal, falling back to
/// a plain string.
fn apply_set(root: &mut toml::Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set `{set}` is not key=value")))?;
    let leaf_value = parse_toml_literal(raw);
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Config(format!("--set key `{key}` has an empty segment")));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set `{key}`: `{seg}` is not a table")))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), leaf_value);
            return Ok(());
        }
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("split('.') yields at least one segment");
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Identity of the full run: every config field except the output directory.
pub fn config_fingerprint(cfg: &RunConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(run) = v.get_mut("run").and_then(|r| r.as_object_mut()) {
        run.remove("out_dir");
    }
    sha256_hex(v.to_string().as_bytes())
}

/// Identity of the build artifacts: inputs, grid, windows, dims, KG and
/// profile settings, and the seed — training/eval knobs don't rebuild.
pub fn build_fingerprint(cfg: &RunConfig) -> String {
    let subset = serde_json::json!({
        "data": cfg.data,
        "grid": cfg.grid,
        "context": cfg.context,
        "dims": cfg.dims,
        "kg": cfg.kg,
        "profile": cfg.profile,
        "seed": cfg.run.seed,
    });
    sha256_hex(subset.to_string().as_bytes())
}

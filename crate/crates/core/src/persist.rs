//! Run configuration, CSV and checkpoint I/O, run directories and SVG plots.
//!
//! Configuration files hold one `key = value` pair per line, with dotted
//! section prefixes (`flow.eta = 10`). Blank lines and `#` comments are
//! ignored. Every key has a default, so an empty file is a complete config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{ActorLoss, AgentConfig, Method, MetricsRecord, TrainerConfig};
use crate::envs::{
    BehaviorPolicy, EnvPair, GaussianLinearPair, PatrolPair, PatrolParams, PointMassPair, PointMassShift, ShiftRegion,
    Transition,
};
use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowTrainConfig, SolverChoice};

pub const RUNS_DIR_ENV: &str = "COMPFLOW_RUNS_DIR";

pub const METRICS_HEADER: &str =
    "step,eval_return_mean,eval_return_std,critic_loss,actor_loss,lambda,mean_kept_gap,mean_rejected_gap,buffer_size";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    /// Real in a range; `open_low` excludes the lower bound.
    Real {
        min: f64,
        max: f64,
        open_low: bool,
        open_high: bool,
    },
    Count {
        min: u64,
    },
    Choice(&'static [&'static str]),
    RealList,
    CountList,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    kind: Kind,
}

const fn real(min: f64, max: f64) -> Kind {
    Kind::Real {
        min,
        max,
        open_low: false,
        open_high: false,
    }
}

const fn positive() -> Kind {
    Kind::Real {
        min: 0.0,
        max: f64::INFINITY,
        open_low: true,
        open_high: true,
    }
}

const fn fraction() -> Kind {
    Kind::Real {
        min: 0.0,
        max: 1.0,
        open_low: true,
        open_high: false,
    }
}

const NONNEG: Kind = real(0.0, f64::INFINITY);

macro_rules! key {
    ($k:expr, $d:expr, $kind:expr, $h:expr) => {
        KeySpec {
            key: $k,
            default: $d,
            help: $h,
            kind: $kind,
        }
    };
}

/// Every accepted configuration key.
pub const KEYS: &[KeySpec] = &[
    key!(
        "env.name",
        "pointmass",
        Kind::Choice(&["gaussian", "pointmass", "patrol"]),
        "environment pair"
    ),
    key!(
        "env.horizon",
        "0",
        Kind::Count { min: 0 },
        "episode length; 0 uses the environment's own default"
    ),
    key!(
        "env.dim",
        "2",
        Kind::Count { min: 1 },
        "gaussian: state and action dimension"
    ),
    key!(
        "env.a_scale",
        "0.5",
        real(f64::NEG_INFINITY, f64::INFINITY),
        "gaussian: A = a_scale * I"
    ),
    key!(
        "env.b_scale",
        "0.5",
        real(f64::NEG_INFINITY, f64::INFINITY),
        "gaussian: B = b_scale * I"
    ),
    key!("env.sigma_off", "0.5", positive(), "gaussian: offline noise scale"),
    key!("env.sigma_on", "0.5", positive(), "gaussian: online noise scale"),
    key!(
        "env.shift",
        "2,0",
        Kind::RealList,
        "gaussian: online mean shift (comma-separated, length env.dim)"
    ),
    key!(
        "env.region",
        "everywhere",
        Kind::Choice(&["everywhere", "half"]),
        "gaussian: where the shift applies (half: s0 > 0)"
    ),
    key!(
        "env.shift_kind",
        "friction",
        Kind::Choice(&["friction", "kinematic"]),
        "pointmass: kind of dynamics shift"
    ),
    key!(
        "env.friction_off",
        "0.05",
        real(0.0, 1.0),
        "pointmass: offline friction"
    ),
    key!(
        "env.friction_on",
        "0.25",
        real(0.0, 1.0),
        "pointmass: online friction (friction shift)"
    ),
    key!(
        "env.action_limit",
        "0.4",
        NONNEG,
        "pointmass: online action clamp (kinematic shift)"
    ),
    key!(
        "env.limit_axis",
        "0",
        Kind::Count { min: 0 },
        "pointmass: clamped action axis (kinematic shift)"
    ),
    key!("env.grid", "5", Kind::Count { min: 1 }, "patrol: grid side length"),
    key!("env.budget", "5", positive(), "patrol: total patrol effort per step"),
    key!(
        "env.displacement_off",
        "0.5",
        NONNEG,
        "patrol: offline poaching displacement"
    ),
    key!(
        "env.displacement_on",
        "1.0",
        NONNEG,
        "patrol: online poaching displacement"
    ),
    key!(
        "env.seed",
        "0",
        Kind::Count { min: 0 },
        "patrol: seed for the cell attractiveness draw"
    ),
    key!(
        "data.offline_size",
        "50000",
        Kind::Count { min: 1 },
        "offline transitions to generate"
    ),
    key!("flow.layers", "6", Kind::Count { min: 1 }, "flow hidden layers"),
    key!("flow.width", "256", Kind::Count { min: 1 }, "flow hidden width"),
    key!(
        "flow.batch",
        "1024",
        Kind::Count { min: 1 },
        "flow minibatch size (also the OT batch)"
    ),
    key!("flow.steps", "10", Kind::Count { min: 1 }, "Euler steps per flow"),
    key!("flow.lr", "3e-4", positive(), "flow Adam learning rate"),
    key!(
        "flow.eta",
        "10",
        NONNEG,
        "weight of the (s, a) terms in the transport cost"
    ),
    key!(
        "flow.iterations",
        "5000",
        Kind::Count { min: 0 },
        "offline and standalone online flow iterations"
    ),
    key!(
        "flow.online_iterations",
        "500",
        Kind::Count { min: 0 },
        "online flow iterations per retrain during RL"
    ),
    key!(
        "flow.online_batch",
        "1024",
        Kind::Count { min: 1 },
        "online flow minibatch size during RL"
    ),
    key!(
        "flow.train_freq",
        "5000",
        Kind::Count { min: 1 },
        "online flow retraining period (interactions)"
    ),
    key!(
        "flow.solver",
        "exact",
        Kind::Choice(&["exact", "entropic"]),
        "minibatch OT solver"
    ),
    key!(
        "flow.sinkhorn_epsilon",
        "0.05",
        positive(),
        "entropic solver regularization, relative to the largest cost"
    ),
    key!(
        "flow.sinkhorn_iters",
        "2000",
        Kind::Count { min: 1 },
        "entropic solver iteration cap"
    ),
    key!(
        "gap.m",
        "30",
        Kind::Count { min: 1 },
        "Monte-Carlo latents per gap estimate"
    ),
    key!(
        "rl.method",
        "compflow",
        Kind::Choice(&["compflow", "sac", "bcsac"]),
        "training method"
    ),
    key!(
        "rl.layers",
        "2",
        Kind::Count { min: 1 },
        "actor and critic hidden layers"
    ),
    key!(
        "rl.width",
        "256",
        Kind::Count { min: 1 },
        "actor and critic hidden width"
    ),
    key!("rl.lr", "3e-4", positive(), "actor and critic Adam learning rate"),
    key!(
        "rl.gamma",
        "0.99",
        Kind::Real {
            min: 0.0,
            max: 1.0,
            open_low: false,
            open_high: true
        },
        "discount"
    ),
    key!("rl.alpha", "0.2", NONNEG, "entropy temperature"),
    key!("rl.target_rate", "5e-3", fraction(), "soft target update rate"),
    key!("rl.omega", "5", NONNEG, "behavior-cloning weight"),
    key!("rl.beta", "0.1", NONNEG, "gap reward bonus scale"),
    key!("rl.xi", "0.5", fraction(), "fraction of each offline minibatch kept"),
    key!("rl.k", "10", Kind::Count { min: 1 }, "gradient steps per interaction"),
    key!(
        "rl.batch",
        "128",
        Kind::Count { min: 1 },
        "online and offline minibatch size"
    ),
    key!(
        "rl.capacity",
        "1000000",
        Kind::Count { min: 1 },
        "replay buffer capacity"
    ),
    key!(
        "rl.warmup",
        "1000",
        Kind::Count { min: 0 },
        "random-action interactions before the policy acts"
    ),
    key!(
        "rl.total_steps",
        "40000",
        Kind::Count { min: 1 },
        "environment interactions"
    ),
    key!(
        "rl.eval_interval",
        "5000",
        Kind::Count { min: 1 },
        "interactions between evaluations"
    ),
    key!(
        "rl.eval_episodes",
        "10",
        Kind::Count { min: 1 },
        "episodes per evaluation"
    ),
    key!(
        "rl.log_std_min",
        "-20",
        real(f64::NEG_INFINITY, f64::INFINITY),
        "policy log-std floor"
    ),
    key!(
        "rl.log_std_max",
        "2",
        real(f64::NEG_INFINITY, f64::INFINITY),
        "policy log-std ceiling"
    ),
    key!("run.seeds", "1", Kind::CountList, "comma-separated seeds"),
    key!(
        "run.output",
        "runs",
        Kind::Choice(&[]),
        "runs root directory (overridden by COMPFLOW_RUNS_DIR)"
    ),
];

/// Keys that do not change what a single seed computes.
const UNHASHED: &[&str] = &["run.seeds", "run.output"];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn range_text(min: f64, max: f64, open_low: bool, open_high: bool) -> String {
    let lo = if min == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        min.to_string()
    };
    let hi = if max == f64::INFINITY {
        "inf".to_string()
    } else {
        max.to_string()
    };
    format!(
        "{}{lo},{hi}{}",
        if open_low { "(" } else { "[" },
        if open_high { ")" } else { "]" }
    )
}

/// Validates `raw` for `key` and returns its canonical text.
fn canonical(key: &str, raw: &str) -> Result<String> {
    let spec = spec(key).ok_or_else(|| Error::Config {
        key: key.to_string(),
        message: "unknown key (run `compflow train --help` for the full list)".into(),
    })?;
    let err = |message: String| Error::Config {
        key: key.to_string(),
        message,
    };
    let raw = raw.trim();
    let short = key.rsplit('.').next().unwrap_or(key);
    match spec.kind {
        Kind::Real {
            min,
            max,
            open_low,
            open_high,
        } => {
            let v: f64 = raw.parse().map_err(|_| err(format!("`{raw}` is not a number")))?;
            let ok = v.is_finite()
                && (if open_low { v > min } else { v >= min })
                && (if open_high { v < max } else { v <= max });
            if !ok {
                return Err(err(format!(
                    "{short} must lie in {}",
                    range_text(min, max, open_low, open_high)
                )));
            }
            Ok(format!("{v:?}"))
        }
        Kind::Count { min } => {
            let v: u64 = raw
                .parse()
                .map_err(|_| err(format!("`{raw}` is not a non-negative integer")))?;
            if v < min {
                return Err(err(format!("{short} must be >= {min}")));
            }
            Ok(v.to_string())
        }
        Kind::Choice(options) => {
            if options.is_empty() {
                if raw.is_empty() {
                    return Err(err("value must not be empty".into()));
                }
                return Ok(raw.to_string());
            }
            if options.contains(&raw) {
                Ok(raw.to_string())
            } else {
                Err(err(format!("`{raw}` is not one of {}", options.join(", "))))
            }
        }
        Kind::RealList => {
            let vals = raw
                .split(',')
                .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| err(format!("`{raw}` is not a comma-separated list of numbers")))?;
            Ok(vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
        }
        Kind::CountList => {
            let vals = raw
                .split(',')
                .map(|p| p.trim().parse::<u64>().ok())
                .collect::<Option<Vec<u64>>>()
                .ok_or_else(|| err(format!("`{raw}` is not a comma-separated list of integers")))?;
            Ok(vals.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
        }
    }
}

/// A complete, validated configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.key.to_string(), canonical(k.key, k.default).expect("valid default")))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                message: format!("line {}: expected `key = value`", n + 1),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
                hint: "config file not found".into(),
            });
        }
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Rebuilds a config from stored key/value pairs, such as a manifest echo.
    pub fn from_values(values: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in values {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; cross-key checks run in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = canonical(key, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.to_string(),
            message: "override must look like key=value".into(),
        })?;
        self.set(k.trim(), v)?;
        self.validate()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn real(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated real")
    }

    pub fn count(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated count")
    }

    pub fn reals(&self, key: &str) -> Vec<f64> {
        self.get(key)
            .split(',')
            .map(|v| v.parse().expect("validated list"))
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.get("run.seeds")
            .split(',')
            .map(|v| v.parse().expect("validated list"))
            .collect()
    }

    pub fn method(&self) -> Method {
        self.get("rl.method").parse().expect("validated method")
    }

    /// Cross-key checks.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.reals("env.shift").len() != self.count("env.dim") {
            return cfg_err(
                "env.shift",
                format!("shift must have env.dim = {} entries", self.count("env.dim")),
            );
        }
        if self.count("env.limit_axis") > 1 {
            return cfg_err("env.limit_axis", "limit_axis must be 0 or 1".into());
        }
        if self.real("rl.log_std_min") >= self.real("rl.log_std_max") {
            return cfg_err("rl.log_std_min", "log_std_min must be below rl.log_std_max".into());
        }
        Ok(())
    }

    /// Canonical text: every key, sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sha-256 of the canonical text of all keys that affect a single seed's run.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn env_pair(&self) -> Result<EnvPair> {
        let horizon = self.count("env.horizon");
        match self.get("env.name") {
            "gaussian" => {
                let region = match self.get("env.region") {
                    "half" => ShiftRegion::PositiveHalf { axis: 0 },
                    _ => ShiftRegion::Everywhere,
                };
                let mut p = GaussianLinearPair::isotropic(
                    self.count("env.dim"),
                    self.real("env.a_scale"),
                    self.real("env.b_scale"),
                    self.real("env.sigma_off"),
                    self.real("env.sigma_on"),
                    self.reals("env.shift"),
                    region,
                )?;
                if horizon > 0 {
                    p.horizon = horizon;
                }
                Ok(EnvPair::GaussianLinear(p))
            }
            "pointmass" => {
                let mut p = PointMassPair::friction(self.real("env.friction_off"), self.real("env.friction_on"));
                if self.get("env.shift_kind") == "kinematic" {
                    p.shift = PointMassShift::Kinematic {
                        friction: self.real("env.friction_off"),
                        axis: self.count("env.limit_axis"),
                        limit: self.real("env.action_limit"),
                    };
                }
                if horizon > 0 {
                    p.horizon = horizon;
                }
                Ok(EnvPair::PointMass(p))
            }
            "patrol" => {
                let mut params = PatrolParams {
                    grid_side: self.count("env.grid"),
                    budget: self.real("env.budget"),
                    ..PatrolParams::default()
                };
                if horizon > 0 {
                    params.horizon = horizon;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.count("env.seed") as u64);
                Ok(EnvPair::Patrol(PatrolPair::new(
                    params,
                    self.real("env.displacement_off"),
                    self.real("env.displacement_on"),
                    &mut rng,
                )))
            }
            other => Err(Error::Config {
                key: "env.name".into(),
                message: format!("unknown environment `{other}`"),
            }),
        }
    }

    pub fn behavior(&self) -> Result<BehaviorPolicy> {
        Ok(self.env_pair()?.default_behavior())
    }

    fn solver(&self) -> SolverChoice {
        match self.get("flow.solver") {
            "entropic" => SolverChoice::Entropic {
                epsilon: self.real("flow.sinkhorn_epsilon"),
                max_iters: self.count("flow.sinkhorn_iters"),
            },
            _ => SolverChoice::Exact,
        }
    }

    /// Settings for standalone flow training.
    pub fn flow_config(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            arch: FlowArch {
                hidden_layers: self.count("flow.layers"),
                hidden_width: self.count("flow.width"),
            },
            batch_size: self.count("flow.batch"),
            iterations: self.count("flow.iterations"),
            lr: self.real("flow.lr"),
            ode_steps: self.count("flow.steps"),
            eta: self.real("flow.eta"),
            solver: self.solver(),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            method: self.method(),
            agent: AgentConfig {
                hidden_layers: self.count("rl.layers"),
                hidden_width: self.count("rl.width"),
                lr: self.real("rl.lr"),
                gamma: self.real("rl.gamma"),
                alpha: self.real("rl.alpha"),
                target_rate: self.real("rl.target_rate"),
                omega: self.real("rl.omega"),
                beta: self.real("rl.beta"),
                xi: self.real("rl.xi"),
                batch_size: self.count("rl.batch"),
                log_std_min: self.real("rl.log_std_min"),
                log_std_max: self.real("rl.log_std_max"),
                lambda_eps: 1e-6,
                actor_loss: ActorLoss::ScaledBc,
            },
            gradient_steps: self.count("rl.k"),
            buffer_capacity: self.count("rl.capacity"),
            warmup: self.count("rl.warmup"),
            total_steps: self.count("rl.total_steps"),
            eval_interval: self.count("rl.eval_interval"),
            eval_episodes: self.count("rl.eval_episodes"),
            train_freq: self.count("flow.train_freq"),
            gap_samples: self.count("gap.m"),
            online_flow: FlowTrainConfig {
                iterations: self.count("flow.online_iterations"),
                batch_size: self.count("flow.online_batch"),
                ..self.flow_config()
            },
        }
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (set with --set key=value):\n");
    for k in KEYS {
        let _ = writeln!(out, "  {:<24} default {:<12} {}", k.key, k.default, k.help);
    }
    out
}

/// Seed for one pipeline phase, derived from the run seed.
pub fn phase_seed(seed: u64, phase: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{phase}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Files

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `runs/<config-hash>/<seed>/…`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
    pub hash: String,
}

impl RunLayout {
    /// Uses `COMPFLOW_RUNS_DIR` when set, otherwise `run.output`.
    pub fn for_config(cfg: &RunConfig) -> Self {
        let root = std::env::var_os(RUNS_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(cfg.get("run.output")));
        RunLayout {
            root,
            hash: cfg.short_hash(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(&self.hash).join(seed.to_string())
    }

    pub fn manifest(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("manifest.json")
    }

    pub fn metrics(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("metrics.csv")
    }

    pub fn checkpoints(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("checkpoints")
    }

    pub fn plots(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("plots")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub phase_seeds: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub label: String,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, seed: u64, label: &str) -> Self {
        let phase_seeds = ["dataset", "offline_flow", "train"]
            .iter()
            .map(|p| (p.to_string(), phase_seed(seed, p)))
            .collect();
        RunManifest {
            config: cfg.values().clone(),
            config_hash: cfg.hash(),
            env: cfg.get("env.name").to_string(),
            method: cfg.get("rl.method").to_string(),
            seed,
            phase_seeds,
            started_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            label: label.to_string(),
        }
    }

    /// Writes the manifest unless one already exists.
    pub fn write_once(&self, path: &Path) -> Result<()> {
        if path.exists() {
            return Ok(());
        }
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, path: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        message: format!("line {line}: `{s}` is not a number"),
    })
}

// ---------------------------------------------------------------------------
// Metrics CSV

pub fn metrics_line(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        fmt_f64(r.eval_return_mean),
        fmt_f64(r.eval_return_std),
        fmt_f64(r.critic_loss),
        fmt_f64(r.actor_loss),
        fmt_f64(r.lambda),
        fmt_f64(r.mean_kept_gap),
        fmt_f64(r.mean_rejected_gap),
        r.buffer_size
    )
}

pub fn metrics_text(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&metrics_line(r));
        out.push('\n');
    }
    out
}

/// Rewrites the metrics file atomically with `records`.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    atomic_write(path, metrics_text(records).as_bytes())
}

/// Appends one record, keeping the file atomic.
pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut records = if path.exists() {
        read_metrics(path)?.records
    } else {
        Vec::new()
    };
    records.push(record.clone());
    write_metrics(path, &records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub records: Vec<MetricsRecord>,
    /// The file ended in an incomplete line, which was dropped.
    pub truncated: bool,
}

pub fn parse_metrics(text: &str, path: &str) -> Result<MetricsFile> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // a complete file ends in '\n', leaving one empty trailing piece
    let tail = lines.pop().unwrap_or("");
    let truncated = !tail.is_empty();
    let header = lines.first().copied().unwrap_or(if truncated { tail } else { "" });
    if header != METRICS_HEADER {
        return Err(Error::HeaderMismatch {
            path: path.to_string(),
            expected: METRICS_HEADER.to_string(),
            found: header.to_string(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                path: path.to_string(),
                message: format!("line {}: expected 9 fields, found {}", i + 1, f.len()),
            });
        }
        let count = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_string(),
                message: format!("line {}: `{s}` is not an integer", i + 1),
            })
        };
        records.push(MetricsRecord {
            step: count(f[0])?,
            eval_return_mean: parse_f64(f[1], path, i + 1)?,
            eval_return_std: parse_f64(f[2], path, i + 1)?,
            critic_loss: parse_f64(f[3], path, i + 1)?,
            actor_loss: parse_f64(f[4], path, i + 1)?,
            lambda: parse_f64(f[5], path, i + 1)?,
            mean_kept_gap: parse_f64(f[6], path, i + 1)?,
            mean_rejected_gap: parse_f64(f[7], path, i + 1)?,
            buffer_size: count(f[8])?,
        });
    }
    Ok(MetricsFile {
        records,
        truncated: truncated && !lines.is_empty(),
    })
}

pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            hint: "no metrics have been written for this run".into(),
        });
    }
    parse_metrics(&fs::read_to_string(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Dataset CSV

pub fn dataset_header(state_dim: usize, action_dim: usize) -> String {
    let mut cols: Vec<String> = (0..state_dim).map(|i| format!("s{i}")).collect();
    cols.extend((0..action_dim).map(|i| format!("a{i}")));
    cols.push("r".into());
    cols.extend((0..state_dim).map(|i| format!("sp{i}")));
    cols.push("done".into());
    cols.join(",")
}

pub fn dataset_text(data: &[Transition]) -> Result<String> {
    let first = data.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
    let (sd, ad) = (first.state.len(), first.action.len());
    let mut out = dataset_header(sd, ad);
    out.push('\n');
    for t in data {
        if t.state.len() != sd || t.action.len() != ad || t.next_state.len() != sd {
            return Err(Error::shape("dataset rows have inconsistent dimensions"));
        }
        let mut fields: Vec<String> = t.state.iter().map(|v| fmt_f64(*v)).collect();
        fields.extend(t.action.iter().map(|v| fmt_f64(*v)));
        fields.push(fmt_f64(t.reward));
        fields.extend(t.next_state.iter().map(|v| fmt_f64(*v)));
        fields.push(if t.done { "1" } else { "0" }.into());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &[Transition]) -> Result<()> {
    atomic_write(path, dataset_text(data)?.as_bytes())
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Vec<Transition>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    let sd = cols
        .iter()
        .filter(|c| c.starts_with('s') && !c.starts_with("sp"))
        .count();
    let ad = cols.iter().filter(|c| c.starts_with('a')).count();
    let expected = dataset_header(sd, ad);
    if header != expected || sd == 0 {
        return Err(Error::HeaderMismatch {
            path: path.to_string(),
            expected,
            found: header.to_string(),
        });
    }
    let width = 2 * sd + ad + 2;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(Error::Parse {
                path: path.to_string(),
                message: format!("line {}: expected {width} fields, found {}", i + 2, f.len()),
            });
        }
        let nums = |r: std::ops::Range<usize>| r.map(|j| parse_f64(f[j], path, i + 2)).collect::<Result<Vec<f64>>>();
        out.push(Transition {
            state: nums(0..sd)?,
            action: nums(sd..sd + ad)?,
            reward: parse_f64(f[sd + ad], path, i + 2)?,
            next_state: nums(sd + ad + 1..2 * sd + ad + 1)?,
            done: match f[width - 1].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        path: path.to_string(),
                        message: format!("line {}: done flag `{other}` is not 0 or 1", i + 2),
                    })
                }
            },
        });
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Transition>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            hint: "generate it with `compflow gen-dataset`".into(),
        });
    }
    parse_dataset(&fs::read_to_string(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// SVG learning curves

pub const SVG_WIDTH: f64 = 640.0;
pub const SVG_HEIGHT: f64 = 400.0;
pub const PLOT_LEFT: f64 = 70.0;
pub const PLOT_RIGHT: f64 = 620.0;
pub const PLOT_TOP: f64 = 20.0;
pub const PLOT_BOTTOM: f64 = 340.0;

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One labelled group of seed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveGroup {
    pub label: String,
    pub runs: Vec<Vec<MetricsRecord>>,
}

/// Per-step mean and sample standard deviation of the evaluation return
/// across the runs that report that step.
pub fn group_statistics(group: &CurveGroup) -> Vec<(f64, f64, f64)> {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in &group.runs {
        for r in run {
            by_step.entry(r.step).or_default().push(r.eval_return_mean);
        }
    }
    by_step
        .into_iter()
        .map(|(step, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (step as f64, mean, std)
        })
        .collect()
}

/// Linear map from data ranges onto the plot area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Frame {
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = if self.x_max > self.x_min {
            (x - self.x_min) / (self.x_max - self.x_min)
        } else {
            0.5
        };
        let fy = if self.y_max > self.y_min {
            (y - self.y_min) / (self.y_max - self.y_min)
        } else {
            0.5
        };
        (
            PLOT_LEFT + fx * (PLOT_RIGHT - PLOT_LEFT),
            PLOT_BOTTOM - fy * (PLOT_BOTTOM - PLOT_TOP),
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained SVG with a mean line and a ±1 std band per group.
pub fn render_learning_curve(groups: &[CurveGroup]) -> Result<String> {
    let stats: Vec<Vec<(f64, f64, f64)>> = groups.iter().map(group_statistics).collect();
    let points: Vec<&(f64, f64, f64)> = stats.iter().flatten().collect();
    if points.is_empty() {
        return Err(Error::invalid("no metrics records to plot"));
    }
    if points.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::NonFinite("evaluation return in metrics".into()));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: &dyn Fn(&(f64, f64, f64)) -> f64| {
        points.iter().map(|p| g(p)).fold(init, f)
    };
    let frame = Frame {
        x_min: fold(f64::min, f64::INFINITY, &|p| p.0),
        x_max: fold(f64::max, f64::NEG_INFINITY, &|p| p.0),
        y_min: fold(f64::min, f64::INFINITY, &|p| p.1 - p.2),
        y_max: fold(f64::max, f64::NEG_INFINITY, &|p| p.1 + p.2),
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PLOT_LEFT} {PLOT_TOP} V{PLOT_BOTTOM} H{PLOT_RIGHT}" fill="none" stroke="black"/>"#
    );
    for (i, (x, y)) in [(frame.x_min, frame.y_min), (frame.x_max, frame.y_max)]
        .iter()
        .enumerate()
    {
        let (px, _) = frame.map(*x, frame.y_min);
        let (_, py) = frame.map(frame.x_min, *y);
        let anchor = if i == 0 { "start" } else { "end" };
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="{anchor}">{x}</text>"#,
            PLOT_BOTTOM + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{py:.2}" text-anchor="end">{y:.3}</text>"#,
            PLOT_LEFT - 6.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        PLOT_BOTTOM + 34.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">return</text>"#,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0
    );
    for (g, (group, st)) in groups.iter().zip(&stats).enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        let upper: Vec<String> = st
            .iter()
            .map(|p| frame.map(p.0, p.1 + p.2))
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let lower: Vec<String> = st
            .iter()
            .rev()
            .map(|p| frame.map(p.0, p.1 - p.2))
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="band" points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = st
            .iter()
            .map(|p| frame.map(p.0, p.1))
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = PLOT_TOP + 14.0 + 16.0 * g as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{}</text>"#,
            PLOT_LEFT + 10.0,
            escape(&group.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

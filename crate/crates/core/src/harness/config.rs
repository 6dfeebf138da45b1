//! Flat `key = value` experiment configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use crate::agent::{CuriosityConfig, RewardKind, TrainConfig, Verification};
use crate::envsim::EnvDescriptor;
use crate::planner::CemConfig;
use crate::worldmodel::ModelConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for e in &self.0 {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("run.name", "run"),
    ("seeds", "0,1,2,3,4"),
    ("env.name", "chemical"),
    ("env.variant", "full_chain"),
    ("env.nodes", "5"),
    ("env.colors", "3"),
    ("env.seed", "0"),
    ("env.sharpness", "0.9"),
    ("model.codebook_size", "4"),
    ("model.embed_dim", "16"),
    ("model.hidden", "64"),
    ("model.lambda_sparse", "0.001"),
    ("model.lambda_mask", "1.0"),
    ("model.lambda_quant", "1.0"),
    ("model.beta", "0.25"),
    ("model.temp_start", "1.0"),
    ("model.temp_end", "0.3"),
    ("model.fusion_cos", "0.98"),
    ("model.fusion_l1_frac", "0.1"),
    ("model.fusion_every", "2000"),
    ("model.dead_after", "1000"),
    ("model.codebook_init", "0.1"),
    ("agent.reward", "edge_entropy"),
    ("agent.exploration", "0.05"),
    ("agent.tau", "0.3"),
    ("agent.min_samples", "50"),
    ("agent.probes_per_value", "25"),
    ("agent.verification", "active"),
    ("agent.curious", "true"),
    ("agent.initial_steps", "1000"),
    ("agent.episode_length", "25"),
    ("agent.intervenable", "all"),
    ("planner.length", "3"),
    ("planner.candidates", "64"),
    ("planner.elites", "32"),
    ("planner.iterations", "5"),
    ("planner.exploration", "0.05"),
    ("train.steps", "15000"),
    ("train.batch", "256"),
    ("train.lr", "0.0001"),
    ("train.report_every", "500"),
    ("train.checkpoint_every", "0"),
    ("train.replay_capacity", "100000"),
    ("eval.noise_levels", "auto"),
    ("eval.samples", "1000"),
    ("eval.episodes", "10"),
    ("eval.horizon", "25"),
    ("eval.pairs", "400"),
    ("baseline.dense", "true"),
    ("baseline.hidden", "64"),
    ("strict.meta_acc", "0.95"),
    ("strict.shd", "2"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub noise_levels: Vec<usize>,
    pub samples: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub env: EnvDescriptor,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub planner: CemConfig,
    pub eval: EvalConfig,
    pub dense_baseline: bool,
    pub dense_hidden: usize,
    pub strict_meta_acc: f64,
    pub strict_shd: usize,
}

/// Noise levels `⌈p·{0.2, 0.4, 0.6}⌉`, capped at the number of non-root nodes.
pub fn default_noise_levels(p: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [2usize, 4, 6]
        .iter()
        .map(|&k| ((p * k) as f64 / 10.0).ceil() as usize)
        .map(|n| n.min(p.saturating_sub(1)))
        .collect();
    v.dedup();
    v
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = (prev + (ca != cb) as usize).min(row[j] + 1).min(cur + 1);
            prev = cur;
        }
    }
    row[b.len()]
}

/// The accepted key closest to `key`.
pub fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .map(|(k, _)| *k)
        .min_by_key(|k| edit_distance(key, k))
        .unwrap()
}

struct Reader {
    map: BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Reader {
    fn raw(&self, key: &str) -> &str {
        &self.map[key]
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        match self.map[key].parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key} = {:?}: {e}", self.map[key]));
                None
            }
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Option<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.map[key].clone();
        let parsed: Result<Vec<T>, String> = raw
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| e.to_string()))
            .collect();
        match parsed {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key} = {raw:?}: {e}"));
                None
            }
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut errors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value, got {line:?}", n + 1));
                continue;
            };
            let k = k.trim();
            if map.contains_key(k) {
                map.insert(k.to_string(), v.trim().to_string());
            } else {
                errors.push(format!("unknown key {k} (did you mean {}?)", nearest_key(k)));
            }
        }
        Self::from_map(map, errors)
    }

    pub fn defaults() -> Self {
        Self::parse("").expect("defaults are valid")
    }

    fn from_map(map: BTreeMap<String, String>, errors: Vec<String>) -> Result<Self, ConfigError> {
        let mut r = Reader { map, errors };
        let env_map: BTreeMap<String, String> = r
            .map
            .iter()
            .filter(|(k, _)| k.starts_with("env."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let env = match EnvDescriptor::from_map(&env_map) {
            Ok(e) => Some(e),
            Err(e) => {
                r.errors.push(e.to_string());
                None
            }
        };
        let model = ModelConfig {
            codebook_size: r.parse("model.codebook_size").unwrap_or(4),
            embed_dim: r.parse("model.embed_dim").unwrap_or(16),
            hidden: r.parse("model.hidden").unwrap_or(64),
            lambda_sparse: r.parse("model.lambda_sparse").unwrap_or(0.0),
            lambda_mask: r.parse("model.lambda_mask").unwrap_or(0.0),
            lambda_quant: r.parse("model.lambda_quant").unwrap_or(0.0),
            beta: r.parse("model.beta").unwrap_or(0.0),
            temp_start: r.parse("model.temp_start").unwrap_or(1.0),
            temp_end: r.parse("model.temp_end").unwrap_or(1.0),
            fusion_cos: r.parse("model.fusion_cos").unwrap_or(0.0),
            fusion_l1_frac: r.parse("model.fusion_l1_frac").unwrap_or(0.0),
            fusion_every: r.parse("model.fusion_every").unwrap_or(0),
            dead_after: r.parse("model.dead_after").unwrap_or(0),
            codebook_init: r.parse("model.codebook_init").unwrap_or(0.1),
        };
        if let Err(e) = model.validate() {
            r.errors.push(format!("model: {e}"));
        }
        let kind = match r.raw("agent.reward").parse::<RewardKind>() {
            Ok(k) => k,
            Err(e) => {
                r.errors.push(format!("agent.reward: {e}"));
                RewardKind::EdgeEntropy
            }
        };
        let verification = match r.raw("agent.verification") {
            "active" => Verification::Active,
            "passive" => Verification::Passive,
            other => {
                r.errors.push(format!("agent.verification = {other:?}: expected active or passive"));
                Verification::Active
            }
        };
        let curiosity = CuriosityConfig {
            kind,
            exploration: r.parse("agent.exploration").unwrap_or(0.05),
            tau: r.parse("agent.tau").unwrap_or(0.3),
            min_samples: r.parse("agent.min_samples").unwrap_or(50),
            probes_per_value: r.parse("agent.probes_per_value").unwrap_or(25),
        };
        if let Err(e) = curiosity.validate() {
            r.errors.push(format!("agent: {e}"));
        }
        let intervenable = match r.raw("agent.intervenable") {
            "all" => None,
            _ => r.list::<usize>("agent.intervenable"),
        };
        if let (Some(list), Some(env)) = (&intervenable, &env) {
            if let Some(bad) = list.iter().find(|&&i| i >= env.nodes) {
                r.errors.push(format!("agent.intervenable: node {bad} out of range for {} nodes", env.nodes));
            }
        }
        let train = TrainConfig {
            steps: r.parse("train.steps").unwrap_or(0),
            batch_size: r.parse("train.batch").unwrap_or(256),
            lr: r.parse("train.lr").unwrap_or(1e-4),
            initial_steps: r.parse("agent.initial_steps").unwrap_or(1000),
            episode_length: r.parse("agent.episode_length").unwrap_or(25),
            report_every: r.parse("train.report_every").unwrap_or(500),
            curiosity,
            verification,
            curious: r.parse("agent.curious").unwrap_or(true),
            intervenable,
            replay_capacity: r.parse("train.replay_capacity").unwrap_or(100_000),
            eval_pairs: r.parse("eval.pairs").unwrap_or(400),
            checkpoint_every: r.parse("train.checkpoint_every").unwrap_or(0),
            checkpoint_dir: None,
        };
        if train.batch_size == 0 {
            r.errors.push("train.batch must be positive".into());
        }
        if !(train.lr > 0.0) {
            r.errors.push(format!("train.lr must be positive, got {}", train.lr));
        }
        let planner = CemConfig {
            length: r.parse("planner.length").unwrap_or(3),
            candidates: r.parse("planner.candidates").unwrap_or(64),
            elites: r.parse("planner.elites").unwrap_or(32),
            iterations: r.parse("planner.iterations").unwrap_or(5),
            exploration: r.parse("planner.exploration").unwrap_or(0.05),
        };
        if let Err(e) = planner.validate() {
            r.errors.push(format!("planner: {e}"));
        }
        let noise_levels = match (r.raw("eval.noise_levels"), &env) {
            ("auto", Some(env)) => default_noise_levels(env.nodes),
            ("auto", None) => vec![],
            _ => r.list("eval.noise_levels").unwrap_or_default(),
        };
        if let Some(env) = &env {
            if let Some(bad) = noise_levels.iter().find(|&&n| n >= env.nodes) {
                r.errors.push(format!("eval.noise_levels: {bad} exceeds the {} non-root nodes", env.nodes - 1));
            }
        }
        let eval = EvalConfig {
            noise_levels,
            samples: r.parse("eval.samples").unwrap_or(1000),
            episodes: r.parse("eval.episodes").unwrap_or(10),
            horizon: r.parse("eval.horizon").unwrap_or(25),
            pairs: r.parse("eval.pairs").unwrap_or(400),
        };
        let seeds = r.list("seeds").unwrap_or_default();
        if seeds.is_empty() {
            r.errors.push("seeds: at least one seed is required".into());
        }
        let cfg = ExperimentConfig {
            name: r.raw("run.name").to_string(),
            seeds,
            env: env.unwrap_or_else(|| EnvDescriptor::lockbox(0)),
            model,
            train,
            planner,
            eval,
            dense_baseline: r.parse("baseline.dense").unwrap_or(true),
            dense_hidden: r.parse("baseline.hidden").unwrap_or(64),
            strict_meta_acc: r.parse("strict.meta_acc").unwrap_or(0.95),
            strict_shd: r.parse("strict.shd").unwrap_or(2),
        };
        if r.errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError(r.errors))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    /// Replace the seed list from a comma-separated `MCG_SEED` value.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        let Some(v) = value else { return Ok(()) };
        let seeds: Result<Vec<u64>, _> = v.split(',').map(|s| s.trim().parse::<u64>()).collect();
        match seeds {
            Ok(s) if !s.is_empty() => {
                self.seeds = s;
                Ok(())
            }
            _ => Err(ConfigError(vec![format!("MCG_SEED = {v:?}: expected comma-separated integers")])),
        }
    }

    pub fn with_checkpoints(mut self, dir: PathBuf) -> Self {
        self.train.checkpoint_dir = Some(dir);
        self
    }
}

//! Train → evaluate pipeline over a seed list, with on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::eval::{
    eval_downstream, eval_identifiability, eval_prediction_accuracy, mean_std, shd_per_context, train_dense, EvalError,
};
use crate::agent::{train, AgentError};
use crate::envsim::EnvError;
use crate::numkit::RandomSource;
use crate::worldmodel::{save, CheckpointError, ModelError, WorldModel};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics log: {0}")]
    Log(String),
    #[error("summary disagreement on {metric}: {first} vs {second}")]
    Disagreement { metric: String, first: f64, second: f64 },
}

/// One append-only metric log entry.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub step: u64,
}

pub const METRICS_HEADER: &str = "run,seed,metric,value,step";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{:?},{}", self.run, self.seed, self.metric, self.value, self.step)
    }

    pub fn parse(line: &str) -> Result<Self, RunError> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(RunError::Log(format!("expected 5 fields in {line:?}")));
        }
        let bad = |what: &str| RunError::Log(format!("bad {what} in {line:?}"));
        Ok(MetricRow {
            run: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad("seed"))?,
            metric: f[2].to_string(),
            value: f[3].parse().map_err(|_| bad("value"))?,
            step: f[4].parse().map_err(|_| bad("step"))?,
        })
    }
}

/// Mean and sample standard deviation of every final (`step = steps`)
/// evaluation metric across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub entries: BTreeMap<String, (f64, f64, usize)>,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (m, sd, n)) in &self.entries {
            let _ = writeln!(s, "{k}.mean = {m:.6}");
            let _ = writeln!(s, "{k}.std = {sd:.6}");
            let _ = writeln!(s, "{k}.n = {n}");
        }
        s
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries.get(metric).map(|e| e.0)
    }
}

/// Aggregate rows whose step equals `final_step`.
pub fn summarize(rows: &[MetricRow], final_step: u64) -> Summary {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.step == final_step && r.metric.starts_with("eval.")) {
        by.entry(r.metric.clone()).or_default().push(r.value);
    }
    Summary {
        entries: by
            .into_iter()
            .map(|(k, v)| {
                let (m, s) = mean_std(&v);
                (k, (m, s, v.len()))
            })
            .collect(),
    }
}

/// Independent second pass: a streaming per-metric accumulator over the
/// CSV text written to disk.
pub fn summarize_log(text: &str, final_step: u64) -> Result<Summary, RunError> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(RunError::Log("missing header".into()));
    }
    for line in lines {
        let row = MetricRow::parse(line)?;
        if row.step != final_step || !row.metric.starts_with("eval.") {
            continue;
        }
        // Welford update
        let e = acc.entry(row.metric).or_insert((0.0, 0.0, 0));
        e.2 += 1;
        let d = row.value - e.0;
        e.0 += d / e.2 as f64;
        e.1 += d * (row.value - e.0);
    }
    Ok(Summary {
        entries: acc
            .into_iter()
            .map(|(k, (m, m2, n))| {
                let sd = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
                (k, (m, sd, n))
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub rows: Vec<MetricRow>,
    pub summary: Summary,
    /// Seeds failing the strict thresholds, with a reason.
    pub failures: Vec<(u64, String)>,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn push(rows: &mut Vec<MetricRow>, cfg: &ExperimentConfig, seed: u64, metric: &str, value: f64, step: u64) {
    rows.push(MetricRow {
        run: cfg.name.clone(),
        seed,
        metric: metric.to_string(),
        value,
        step,
    });
}

/// Train, checkpoint and evaluate one seed, appending metric rows.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    rows: &mut Vec<MetricRow>,
) -> Result<WorldModel, RunError> {
    let env = cfg.env.build()?;
    let rng = RandomSource::new(seed, &cfg.name);
    let mut model = WorldModel::for_env(&env, cfg.model.clone(), &mut rng.derive("model-init"))?;
    let mut tcfg = cfg.train.clone();
    if tcfg.checkpoint_every > 0 {
        tcfg.checkpoint_dir = Some(out.join("checkpoints").join(format!("seed{seed}")));
    }
    let steps = tcfg.steps;
    let report = train(&env, &mut model, tcfg, &rng.derive("train"))?;
    fs::write(out.join(format!("train_seed{seed}.csv")), report.to_csv())?;
    for r in &report.rows {
        for (name, v) in [
            ("train.loss_total", r.loss_total),
            ("train.loss_mle", r.loss_mle),
            ("train.loss_sparse", r.loss_sparse),
            ("train.loss_mask", r.loss_mask),
            ("train.loss_quant", r.loss_quant),
            ("train.reward_mean", r.reward_mean),
            ("train.meta_acc", r.meta_acc),
            ("train.codes_in_use", r.codes_in_use as f64),
            ("train.shd_max", r.shd_per_code.iter().copied().max().unwrap_or(0) as f64),
        ] {
            push(rows, cfg, seed, name, v, r.step);
        }
    }
    save(&model, &out.join("checkpoints").join(format!("seed{seed}.ckpt")))?;
    let ident = eval_identifiability(&model, &env, cfg.eval.pairs.max(1), &mut rng.derive("eval-ident"))?;
    for &u in &ident.codes_in_use {
        fs::write(
            out.join("skeletons").join(format!("seed{seed}_code{u}.txt")),
            model.skeleton(u).to_text(),
        )?;
    }
    let contexts = shd_per_context(&model, &env, cfg.eval.pairs.max(1), &mut rng.derive("eval-context"));
    push(rows, cfg, seed, "eval.swap_accuracy", ident.swap_accuracy, steps);
    push(rows, cfg, seed, "eval.observational_accuracy", ident.observational_accuracy, steps);
    push(rows, cfg, seed, "eval.distinct_skeletons", ident.distinct_skeletons as f64, steps);
    push(rows, cfg, seed, "eval.codes_in_use", ident.codes_in_use.len() as f64, steps);
    for (m, d) in contexts.iter().enumerate() {
        push(rows, cfg, seed, &format!("eval.shd_context{m}"), *d as f64, steps);
    }
    let dense = if cfg.dense_baseline {
        Some(train_dense(
            &env,
            cfg.dense_hidden,
            steps,
            cfg.train.initial_steps,
            cfg.train.episode_length,
            cfg.train.batch_size,
            cfg.train.lr,
            &rng.derive("dense"),
        )?)
    } else {
        None
    };
    for &n in &cfg.eval.noise_levels {
        let label = format!("eval-noise{n}");
        let acc = eval_prediction_accuracy(&model, &env, n, cfg.eval.samples, &mut rng.derive(&label))?;
        push(rows, cfg, seed, &format!("eval.accuracy_mcg_n{n}"), acc, steps);
        if cfg.eval.episodes > 0 {
            let ds = eval_downstream(
                &model,
                &env,
                &cfg.planner,
                cfg.eval.episodes,
                n,
                cfg.eval.horizon,
                &mut rng.derive(&format!("{label}-plan")),
            )?;
            push(rows, cfg, seed, &format!("eval.reward_mcg_n{n}"), ds.mean, steps);
        }
        if let Some(d) = &dense {
            // Same label: both predictors see identical evaluation draws.
            let acc = eval_prediction_accuracy(d, &env, n, cfg.eval.samples, &mut rng.derive(&label))?;
            push(rows, cfg, seed, &format!("eval.accuracy_dense_n{n}"), acc, steps);
            if cfg.eval.episodes > 0 {
                let ds = eval_downstream(
                    d,
                    &env,
                    &cfg.planner,
                    cfg.eval.episodes,
                    n,
                    cfg.eval.horizon,
                    &mut rng.derive(&format!("{label}-plan")),
                )?;
                push(rows, cfg, seed, &format!("eval.reward_dense_n{n}"), ds.mean, steps);
            }
        }
    }
    Ok(model)
}

/// Run every seed, write `metrics.csv`, `summary.txt`, skeletons and
/// checkpoints under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome, RunError> {
    fs::create_dir_all(out.join("skeletons"))?;
    fs::create_dir_all(out.join("checkpoints"))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let steps = cfg.train.steps;
    for &seed in &cfg.seeds {
        let start = rows.len();
        run_seed(cfg, seed, out, &mut rows)?;
        let seed_rows = &rows[start..];
        let value = |m: &str| seed_rows.iter().find(|r| r.metric == m && r.step == steps).map(|r| r.value);
        let acc = value("eval.observational_accuracy").unwrap_or(0.0);
        if acc < cfg.strict_meta_acc {
            failures.push((seed, format!("meta-state accuracy {acc:.3} < {}", cfg.strict_meta_acc)));
        }
        let worst = seed_rows
            .iter()
            .filter(|r| r.metric.starts_with("eval.shd_context") && r.step == steps)
            .map(|r| r.value)
            .fold(0.0, f64::max);
        if worst > cfg.strict_shd as f64 {
            failures.push((seed, format!("context SHD {worst} > {}", cfg.strict_shd)));
        }
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(out.join("metrics.csv"), &csv)?;
    let first = summarize(&rows, steps);
    let second = summarize_log(&fs::read_to_string(out.join("metrics.csv"))?, steps)?;
    for (k, (m, s, n)) in &first.entries {
        let (m2, s2, n2) = second.entries.get(k).copied().unwrap_or((f64::NAN, f64::NAN, 0));
        for (a, b) in [(*m, m2), (*s, s2), (*n as f64, n2 as f64)] {
            if !((a - b).abs() <= 1e-9 * (1.0 + a.abs())) {
                return Err(RunError::Disagreement {
                    metric: k.clone(),
                    first: a,
                    second: b,
                });
            }
        }
    }
    if first.entries.len() != second.entries.len() {
        return Err(RunError::Log("summary passes saw different metric sets".into()));
    }
    fs::write(out.join("summary.txt"), second.to_text())?;
    Ok(RunOutcome {
        rows,
        summary: second,
        failures,
        out_dir: out.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(metric: &str, seed: u64, value: f64, step: u64) -> MetricRow {
        MetricRow {
            run: "r".into(),
            seed,
            metric: metric.into(),
            value,
            step,
        }
    }

    #[test]
    fn both_summary_passes_agree() {
        let rows = vec![
            row("eval.a", 0, 1.0, 10),
            row("eval.a", 1, 2.0, 10),
            row("eval.a", 2, 4.5, 10),
            row("eval.a", 0, 9.0, 5),
            row("train.b", 0, 3.0, 10),
        ];
        let mut csv = format!("{METRICS_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.to_csv());
            csv.push('\n');
        }
        let a = summarize(&rows, 10);
        let b = summarize_log(&csv, 10).unwrap();
        assert_eq!(a.entries.len(), 1);
        let (m1, s1, n1) = a.entries["eval.a"];
        let (m2, s2, n2) = b.entries["eval.a"];
        assert_eq!(n1, 3);
        assert_eq!(n1, n2);
        assert!((m1 - m2).abs() < 1e-12 && (s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn metric_rows_round_trip() {
        let r = row("eval.x", 3, 0.1 + 0.2, 7);
        assert_eq!(MetricRow::parse(&r.to_csv()).unwrap(), r);
    }
}

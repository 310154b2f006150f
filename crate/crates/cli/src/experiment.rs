//! Runs (head, seed) grids and persists one JSON record per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clspool::heads::HeadKind;
use clspool::model::Model;
use clspool::training::{train, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::setup::TaskData;
use crate::CliError;

/// Per-run artifact; tables are recomputed from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub head: String,
    pub seed: u64,
    pub metric: String,
    pub eval: BTreeMap<String, f64>,
    pub train: BTreeMap<String, f64>,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub num_parameters: usize,
    pub wall_seconds: f64,
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub head: HeadKind,
    pub seed: u64,
    pub result: Result<RunRecord, String>,
}

pub fn train_one(
    cfg: &TrainConfig,
    data: &TaskData,
) -> Result<(Model<f32>, RunRecord), clspool::Error> {
    let (model, report) = train::<f32>(cfg, &data.train, &data.eval)?;
    let record = RunRecord {
        task: data.name.clone(),
        head: report.head.clone(),
        seed: report.seed,
        metric: report.metric.clone(),
        eval: report.eval.clone(),
        train: report.train.clone(),
        train_examples: report.train_examples,
        eval_examples: report.eval_examples,
        steps: report.steps,
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        num_parameters: report.num_parameters,
        wall_seconds: report.wall_seconds,
        config: cfg.to_pairs().into_iter().collect(),
    };
    Ok((model, record))
}

/// Trains every (head, seed) pair, at most `jobs` at a time. Outcomes come
/// back in head-major, seed-minor order whatever the completion order.
pub fn run_grid(
    base: &TrainConfig,
    heads: &[HeadKind],
    seeds: &[u64],
    data: &TaskData,
    jobs: usize,
) -> Result<Vec<RunOutcome>, CliError> {
    let plan: Vec<(HeadKind, u64)> = heads
        .iter()
        .flat_map(|&h| seeds.iter().map(move |&s| (h, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    let outcomes = pool.install(|| {
        plan.par_iter()
            .map(|&(head, seed)| {
                let mut cfg = base.clone();
                cfg.head = head;
                cfg.seed = seed;
                let result = train_one(&cfg, data)
                    .map(|(_, r)| r)
                    .map_err(|e| e.to_string());
                RunOutcome { head, seed, result }
            })
            .collect()
    });
    Ok(outcomes)
}

/// File-system friendly form of a head spec: `maxseq+mha:k=3,h=4` →
/// `maxseq-mha_k3_h4`.
pub fn slug(head: &str) -> String {
    head.replace('+', "-")
        .replace([':', ','], "_")
        .replace('=', "")
}

pub fn run_path(dir: &Path, head: &HeadKind, seed: u64) -> PathBuf {
    dir.join(format!("{}_seed{seed}.json", slug(&head.to_string())))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_records(dir: &Path, outcomes: &[RunOutcome]) -> Result<(), CliError> {
    for o in outcomes {
        if let Ok(r) = &o.result {
            write_json(&run_path(dir, &o.head, o.seed), r)?;
        }
    }
    Ok(())
}

pub fn read_record(path: &Path) -> Result<RunRecord, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("maxseq+mha:k=3,h=4"), "maxseq-mha_k3_h4");
        assert_eq!(slug("baseline"), "baseline");
        assert_eq!(slug("mha:h=4"), "mha_h4");
    }
}

//! Per-task metrics, the average relative performance change against a local
//! baseline, and result serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::LayerWeights;
use crate::config::ExperimentConfig;
use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::model::TaskId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// `0` when higher is better, `1` when lower is better.
    pub fn flag(self) -> u8 {
        match self {
            Direction::HigherBetter => 0,
            Direction::LowerBetter => 1,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task_id: TaskId,
    pub value: f64,
    pub direction: Direction,
}

impl TaskMetric {
    pub fn new(task_id: impl Into<TaskId>, value: f64, direction: Direction) -> Self {
        Self {
            task_id: task_id.into(),
            value,
            direction,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.direction {
            Direction::LowerBetter => "rmse",
            Direction::HigherBetter => "accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientTaskMetric {
    pub client: ClientId,
    #[serde(flatten)]
    pub metric: TaskMetric,
}

fn relative_change(fed: &TaskMetric, local: &TaskMetric, label: &str) -> Result<f64> {
    if fed.direction != local.direction {
        return Err(Error::InvalidArgument(format!("direction differs for {label}")));
    }
    if local.value == 0.0 {
        return Err(Error::InvalidArgument(format!("local metric of {label} is zero")));
    }
    Ok(local.direction.sign() * (fed.value - local.value) / local.value)
}

fn average_percent(changes: impl ExactSizeIterator<Item = f64>) -> Result<f64> {
    let n = changes.len();
    if n == 0 {
        return Err(Error::EmptyInput("delta_m"));
    }
    Ok(100.0 * changes.sum::<f64>() / n as f64)
}

/// Average per-task change against the local baseline, in percent:
/// `100/N · Σ (−1)^{l_i} (M_fed,i − M_local,i) / M_local,i`.
///
/// Tasks are matched by id, so the result does not depend on list order.
pub fn delta_m(fed: &[TaskMetric], local: &[TaskMetric]) -> Result<f64> {
    let index = |ms: &[TaskMetric]| -> Result<BTreeMap<TaskId, TaskMetric>> {
        let mut map = BTreeMap::new();
        for m in ms {
            if map.insert(m.task_id.clone(), m.clone()).is_some() {
                return Err(Error::InvalidArgument(format!("task {} listed twice", m.task_id)));
            }
        }
        Ok(map)
    };
    let fed = index(fed)?;
    let local = index(local)?;
    if fed.len() != local.len() || fed.keys().zip(local.keys()).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument("task sets of fed and local differ".into()));
    }
    let changes = fed
        .iter()
        .zip(local.values())
        .map(|((id, f), l)| relative_change(f, l, id.as_str()))
        .collect::<Result<Vec<f64>>>()?;
    average_percent(changes.into_iter())
}

/// [`delta_m`] over every (client, task) pair of a federation.
pub fn delta_m_clients(fed: &[ClientTaskMetric], local: &[ClientTaskMetric]) -> Result<f64> {
    let index = |ms: &[ClientTaskMetric]| -> Result<BTreeMap<(ClientId, TaskId), TaskMetric>> {
        let mut map = BTreeMap::new();
        for m in ms {
            let key = (m.client.clone(), m.metric.task_id.clone());
            if map.insert(key, m.metric.clone()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "{}/{} listed twice",
                    m.client, m.metric.task_id
                )));
            }
        }
        Ok(map)
    };
    let fed = index(fed)?;
    let local = index(local)?;
    if fed.len() != local.len() || fed.keys().zip(local.keys()).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument("client task sets of fed and local differ".into()));
    }
    let changes = fed
        .iter()
        .zip(local.values())
        .map(|(((c, t), f), l)| relative_change(f, l, &format!("{c}/{t}")))
        .collect::<Result<Vec<f64>>>()?;
    average_percent(changes.into_iter())
}

/// Everything recorded for one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean training loss per client over the round's local steps.
    pub train_loss: BTreeMap<ClientId, f64>,
    /// Empty on rounds that were not evaluated.
    pub metrics: Vec<ClientTaskMetric>,
    pub alpha: BTreeMap<ClientId, f64>,
    pub beta: BTreeMap<ClientId, LayerWeights>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub rounds: Vec<RoundRecord>,
    pub final_metrics: Vec<ClientTaskMetric>,
    /// Against the local baseline with the same config and seed, in percent.
    pub delta_m: Option<f64>,
    pub config: ExperimentConfig,
    pub manifest: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const WEIGHTS_FILE: &str = "hyper_weights.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Serialize)]
struct Summary<'a> {
    delta_m: Option<f64>,
    delta_m_display: Option<String>,
    rounds: usize,
    final_metrics: &'a [ClientTaskMetric],
    config: &'a ExperimentConfig,
    manifest: &'a BTreeMap<String, String>,
    wall_time_secs: f64,
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(ser)?;
    w.write_record(header).map_err(ser)?;
    for row in rows {
        w.write_record(&row).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` (one row per round, client and task),
/// `hyper_weights.csv` and `summary.json` into `out_dir`.
pub fn emit(result: &RunResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let metric_rows = result.rounds.iter().flat_map(|r| {
        r.metrics.iter().map(move |m| {
            vec![
                r.round.to_string(),
                m.client.to_string(),
                m.metric.task_id.to_string(),
                m.metric.metric_name().to_string(),
                m.metric.direction.flag().to_string(),
                m.metric.value.to_string(),
            ]
        })
    });
    write_csv(
        &out_dir.join(METRICS_FILE),
        &["round", "client", "task", "metric", "lower_is_better", "value"],
        metric_rows,
    )?;

    let weight_rows = result.rounds.iter().flat_map(|r| {
        let alphas = r.alpha.iter().map(move |(c, a)| {
            vec![
                r.round.to_string(),
                c.to_string(),
                "alpha".to_string(),
                String::new(),
                String::new(),
                a.to_string(),
            ]
        });
        let betas = r.beta.iter().flat_map(move |(c, tasks)| {
            tasks.iter().flat_map(move |(t, layers)| {
                layers.iter().map(move |(l, b)| {
                    vec![
                        r.round.to_string(),
                        c.to_string(),
                        "beta".to_string(),
                        t.to_string(),
                        l.clone(),
                        b.to_string(),
                    ]
                })
            })
        });
        alphas.chain(betas)
    });
    write_csv(
        &out_dir.join(WEIGHTS_FILE),
        &["round", "client", "weight", "task", "layer", "value"],
        weight_rows,
    )?;

    let summary = Summary {
        delta_m: result.delta_m,
        delta_m_display: result.delta_m.map(|d| format!("{d:+.2}")),
        rounds: result.rounds.len(),
        final_metrics: &result.final_metrics,
        config: &result.config,
        manifest: &result.manifest,
        wall_time_secs: result.wall_time_secs,
    };
    let path = out_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Serialization {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Final metrics stored in a result directory's summary.
pub fn load_final_metrics(out_dir: &Path) -> Result<Vec<ClientTaskMetric>> {
    #[derive(Deserialize)]
    struct Partial {
        final_metrics: Vec<ClientTaskMetric>,
    }
    let path = out_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let partial: Partial = serde_json::from_str(&text).map_err(|e| Error::Serialization {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(partial.final_metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hb(t: &str, v: f64) -> TaskMetric {
        TaskMetric::new(t, v, Direction::HigherBetter)
    }
    fn lb(t: &str, v: f64) -> TaskMetric {
        TaskMetric::new(t, v, Direction::LowerBetter)
    }

    #[test]
    fn equal_metrics_give_zero() {
        let m = vec![hb("a", 0.7), lb("b", 1.3)];
        assert_eq!(delta_m(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn sign_follows_direction() {
        assert!(delta_m(&[hb("a", 0.8)], &[hb("a", 0.7)]).unwrap() > 0.0);
        assert!(delta_m(&[hb("a", 0.6)], &[hb("a", 0.7)]).unwrap() < 0.0);
        assert!(delta_m(&[lb("a", 0.9)], &[lb("a", 1.0)]).unwrap() > 0.0);
        assert!(delta_m(&[lb("a", 1.1)], &[lb("a", 1.0)]).unwrap() < 0.0);
        let d = delta_m(&[lb("a", 0.9)], &[lb("a", 1.0)]).unwrap();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_reordering() {
        let fed = vec![hb("a", 0.8), lb("b", 0.9), hb("c", 0.1)];
        let local = vec![hb("a", 0.7), lb("b", 1.0), hb("c", 0.2)];
        let mut fed_r = fed.clone();
        fed_r.reverse();
        assert_eq!(delta_m(&fed, &local).unwrap(), delta_m(&fed_r, &local).unwrap());
    }

    #[test]
    fn error_cases() {
        assert!(delta_m(&[hb("a", 1.0)], &[hb("b", 1.0)]).is_err());
        assert!(delta_m(&[hb("a", 1.0)], &[hb("a", 0.0)]).is_err());
        assert!(delta_m(&[hb("a", 1.0)], &[lb("a", 1.0)]).is_err());
        assert!(delta_m(&[], &[]).is_err());
        assert!(delta_m(&[hb("a", 1.0), hb("a", 2.0)], &[hb("a", 1.0), hb("a", 2.0)]).is_err());
    }

    #[test]
    fn client_keyed_variant() {
        let m = |c: &str, v: f64| ClientTaskMetric {
            client: c.into(),
            metric: lb("t0", v),
        };
        let d = delta_m_clients(&[m("x", 0.5), m("y", 2.0)], &[m("x", 1.0), m("y", 2.0)]).unwrap();
        assert!((d - 25.0).abs() < 1e-12);
    }
}

//! Episode-level safety and return metrics, the per-epoch log record, and
//! JSONL to CSV conversion.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub total_reward: f64,
    /// Environment steps with a safety violation.
    pub total_cost: u64,
    /// Environment steps.
    pub length: u64,
}

impl EpisodeStats {
    pub fn new(total_reward: f64, total_cost: u64, length: u64) -> Result<Self> {
        if total_cost > length {
            return Err(Error::Invalid(format!("cost {total_cost} exceeds episode length {length}")));
        }
        Ok(EpisodeStats { total_reward, total_cost, length })
    }

    /// Whether the episode stayed within a violation budget `d`.
    pub fn within_budget(&self, d: u64) -> bool {
        self.total_cost <= d
    }
}

fn nonempty(episodes: &[EpisodeStats], what: &str) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Invalid(format!("{what} needs at least one episode")));
    }
    Ok(episodes.len() as f64)
}

/// Mean violations per episode.
pub fn cost_return(episodes: &[EpisodeStats]) -> Result<f64> {
    let n = nonempty(episodes, "cost_return")?;
    Ok(episodes.iter().map(|e| e.total_cost as f64).sum::<f64>() / n)
}

/// Mean total reward per episode.
pub fn reward_return(episodes: &[EpisodeStats]) -> Result<f64> {
    let n = nonempty(episodes, "reward_return")?;
    Ok(episodes.iter().map(|e| e.total_reward).sum::<f64>() / n)
}

/// Violations per environment step over a whole training run.
pub fn cost_regret(cumulative_cost: u64, total_env_steps: u64) -> Result<f64> {
    if total_env_steps == 0 {
        return Err(Error::Invalid("cost_regret needs at least one environment step".into()));
    }
    Ok(cumulative_cost as f64 / total_env_steps as f64)
}

/// Regret relative to a baseline run; `None` when the baseline never
/// violated anything.
pub fn normalized_regret(ours: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| ours / baseline)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub env_steps: u64,
    pub reward_return: f64,
    pub cost_return: f64,
    pub cost_regret_running: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_b1")]
    pub l_b1: f64,
    #[serde(rename = "L_b2")]
    pub l_b2: f64,
    #[serde(rename = "L_b3")]
    pub l_b3: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    pub critic_loss: f64,
}

/// Output of the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub reward_return: f64,
    pub cost_return: f64,
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("log line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Rewrites a JSONL training log as CSV with a header row. Returns the
/// number of records written.
pub fn log_to_csv(reader: impl BufRead, writer: impl Write) -> Result<usize> {
    let records = read_log(reader)?;
    let mut w = csv::Writer::from_writer(writer);
    for r in &records {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(records.len())
}

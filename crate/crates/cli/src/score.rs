//! Reward-engine passthrough over line-delimited records.

use std::io::{BufRead, Write};

use ghostline_core::reward::{score, RewardBreakdown, TaskClass};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub class: TaskClass,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub class: TaskClass,
    pub r_think: f64,
    pub r_task: f64,
    pub total: f64,
    pub think_branch: String,
    pub task_branch: String,
}

impl From<RewardBreakdown> for ScoreLine {
    fn from(b: RewardBreakdown) -> Self {
        Self {
            class: b.class,
            r_think: b.r_think.value(),
            r_task: b.r_task.value(),
            total: b.total.value(),
            think_branch: b.think_branch,
            task_branch: b.task_branch,
        }
    }
}

/// Scores every non-blank `{"class": .., "output": ..}` line of `input`.
pub fn score_lines(input: impl BufRead, mut out: impl Write) -> anyhow::Result<usize> {
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreInput = serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("line {}: {e}", i + 1))?;
        let scored = ScoreLine::from(score(&rec.output, rec.class));
        writeln!(out, "{}", serde_json::to_string(&scored)?)?;
        n += 1;
    }
    Ok(n)
}

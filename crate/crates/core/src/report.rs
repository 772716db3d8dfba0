//! Run report emitted by the CLI: config echo, per-step occupancy, coverage,
//! and modeled cache size. All wall-clock measurements live in one `timings`
//! block so determinism checks can mask them in a single place.

use serde::{Deserialize, Serialize};

use crate::baselines::PolicyConfig;
use crate::budget::BudgetPlan;
use crate::domain::{ScoreWeights, TokenLayout};
use crate::simgen::{CoverageReport, ExperimentResult, TrajectoryConfig};

/// Where the frames came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum StreamSource {
    Trace { path: String },
    Generated { config: TrajectoryConfig },
}

/// Echo of everything that determined the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigEcho {
    pub policy: PolicyConfig,
    pub weights: ScoreWeights,
    pub layout: TokenLayout,
    pub stream: StreamSource,
    pub seed: Option<u64>,
}

/// Per-step occupancy and eviction counts, one entry per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: u64,
    pub occupancy_pre_append: Vec<usize>,
    pub occupancy_post_append: Vec<usize>,
    pub evicted: Vec<usize>,
}

/// Wall-clock figures, masked to zero for byte-identical comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: f64,
    pub per_step_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfigEcho,
    pub plan: BudgetPlan,
    pub steps: Vec<StepReport>,
    pub coverage: CoverageReport,
    pub final_retained_tokens: usize,
    pub bytes_per_token: u64,
    pub modeled_cache_bytes: u64,
    pub timings: Timings,
}

impl RunReport {
    pub fn from_experiment(
        config: RunConfigEcho,
        plan: BudgetPlan,
        result: &ExperimentResult,
        bytes_per_token: u64,
    ) -> Self {
        let n = config.layout.tokens_per_frame();
        let steps = result
            .steps
            .iter()
            .map(|s| {
                let pre: Vec<usize> = s.retained_counts.iter().map(|c| c.total()).collect();
                let post: Vec<usize> = pre.iter().map(|&p| p + n).collect();
                StepReport {
                    t: s.frame_index,
                    occupancy_pre_append: pre,
                    occupancy_post_append: post,
                    evicted: s.evicted.iter().map(Vec::len).collect(),
                }
            })
            .collect();
        let per_step_ms: Vec<f64> = result
            .steps
            .iter()
            .map(|s| s.step_time.as_secs_f64() * 1e3)
            .collect();
        let total_ms = per_step_ms.iter().sum();
        RunReport {
            config,
            plan,
            steps,
            coverage: result.coverage.clone(),
            final_retained_tokens: result.final_retained_tokens,
            bytes_per_token,
            modeled_cache_bytes: result.final_retained_tokens as u64 * bytes_per_token,
            timings: Timings {
                total_ms,
                per_step_ms,
            },
        }
    }

    /// Zeroes every wall-clock field.
    pub fn mask_timings(&mut self) {
        self.timings.total_ms = 0.0;
        for ms in &mut self.timings.per_step_ms {
            *ms = 0.0;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

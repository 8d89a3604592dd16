//! Two-stage training.
//!
//! Stage 1 fine-tunes the model to emit a delimiter-wrapped gold graph
//! after the extraction instruction. Stage 2 samples parallel candidate
//! subgraphs per instruction, scores each by how much it lowers the mixed
//! answer loss relative to answering without a graph, turns the centered
//! improvements into rewards, and applies a REINFORCE update alongside the
//! supervised base and graph answer losses.

mod data;
mod layout;
mod rl;
mod sft;

pub use data::{load_dataset, RejectedExample, TrainingExample};
pub use layout::{assemble_knowledge, build_x_ids, ANSWER_CUE};
pub use rl::{
    sample_parallel_subgraphs, train_rl, CandidateSource, InjectedCandidates, RlReport,
    SubgraphCandidate,
};
pub use sft::{train_sft, SftReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::kg::KgError;
use crate::lm::{LmError, Reduction};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Baseline used to center candidate advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Mean advantage over the example's own candidates.
    PerExampleMean,
    /// Exponential moving average of advantages across examples.
    BatchMovingAverage,
}

/// What the graph answer loss measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphLossMode {
    /// Mixed log-likelihood (the mixing network's output).
    Mixed,
    /// Raw graph-conditioned NLL, for ablation.
    RawNll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Weight of the base answer loss in the total; the graph answer loss
    /// gets 1 - alpha.
    pub alpha: f32,
    /// Weight of the REINFORCE term.
    pub beta: f32,
    /// Number of parallel subgraph candidates per example.
    pub parallel_subgraphs: usize,
    /// Sampling temperature for candidate construction.
    pub temperature: f32,
    /// Token budget for one serialized graph.
    pub max_kg_tokens: usize,
    pub stage1_lr: f32,
    pub stage2_lr: f32,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    pub graph_loss_mode: GraphLossMode,
    /// Reduction for log pi(g | x): mean per token keeps rewards comparable
    /// across graphs of different lengths.
    pub graph_logprob_reduction: Reduction,
    pub weight_decay: f32,
    /// Token budget reserved for the answer segment when sampling.
    pub answer_reserve_tokens: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            // alpha and beta have no published values; these defaults are
            // this implementation's choice.
            alpha: 0.5,
            beta: 1.0,
            parallel_subgraphs: 3,
            temperature: 0.6,
            max_kg_tokens: 2048,
            stage1_lr: 5e-5,
            stage2_lr: 5e-7,
            stage1_epochs: 5,
            stage2_epochs: 3,
            grad_accum_steps: 8,
            seed: 0,
            baseline_mode: BaselineMode::PerExampleMean,
            graph_loss_mode: GraphLossMode::Mixed,
            graph_logprob_reduction: Reduction::Mean,
            weight_decay: 0.0,
            answer_reserve_tokens: 64,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Parameter(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.beta < 0.0 {
            return Err(TrainError::Parameter(format!("beta {} negative", self.beta)));
        }
        if self.parallel_subgraphs == 0 {
            return Err(TrainError::Parameter("parallel_subgraphs must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::Parameter(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.grad_accum_steps == 0 {
            return Err(TrainError::Parameter("grad_accum_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One example's candidate rewards: advantages are the base-vs-graph loss
/// improvements, centered by the baseline and clipped at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    pub l_base: f32,
    pub advantages: Vec<f32>,
    pub baseline: f32,
    pub rewards: Vec<f32>,
}

/// a_k = l_base - l_graph_k, baseline = mean_k(a_k),
/// reward_k = max(0, a_k - baseline).
///
/// With the mean baseline at least one advantage sits at or below the
/// mean, so at least one reward is exactly zero, and adding a constant to
/// every l_graph_k shifts advantages and baseline together, leaving
/// rewards unchanged.
pub fn compute_rewards(l_base: f32, l_graphs: &[f32]) -> Result<RewardRecord, TrainError> {
    if l_graphs.is_empty() {
        return Err(TrainError::Parameter(
            "compute_rewards requires at least one candidate loss".into(),
        ));
    }
    let advantages: Vec<f32> = l_graphs.iter().map(|&lg| l_base - lg).collect();
    let baseline =
        (advantages.iter().map(|&a| a as f64).sum::<f64>() / advantages.len() as f64) as f32;
    let rewards = advantages.iter().map(|&a| (a - baseline).max(0.0)).collect();
    Ok(RewardRecord {
        l_base,
        advantages,
        baseline,
        rewards,
    })
}

/// Centered rewards against an externally supplied baseline (the moving-
/// average mode); non-negativity still holds, the at-least-one-zero
/// property does not.
pub fn compute_rewards_with_baseline(
    l_base: f32,
    l_graphs: &[f32],
    baseline: f32,
) -> Result<RewardRecord, TrainError> {
    if l_graphs.is_empty() {
        return Err(TrainError::Parameter(
            "compute_rewards requires at least one candidate loss".into(),
        ));
    }
    let advantages: Vec<f32> = l_graphs.iter().map(|&lg| l_base - lg).collect();
    let rewards = advantages.iter().map(|&a| (a - baseline).max(0.0)).collect();
    Ok(RewardRecord {
        l_base,
        advantages,
        baseline,
        rewards,
    })
}

/// -sum_k reward_k * logprob_k / p, rewards treated as constants.
/// Evaluated in the same sequential f32 order as the tape's weighted sum.
pub fn loss_reinforce(rewards: &[f32], graph_logprobs: &[f32]) -> Result<f32, TrainError> {
    if rewards.len() != graph_logprobs.len() {
        return Err(TrainError::Contract(format!(
            "{} rewards vs {} logprobs",
            rewards.len(),
            graph_logprobs.len()
        )));
    }
    let p = rewards.len() as f32;
    let mut acc = 0.0f32;
    for (&r, &lp) in rewards.iter().zip(graph_logprobs) {
        acc += (-r / p) * lp;
    }
    Ok(acc)
}

/// The four reported loss terms; `l_total` always recombines bit-exactly
/// as `alpha * l_base + (1 - alpha) * l_graph + beta * l_reinforce`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_base: f32,
    pub l_graph: f32,
    pub l_reinforce: f32,
    pub l_total: f32,
}

pub fn total_loss(
    l_base: f32,
    l_graph: f32,
    l_reinforce: f32,
    alpha: f32,
    beta: f32,
) -> Result<LossBreakdown, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if beta < 0.0 || !beta.is_finite() {
        return Err(TrainError::Parameter(format!("beta {beta} invalid")));
    }
    let l_total = alpha * l_base + (1.0 - alpha) * l_graph + beta * l_reinforce;
    Ok(LossBreakdown {
        l_base,
        l_graph,
        l_reinforce,
        l_total,
    })
}

/// Cosine decay from `lr` to zero over `total` steps.
pub(crate) fn cosine_lr(lr: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return lr;
    }
    let t = (step as f64 / total as f64).min(1.0);
    (lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

//! Prompt-guided view aggregation and zero-shot inference.
//!
//! Every view feature is scored by how sharply it points at one candidate
//! category: the maximum of its column in the prompt–view similarity
//! matrix minus the column mean. A softmax over those scores gives the
//! per-view weights, and the descriptor is the weighted sum of views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Logit multiplier used unless configured otherwise.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Discriminative-score weighted sum.
    Peva,
    /// Arithmetic mean of the views.
    Avg,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Peva => "peva",
            Aggregator::Avg => "avg",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AggregationResult {
    /// N×M prompt–view similarities.
    pub similarity: Tensor,
    /// Per-view discriminative scores.
    pub scores: Vec<f64>,
    /// Per-view weights; a probability simplex.
    pub weights: Vec<f64>,
    pub descriptor: Vec<f64>,
}

/// `S[i][j] = tᵢ · vⱼ` for prompts `N×D` and views `M×D`.
pub fn similarity_matrix(prompts: &Tensor, views: &Tensor) -> Result<Tensor> {
    let (_, pd) = prompts.as_matrix()?;
    let (_, vd) = views.as_matrix()?;
    if pd != vd {
        return Err(Error::shape("similarity_matrix", prompts.shape(), views.shape()));
    }
    prompts.matmul_transposed(views)
}

/// Column max minus column mean, one score per view. Never negative.
pub fn discriminative_scores(similarity: &Tensor) -> Vec<f64> {
    let (n, m) = similarity.as_matrix().expect("similarity is a matrix");
    (0..m)
        .map(|j| {
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for i in 0..n {
                let s = similarity.get(i, j);
                max = max.max(s);
                sum += s;
            }
            // max ≥ mean holds mathematically; clamp rounding.
            (max - sum / n as f64).max(0.0)
        })
        .collect()
}

pub fn aggregation_weights(scores: &[f64]) -> Vec<f64> {
    let mut w = scores.to_vec();
    kernels::softmax_in_place(&mut w);
    w
}

fn weighted_sum(views: &Tensor, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; views.cols()];
    for (row, w) in views.row_iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out
}

pub fn aggregate_peva(prompts: &Tensor, views: &Tensor) -> Result<AggregationResult> {
    let similarity = similarity_matrix(prompts, views)?;
    let scores = discriminative_scores(&similarity);
    let weights = aggregation_weights(&scores);
    let descriptor = weighted_sum(views, &weights);
    Ok(AggregationResult {
        similarity,
        scores,
        weights,
        descriptor,
    })
}

pub fn aggregate_average(views: &Tensor) -> Vec<f64> {
    let m = views.rows();
    let mut out = vec![0.0; views.cols()];
    for row in views.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

/// Descriptor for `views` under the chosen aggregator.
pub fn aggregate(mode: Aggregator, prompts: &Tensor, views: &Tensor) -> Result<Vec<f64>> {
    match mode {
        Aggregator::Peva => Ok(aggregate_peva(prompts, views)?.descriptor),
        Aggregator::Avg => {
            if prompts.cols() != views.cols() {
                return Err(Error::shape("aggregate", prompts.shape(), views.shape()));
            }
            Ok(aggregate_average(views))
        }
    }
}

/// `lⱼ = scale · tⱼ · f`.
pub fn zero_shot_logits(prompts: &Tensor, descriptor: &[f64], scale: f64) -> Result<Vec<f64>> {
    let (_, d) = prompts.as_matrix()?;
    if d != descriptor.len() {
        return Err(Error::shape("logits", prompts.shape(), &[descriptor.len()]));
    }
    Ok(prompts
        .row_iter()
        .map(|t| scale * kernels::dot(t, descriptor))
        .collect())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

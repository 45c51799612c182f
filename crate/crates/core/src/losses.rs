//! Subtrajectory log-variance and KL objectives on detached trajectories.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::annealing::AnnealingPath;
use crate::error::{Error, Result};
use crate::sde::ControlPolicy;
use crate::weights::{ParamGrads, RndTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Lv,
    Kl,
}

/// Training data for one subtrajectory: detached points plus the detached
/// normalized log-weights `log W_{n−1}` carried into it.
#[derive(Debug, Clone)]
pub struct SubBatch {
    pub n: usize,
    /// `[B, L+1, d]`.
    pub points: Array3<f64>,
    pub prev_log_weights: Array1<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    pub subs: Vec<SubBatch>,
    /// Last resampling subtrajectory per particle (0 = prior time).
    pub last_resample: Vec<usize>,
}

/// `(1/K) Σ_k (lw_k − mean)²` and its cotangent `∂/∂lw`.
pub fn lv_term(log_rnd: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = log_rnd.len();
    if k < 2 {
        return Err(Error::Loss(format!("log-variance loss needs at least 2 samples, got {k}")));
    }
    let kf = k as f64;
    let mean = log_rnd.iter().sum::<f64>() / kf;
    let value = log_rnd.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kf;
    let cot = log_rnd.iter().map(|v| 2.0 * (v - mean) / kf).collect();
    Ok((value, cot))
}

/// `−Σ_k detach(K·W_k)·(1/K)·lw_k` and its cotangent.
pub fn kl_term(log_rnd: &[f64], prev_log_weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if log_rnd.len() != prev_log_weights.len() || log_rnd.is_empty() {
        return Err(Error::Shape(format!(
            "{} log-RNDs but {} weights",
            log_rnd.len(),
            prev_log_weights.len()
        )));
    }
    let w: Vec<f64> = prev_log_weights.iter().map(|lw| lw.exp()).collect();
    let value = -log_rnd.iter().zip(&w).map(|(l, w)| w * l).sum::<f64>();
    Ok((value, w.iter().map(|w| -w).collect()))
}

/// Sum of per-subtrajectory LV terms.
pub fn lv_loss(log_rnds: &[Vec<f64>]) -> Result<f64> {
    log_rnds.iter().map(|lw| lv_term(lw).map(|t| t.0)).sum()
}

/// Sum of per-subtrajectory KL terms.
pub fn kl_loss(log_rnds: &[Vec<f64>], prev_log_weights: &[Vec<f64>]) -> Result<f64> {
    if log_rnds.len() != prev_log_weights.len() {
        return Err(Error::Shape("one weight vector per subtrajectory is required".into()));
    }
    log_rnds
        .iter()
        .zip(prev_log_weights)
        .map(|(l, w)| kl_term(l, w).map(|t| t.0))
        .sum()
}

/// Loss value and its gradient with trajectories held fixed.
pub struct LossOutput {
    pub value: f64,
    pub per_subtrajectory: Vec<f64>,
    /// Recomputed log-RNDs, one vector per subtrajectory.
    pub log_rnds: Vec<Array1<f64>>,
    pub grads: ParamGrads,
}

pub fn loss_and_grad(batch: &LossBatch, kind: LossKind, path: &AnnealingPath, policy: &ControlPolicy) -> Result<LossOutput> {
    let mut grads = ParamGrads::zeros(path, policy);
    let mut per = Vec::with_capacity(batch.subs.len());
    let mut log_rnds = Vec::with_capacity(batch.subs.len());
    for sub in &batch.subs {
        let (values, tape) = RndTape::forward(path, policy, sub.n, sub.points.view())?;
        let lw = values.as_slice().expect("contiguous");
        let (value, cot) = match kind {
            LossKind::Lv => lv_term(lw)?,
            LossKind::Kl => kl_term(lw, sub.prev_log_weights.as_slice().expect("contiguous"))?,
        };
        tape.backward(path, policy, &cot, &mut grads)?;
        per.push(value);
        log_rnds.push(values);
    }
    Ok(LossOutput {
        value: per.iter().sum(),
        per_subtrajectory: per,
        log_rnds,
        grads,
    })
}

//! Measurement suite: accuracy, calibration, likelihood, FGSM robustness,
//! OoD ROC-AUC and effective gradient flow.
//!
//! Each metric has a pure function over stored predictions (`*_from_*`) and a
//! model-level wrapper that runs the network first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::NetworkSpec;
use crate::engine::{self, softmax, Batch, EngineError, ParamState};
use crate::mask::Mask;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("bin count must be at least 1")]
    Bins,
    #[error("invalid attack config: {0}")]
    Attack(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_FGSM_EPSILON: f64 = 8.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub input_min: f64,
    pub input_max: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { epsilon: DEFAULT_FGSM_EPSILON, input_min: 0.0, input_max: 1.0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(EvalError::Attack(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.input_min < self.input_max) {
            return Err(EvalError::Attack(format!("input range [{}, {}] is empty", self.input_min, self.input_max)));
        }
        Ok(())
    }
}

/// One evaluation snapshot. Optional metrics are `None` when toggled off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub clean_accuracy: f64,
    pub ece: Option<f64>,
    pub nll: Option<f64>,
    pub fgsm_accuracy: Option<f64>,
    pub ood_auc: Option<f64>,
    pub noise_auc: Option<f64>,
    pub grad_flow_norm: Option<f64>,
    pub params: usize,
    pub flops: u64,
    pub sparsity: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = logits.iter().zip(labels).filter(|(z, &y)| argmax(z) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Equal-width binning on confidence in `[0, 1]`; confidence 1 lands in the
/// top bin. `ECE = Σ_b (n_b / N) |acc_b − conf_b|`.
pub fn ece_from_confidences(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64, EvalError> {
    if bins == 0 {
        return Err(EvalError::Bins);
    }
    if confidences.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

fn confidence_and_correct(logits: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let p = softmax(z);
            let k = argmax(z);
            (p[k], k == y)
        })
        .unzip()
}

pub fn ece_from_logits(logits: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64, EvalError> {
    let (conf, ok) = confidence_and_correct(logits, labels);
    ece_from_confidences(&conf, &ok, bins)
}

/// Mean `−log p(y | x)` computed by log-sum-exp.
pub fn nll_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = logits.iter().zip(labels).map(|(z, &y)| engine::log_sum_exp(z) - z[y]).sum();
    Ok(total / labels.len() as f64)
}

/// Maximum softmax probability per sample.
pub fn max_softmax(logits: &[Vec<f64>]) -> Vec<f64> {
    logits.iter().map(|z| softmax(z).into_iter().fold(0.0, f64::max)).collect()
}

/// Mann–Whitney AUC: probability that an in-distribution score beats an
/// out-of-distribution score, ties counting half.
///
/// Pair counting is exact integer arithmetic. The result is formed so that
/// `auc(a, b) + auc(b, a) == 1.0` holds exactly in floating point.
pub fn auc_from_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<f64, EvalError> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted_out = out_scores.to_vec();
    sorted_out.sort_by(f64::total_cmp);
    // 2·wins + ties
    let mut twice: u128 = 0;
    for &s in in_scores {
        let below = sorted_out.partition_point(|&o| o < s);
        let not_above = sorted_out.partition_point(|&o| o <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    let denom = 2 * in_scores.len() as u128 * out_scores.len() as u128;
    if 2 * twice <= denom {
        Ok(twice as f64 / denom as f64)
    } else {
        Ok(1.0 - (denom - twice) as f64 / denom as f64)
    }
}

/// L2 norm of the weight gradient at unmasked positions.
pub fn grad_flow_from_gradients(grads: &engine::Tensors, mask: &Mask) -> f64 {
    grads
        .0
        .iter()
        .zip(&mask.layers)
        .flat_map(|(g, m)| g.iter().zip(&m.bits).filter(|(_, &keep)| keep).map(|(&v, _)| v * v))
        .sum::<f64>()
        .sqrt()
}

pub fn accuracy(net: &NetworkSpec, params: &ParamState, mask: &Mask, data: &Batch) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    accuracy_from_logits(&engine::logits(net, params, mask, data)?, &data.labels)
}

pub fn ece(net: &NetworkSpec, params: &ParamState, mask: &Mask, data: &Batch, bins: usize) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    ece_from_logits(&engine::logits(net, params, mask, data)?, &data.labels, bins)
}

pub fn nll(net: &NetworkSpec, params: &ParamState, mask: &Mask, data: &Batch) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    nll_from_logits(&engine::logits(net, params, mask, data)?, &data.labels)
}

/// `x ← clamp(x + ε·sign(∇ₓL(θ, x, y)), min, max)` using true labels.
pub fn fgsm_perturb(net: &NetworkSpec, params: &ParamState, mask: &Mask, data: &Batch, attack: &AttackConfig) -> Result<Batch, EvalError> {
    attack.validate()?;
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let grad = engine::input_gradient(net, params, mask, data)?;
    let inputs = data
        .inputs
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| {
            let step = if g > 0.0 {
                attack.epsilon
            } else if g < 0.0 {
                -attack.epsilon
            } else {
                0.0
            };
            (x + step).clamp(attack.input_min, attack.input_max)
        })
        .collect();
    Ok(Batch { inputs, labels: data.labels.clone(), sample_len: data.sample_len })
}

pub fn fgsm_accuracy(net: &NetworkSpec, params: &ParamState, mask: &Mask, data: &Batch, attack: &AttackConfig) -> Result<f64, EvalError> {
    let adv = fgsm_perturb(net, params, mask, data, attack)?;
    accuracy(net, params, mask, &adv)
}

/// Max-softmax OoD detection AUC (in-distribution is the positive class).
pub fn ood_auc(net: &NetworkSpec, params: &ParamState, mask: &Mask, in_data: &Batch, out_data: &Batch) -> Result<f64, EvalError> {
    if in_data.is_empty() || out_data.is_empty() {
        return Err(EvalError::Empty);
    }
    let in_scores = max_softmax(&engine::logits(net, params, mask, in_data)?);
    let out_scores = max_softmax(&engine::logits(net, params, mask, out_data)?);
    auc_from_scores(&in_scores, &out_scores)
}

pub fn grad_flow_norm(net: &NetworkSpec, params: &ParamState, mask: &Mask, batch: &Batch) -> Result<f64, EvalError> {
    let grads = engine::backward(net, params, mask, batch)?;
    Ok(grad_flow_from_gradients(&grads.weights, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn ece_hand_cases() {
        assert_eq!(ece_from_confidences(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
        let e = ece_from_confidences(&[1.0; 4], &[true, false, true, false], 15).unwrap();
        assert_eq!(e, 0.5);
        let conf = [0.2, 0.9, 0.6];
        let ok = [true, false, true];
        let one = ece_from_confidences(&conf, &ok, 1).unwrap();
        let mean_conf = conf.iter().sum::<f64>() / 3.0;
        assert!((one - (2.0 / 3.0 - mean_conf).abs()).abs() < 1e-15);
        assert!(matches!(ece_from_confidences(&conf, &ok, 0), Err(EvalError::Bins)));
        assert!(matches!(ece_from_confidences(&[], &[], 15), Err(EvalError::Empty)));
    }

    #[test]
    fn ece_one_point_per_bin() {
        // bins = N, point i sits in bin i; ECE = mean |1{correct} − conf|.
        let conf = [0.05, 0.35, 0.65, 0.95];
        let ok = [false, true, false, true];
        let e = ece_from_confidences(&conf, &ok, 4).unwrap();
        let hand = (0.05 + 0.65 + 0.65 + 0.05) / 4.0;
        assert!((e - hand).abs() < 1e-15);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_from_scores(&[0.9; 3], &[0.1; 3]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[0.5; 3], &[0.5; 2]).unwrap(), 0.5);
        assert_eq!(auc_from_scores(&[0.9, 0.6], &[0.7, 0.2]).unwrap(), 0.75);
        assert!(auc_from_scores(&[], &[0.2]).is_err());
    }

    #[test]
    fn nll_oracle_cases() {
        let z = vec![vec![0.0; 10]];
        assert!((nll_from_logits(&z, &[3]).unwrap() - 10f64.ln()).abs() < 1e-15);
        let sure = vec![vec![0.0, 800.0]];
        assert_eq!(nll_from_logits(&sure, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn attack_validation() {
        assert!(AttackConfig { epsilon: -1.0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { input_min: 1.0, input_max: 0.0, epsilon: 0.1 }.validate().is_err());
        assert_eq!(AttackConfig::default().epsilon, 8.0 / 255.0);
    }
}

//! Softmax and focal loss with its gradient with respect to the logits.

use super::ClassifierError;

pub const PROB_EPS: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-α_t (1 - p_t)^γ ln p_t` with `p_t = probs[target]` clamped to `[ε, 1-ε]`.
pub fn focal_loss(probs: &[f64], target: usize, alpha: &[f64], gamma: f64) -> Result<f64, ClassifierError> {
    let p = *probs.get(target).ok_or(ClassifierError::InvalidTarget {
        target,
        classes: probs.len(),
    })?;
    let alpha_t = alpha.get(target).copied().unwrap_or(1.0);
    let p = clamp_prob(p);
    Ok(-alpha_t * (1.0 - p).powf(gamma) * p.ln())
}

/// Focal loss on raw logits and its gradient `dL/dlogits`.
pub fn focal_loss_grad(
    logits: &[f64],
    target: usize,
    alpha_t: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let p = clamp_prob(probs[target]);
    let q = 1.0 - p;
    let loss = -alpha_t * q.powf(gamma) * p.ln();
    // p * dL/dp
    let focus = if gamma == 0.0 {
        0.0
    } else {
        gamma * p * q.powf(gamma - 1.0) * p.ln()
    };
    let g = alpha_t * (focus - q.powf(gamma));
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| g * (if j == target { 1.0 } else { 0.0 } - pj))
        .collect();
    (loss, grad)
}

//! Monte Carlo dropout inference, threshold calibration and triage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{argmax, softmax};
use super::model::{ClassifierModel, DropoutMasks};
use super::ClassifierError;
use crate::domain::{DiseaseLabel, PatientRecord};
use crate::exec::Exec;
use crate::preprocess::Preprocessor;

/// How the per-class variance vector collapses to the scalar used for triage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyReduction {
    #[default]
    PredictedClassVariance,
    MeanVariance,
    PredictiveEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McdConfig {
    pub passes: usize,
    pub seed: u64,
    pub reduction: UncertaintyReduction,
}

impl Default for McdConfig {
    fn default() -> Self {
        Self {
            passes: 30,
            seed: 0,
            reduction: UncertaintyReduction::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCDResult {
    pub mean_probs: Vec<f64>,
    pub variance: Vec<f64>,
    pub uncertainty: f64,
    pub passes: usize,
}

impl MCDResult {
    pub fn predicted(&self) -> usize {
        argmax(&self.mean_probs)
    }
}

fn reduce(mean: &[f64], variance: &[f64], how: UncertaintyReduction) -> f64 {
    match how {
        UncertaintyReduction::PredictedClassVariance => variance[argmax(mean)],
        UncertaintyReduction::MeanVariance => variance.iter().sum::<f64>() / variance.len() as f64,
        UncertaintyReduction::PredictiveEntropy => mean
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum::<f64>()
            .max(0.0),
    }
}

/// Softmax output of pass `t`. Each pass owns ChaCha8 stream `t` of `seed`,
/// so passes are independent of evaluation order.
pub fn stochastic_pass(model: &ClassifierModel, x: &[f64], seed: u64, t: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    let masks = DropoutMasks::sample(&model.config, &mut rng);
    softmax(&model.forward_fused(x, Some(&masks)))
}

/// T dropout-active passes over a fused input; mean and population variance
/// of the softmax outputs.
pub fn mc_dropout_predict(
    model: &ClassifierModel,
    x: &[f64],
    cfg: &McdConfig,
    exec: Exec,
) -> Result<MCDResult, ClassifierError> {
    if cfg.passes < 1 {
        return Err(ClassifierError::InvalidPasses(cfg.passes));
    }
    model.check_input(x)?;
    let c = model.config.n_classes;

    if model.config.dropout_rate == 0.0 {
        let mean = softmax(&model.forward_fused(x, None));
        let variance = vec![0.0; c];
        let uncertainty = reduce(&mean, &variance, cfg.reduction);
        return Ok(MCDResult {
            mean_probs: mean,
            variance,
            uncertainty,
            passes: cfg.passes,
        });
    }

    let outputs = exec.map_range(cfg.passes, |t| stochastic_pass(model, x, cfg.seed, t));
    let t = cfg.passes as f64;
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    for f in &outputs {
        for j in 0..c {
            sum[j] += f[j];
            sum_sq[j] += f[j] * f[j];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let variance: Vec<f64> = (0..c)
        .map(|j| (sum_sq[j] / t - mean[j] * mean[j]).max(0.0))
        .collect();
    let uncertainty = reduce(&mean, &variance, cfg.reduction);
    Ok(MCDResult {
        mean_probs: mean,
        variance,
        uncertainty,
        passes: cfg.passes,
    })
}

/// Type-7 empirical quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub target_flag_rate: f64,
    pub uncertainties: Vec<f64>,
    pub flagged: usize,
}

impl Calibration {
    pub fn flag_rate(&self) -> f64 {
        self.flagged as f64 / self.uncertainties.len() as f64
    }
}

/// Sets the threshold at the `(1 - target)` quantile of validation uncertainties.
pub fn calibrate_threshold(
    model: &ClassifierModel,
    val_features: &[Vec<f64>],
    target_flag_rate: f64,
    cfg: &McdConfig,
    exec: Exec,
) -> Result<Calibration, ClassifierError> {
    if val_features.is_empty() {
        return Err(ClassifierError::EmptyValidation);
    }
    if !(target_flag_rate > 0.0 && target_flag_rate < 1.0) {
        return Err(ClassifierError::Config(format!(
            "target flag rate {target_flag_rate} outside (0, 1)"
        )));
    }
    let mut uncertainties = Vec::with_capacity(val_features.len());
    for x in val_features {
        uncertainties.push(mc_dropout_predict(model, x, cfg, exec)?.uncertainty);
    }
    Ok(calibration_from_scores(uncertainties, target_flag_rate))
}

pub fn calibration_from_scores(uncertainties: Vec<f64>, target_flag_rate: f64) -> Calibration {
    let threshold = quantile(&uncertainties, 1.0 - target_flag_rate).unwrap_or(f64::INFINITY);
    let flagged = uncertainties.iter().filter(|&&u| u > threshold).count();
    Calibration {
        threshold,
        target_flag_rate,
        uncertainties,
        flagged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub label: DiseaseLabel,
    pub mcd: MCDResult,
    pub flagged: bool,
    pub threshold_used: f64,
}

pub fn diagnose(
    model: &ClassifierModel,
    x: &[f64],
    threshold: f64,
    cfg: &McdConfig,
    exec: Exec,
) -> Result<DiagnosisResult, ClassifierError> {
    let mcd = mc_dropout_predict(model, x, cfg, exec)?;
    let label = model
        .labels
        .label(mcd.predicted())
        .ok_or_else(|| ClassifierError::Config("label set smaller than output layer".into()))?;
    Ok(DiagnosisResult {
        label,
        flagged: mcd.uncertainty > threshold,
        threshold_used: threshold,
        mcd,
    })
}

/// Preprocess a record and diagnose it.
pub fn classify(
    model: &ClassifierModel,
    pre: &Preprocessor,
    record: &PatientRecord,
    threshold: f64,
    cfg: &McdConfig,
    exec: Exec,
) -> Result<DiagnosisResult, ClassifierError> {
    let x = pre.fused(record)?;
    diagnose(model, &x, threshold, cfg, exec)
}

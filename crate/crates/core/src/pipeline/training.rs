//! Dataset-to-checkpoint training flow and calibration records.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::classifier::{
    self, calibrate_threshold, Calibration, ClassifierModel, McdConfig, ModelConfig, TrainingConfig,
    TrainingHistory, TrainingProfile,
};
use crate::domain::{stratified_split, LabelSet, LabeledDataset};
use crate::exec::Exec;
use crate::preprocess::{smote_oversample, FeaturizerConfig, LabeledFeatures, Preprocessor, SynonymDictionary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub dataset: Option<PathBuf>,
    pub profile: TrainingProfile,
    /// Overrides the profile's epoch count.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub model_seed: u64,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub dropout_rate: f64,
    pub featurizer: FeaturizerConfig,
    /// SMOTE neighbour count; `None` disables oversampling.
    pub smote_k: Option<usize>,
    pub history_csv: Option<PathBuf>,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            profile: TrainingProfile::Default,
            epochs: None,
            seed: 0,
            model_seed: 7,
            split_seed: 42,
            train_fraction: 0.8,
            dropout_rate: 0.2,
            featurizer: FeaturizerConfig::default(),
            smote_k: Some(5),
            history_csv: None,
        }
    }
}

impl TrainingSettings {
    pub fn training_config(&self) -> TrainingConfig {
        let mut cfg = TrainingConfig::profile(self.profile);
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.seed = self.seed;
        cfg
    }

    pub fn split(&self, ds: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset), PipelineError> {
        Ok(stratified_split(ds, self.train_fraction, self.split_seed)?)
    }
}

/// Features for every record, with labels mapped into `labels` by name.
pub fn featurize(
    pre: &Preprocessor,
    ds: &LabeledDataset,
    labels: &LabelSet,
    exec: Exec,
) -> Result<LabeledFeatures, PipelineError> {
    let label_ids = ds
        .records
        .iter()
        .map(|(_, l)| {
            labels
                .index_of(&l.name)
                .ok_or_else(|| PipelineError::Config(format!("label {:?} is not known to the model", l.name)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let features = exec
        .map_slice(&ds.records, |(r, _)| pre.fused(r))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabeledFeatures {
        features,
        labels: label_ids,
    })
}

pub struct FitOutput {
    pub model: ClassifierModel,
    pub history: TrainingHistory,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub train_features: LabeledFeatures,
    pub val_features: LabeledFeatures,
    pub synthetic_samples: usize,
}

/// Split, featurize, oversample the training half and train.
pub fn fit(
    ds: &LabeledDataset,
    settings: &TrainingSettings,
    synonyms: SynonymDictionary,
    exec: Exec,
) -> Result<FitOutput, PipelineError> {
    let (train, validation) = settings.split(ds)?;
    let pre = Preprocessor::new(settings.featurizer.clone())?.with_synonyms(synonyms);
    let labels = ds.label_set.clone();
    let raw_train = featurize(&pre, &train, &labels, exec)?;
    let val_features = featurize(&pre, &validation, &labels, exec)?;
    let (train_features, synthetic_samples) = match settings.smote_k {
        Some(k) => {
            let out = smote_oversample(&raw_train, k, settings.seed, exec)?;
            let added = out.data.len() - raw_train.len();
            (out.data, added)
        }
        None => (raw_train, 0),
    };
    let mut mc = ModelConfig::new(settings.featurizer.dimension, labels.len());
    mc.dropout_rate = settings.dropout_rate;
    let init = ClassifierModel::new(mc, settings.featurizer.clone(), labels, settings.model_seed)?;
    let (model, history) = classifier::train(&init, &train_features, &val_features, &settings.training_config())?;
    Ok(FitOutput {
        model,
        history,
        train,
        validation,
        train_features,
        val_features,
        synthetic_samples,
    })
}

/// What `calibrate` writes; the pipeline reads `threshold` back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub threshold: f64,
    pub target_flag_rate: f64,
    pub flag_rate: f64,
    pub flagged: usize,
    pub validation_size: usize,
    pub mcd: McdConfig,
}

impl CalibrationRecord {
    pub fn new(cal: &Calibration, mcd: McdConfig) -> Self {
        Self {
            threshold: cal.threshold,
            target_flag_rate: cal.target_flag_rate,
            flag_rate: cal.flag_rate(),
            flagged: cal.flagged,
            validation_size: cal.uncertainties.len(),
            mcd,
        }
    }
}

/// Calibrates on the validation half of the configured split.
pub fn calibrate_on_split(
    model: &ClassifierModel,
    ds: &LabeledDataset,
    settings: &TrainingSettings,
    synonyms: SynonymDictionary,
    target_flag_rate: f64,
    mcd: &McdConfig,
    exec: Exec,
) -> Result<Calibration, PipelineError> {
    let (_, validation) = settings.split(ds)?;
    let pre = Preprocessor::new(model.featurizer.clone())?.with_synonyms(synonyms);
    let val = featurize(&pre, &validation, &model.labels, exec)?;
    Ok(calibrate_threshold(model, &val.features, target_flag_rate, mcd, exec)?)
}

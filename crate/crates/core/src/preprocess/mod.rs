//! Text normalization, negation handling, featurization and class balancing.

pub mod features;
pub mod smote;
pub mod text;

use thiserror::Error;

use crate::domain::{DataError, PatientRecord};

pub use features::{
    encode_vitals, featurize_text, FeatureVector, FeaturizerConfig, VitalsVector, VITALS_DIM,
};
pub use smote::{smote_oversample, LabeledFeatures, SampleOrigin, SmoteOutput};
pub use text::{detect_negations, tokenize_and_lemmatize, SynonymDictionary, TokenSequence};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("featurizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Vitals(#[from] DataError),
    #[error("oversampling: {0}")]
    Oversampling(String),
    #[error("synonym dictionary: {0}")]
    Synonyms(String),
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Featurizer config plus optional synonym dictionary: the full text/vitals front end.
#[derive(Debug, Clone, Default)]
pub struct Preprocessor {
    pub config: FeaturizerConfig,
    pub synonyms: SynonymDictionary,
}

impl Preprocessor {
    pub fn new(config: FeaturizerConfig) -> Result<Self, PreprocessError> {
        config.validate()?;
        Ok(Self {
            config,
            synonyms: SynonymDictionary::default(),
        })
    }

    pub fn with_synonyms(mut self, synonyms: SynonymDictionary) -> Self {
        self.synonyms = synonyms;
        self
    }

    /// tokenize -> negation -> synonyms
    pub fn tokens(&self, text: &str) -> TokenSequence {
        let seq = detect_negations(&tokenize_and_lemmatize(text), self.config.negation_window);
        self.synonyms.apply(&seq)
    }

    pub fn text_features(&self, text: &str) -> Result<FeatureVector, PreprocessError> {
        featurize_text(&self.tokens(text), &self.config)
    }

    pub fn record_features(
        &self,
        record: &PatientRecord,
    ) -> Result<(FeatureVector, VitalsVector), PreprocessError> {
        record.validate()?;
        Ok((self.text_features(&record.symptom_text)?, encode_vitals(&record.vitals)?))
    }

    /// Pre-branch fused input: text features followed by the encoded vitals.
    pub fn fused(&self, record: &PatientRecord) -> Result<Vec<f64>, PreprocessError> {
        let (t, v) = self.record_features(record)?;
        let mut x = t.values;
        x.extend(v.values);
        Ok(x)
    }
}

//! Signed feature hashing of token n-grams and min-max vitals encoding.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::text::TokenSequence;
use super::PreprocessError;
use crate::domain::{Sex, Vitals, AGE_RANGE, HEART_RATE_RANGE, SPO2_RANGE, TEMPERATURE_RANGE};

/// Number of vitals fields; the encoded vector holds a (value, mask) pair per field.
pub const VITAL_FIELDS: usize = 5;
pub const VITALS_DIM: usize = 2 * VITAL_FIELDS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub dimension: usize,
    pub seed: u64,
    pub ngram_orders: Vec<usize>,
    pub negation_window: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            dimension: 1024,
            seed: 0x5eed_f00d,
            ngram_orders: vec![1, 2],
            negation_window: 3,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.dimension < 64 || !self.dimension.is_power_of_two() {
            return Err(PreprocessError::Config(format!(
                "dimension {} must be a power of two >= 64",
                self.dimension
            )));
        }
        if self.negation_window < 1 {
            return Err(PreprocessError::Config("negation window must be >= 1".into()));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(PreprocessError::Config("n-gram orders must be non-empty and >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Euclidean norm of `values`: 1 for normal output, 0 when degenerate.
    pub norm: f64,
}

impl FeatureVector {
    pub fn zeros(dimension: usize) -> Self {
        Self {
            values: vec![0.0; dimension],
            norm: 0.0,
        }
    }

    /// L2-normalizes `values`; an all-zero input stays zero and is degenerate.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            values.iter_mut().for_each(|v| *v = 0.0);
            return Self { values, norm: 0.0 };
        }
        values.iter_mut().for_each(|v| *v /= norm);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm == 0.0
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seeded hash of a feature string.
pub fn feature_hash(seed: u64, salt: u64, feature: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    h.write_u64(salt);
    h.write(feature.as_bytes());
    splitmix64(h.finish())
}

/// Adds `±1` for `feature` into `buckets` (length must be a power of two).
pub fn hash_into(buckets: &mut [f64], seed: u64, salt: u64, feature: &str) {
    let h = feature_hash(seed, salt, feature);
    let idx = (h as usize) & (buckets.len() - 1);
    buckets[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
}

/// Hashes every configured n-gram of the (negation-marked) tokens and L2-normalizes.
/// The result is degenerate when nothing survives hashing.
pub fn featurize_text(
    seq: &TokenSequence,
    cfg: &FeaturizerConfig,
) -> Result<FeatureVector, PreprocessError> {
    cfg.validate()?;
    let marked: Vec<_> = seq.marked_tokens().collect();
    let mut buckets = vec![0.0; cfg.dimension];
    let mut gram = String::new();
    for &order in &cfg.ngram_orders {
        if marked.len() < order {
            continue;
        }
        for window in marked.windows(order) {
            gram.clear();
            for (k, tok) in window.iter().enumerate() {
                if k > 0 {
                    gram.push(' ');
                }
                gram.push_str(tok);
            }
            hash_into(&mut buckets, cfg.seed, order as u64, &gram);
        }
    }
    Ok(FeatureVector::normalized(buckets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsVector {
    /// `[temp, temp_mask, spo2, spo2_mask, hr, hr_mask, age, age_mask, sex, sex_mask]`
    pub values: Vec<f64>,
}

fn scale(v: f64, (min, max): (f64, f64)) -> f64 {
    (v - min) / (max - min)
}

/// Min-max scales each field by its valid range. Absent fields encode as 0.5 with mask 0.
pub fn encode_vitals(v: &Vitals) -> Result<VitalsVector, PreprocessError> {
    v.validate()?;
    let mut values = Vec::with_capacity(VITALS_DIM);
    let mut push = |x: Option<f64>| match x {
        Some(s) => values.extend([s, 1.0]),
        None => values.extend([0.5, 0.0]),
    };
    push(v.temperature.map(|t| scale(t, TEMPERATURE_RANGE)));
    push(v.spo2.map(|t| scale(t, SPO2_RANGE)));
    push(v.heart_rate.map(|t| scale(t, HEART_RATE_RANGE)));
    push(v.age.map(|t| scale(t, AGE_RANGE)));
    push(match v.sex {
        Some(Sex::Male) => Some(1.0),
        Some(Sex::Female) => Some(0.0),
        Some(Sex::Unspecified) | None => None,
    });
    Ok(VitalsVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::text::{detect_negations, tokenize_and_lemmatize};

    fn feats(text: &str) -> FeatureVector {
        let seq = detect_negations(&tokenize_and_lemmatize(text), 3);
        featurize_text(&seq, &FeaturizerConfig::default()).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = feats("burning pain in my stomach and nausea");
        let b = feats("burning pain in my stomach and nausea");
        assert_eq!(a, b);
        assert!((a.norm - 1.0).abs() < 1e-6);
        let direct = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((direct - 1.0).abs() < 1e-6);
    }

    #[test]
    fn negation_moves_buckets() {
        let neg = feats("no fever");
        let pos = feats("fever");
        assert!(cosine(&neg.values, &pos.values) < 1.0);
    }

    #[test]
    fn empty_sequence_is_degenerate() {
        let seq = tokenize_and_lemmatize("...");
        let f = featurize_text(&seq, &FeaturizerConfig::default()).unwrap();
        assert!(f.is_degenerate());
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FeaturizerConfig::default();
        cfg.dimension = 1000;
        assert!(cfg.validate().is_err());
        cfg.dimension = 32;
        assert!(cfg.validate().is_err());
        cfg = FeaturizerConfig {
            negation_window: 0,
            ..FeaturizerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vitals_examples() {
        let v = Vitals {
            temperature: Some(101.5),
            ..Vitals::default()
        };
        let e = encode_vitals(&v).unwrap();
        assert!((e.values[0] - 0.575).abs() < 1e-12);
        assert_eq!(e.values[1], 1.0);

        let e = encode_vitals(&Vitals::default()).unwrap();
        for k in 0..VITAL_FIELDS {
            assert_eq!(e.values[2 * k], 0.5);
            assert_eq!(e.values[2 * k + 1], 0.0);
        }

        let v = Vitals {
            spo2: Some(92.0),
            ..Vitals::default()
        };
        let e = encode_vitals(&v).unwrap();
        assert!((e.values[2] - 0.84).abs() < 1e-12);
        assert_eq!(e.values[3], 1.0);
    }

    #[test]
    fn vitals_out_of_range_names_field() {
        let v = Vitals {
            heart_rate: Some(300.0),
            ..Vitals::default()
        };
        let err = encode_vitals(&v).unwrap_err();
        assert!(err.to_string().contains("heart_rate"));
    }
}

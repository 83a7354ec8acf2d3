//! SMOTE oversampling in feature space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PreprocessError;
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0; n];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleOrigin {
    Original(usize),
    /// `base + gap * (neighbor - base)`, indices into the input set.
    Synthetic { base: usize, neighbor: usize, gap: f64 },
}

#[derive(Debug, Clone)]
pub struct SmoteOutput {
    pub data: LabeledFeatures,
    pub origin: Vec<SampleOrigin>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brings every present class up to the majority count. Originals are kept
/// verbatim (and first); synthetic rows follow, grouped by class.
pub fn smote_oversample(
    train: &LabeledFeatures,
    k_neighbors: usize,
    seed: u64,
    exec: Exec,
) -> Result<SmoteOutput, PreprocessError> {
    if k_neighbors < 1 {
        return Err(PreprocessError::Oversampling("k_neighbors must be >= 1".into()));
    }
    let counts = train.class_counts();
    let majority = counts.iter().copied().max().unwrap_or(0);
    let mut out = train.clone();
    let mut origin: Vec<SampleOrigin> = (0..train.len()).map(SampleOrigin::Original).collect();

    for (class, &count) in counts.iter().enumerate() {
        if count == 0 || count == majority {
            continue;
        }
        if count < 2 {
            return Err(PreprocessError::Oversampling(format!(
                "class {class} has a single member; cannot interpolate"
            )));
        }
        let members: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        let k = k_neighbors.min(members.len() - 1);
        let neighbors: Vec<Vec<usize>> = exec.map_slice(&members, |&i| {
            let mut d: Vec<(f64, usize)> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (sq_dist(&train.features[i], &train.features[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        });

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        for _ in 0..(majority - count) {
            let m = rng.gen_range(0..members.len());
            let base = members[m];
            let neighbor = neighbors[m][rng.gen_range(0..k)];
            let gap: f64 = rng.gen();
            let x = &train.features[base];
            let y = &train.features[neighbor];
            out.features
                .push(x.iter().zip(y).map(|(a, b)| a + gap * (b - a)).collect());
            out.labels.push(class);
            origin.push(SampleOrigin::Synthetic {
                base,
                neighbor,
                gap,
            });
        }
    }
    Ok(SmoteOutput { data: out, origin })
}

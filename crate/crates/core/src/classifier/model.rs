//! Fusion MLP: a vitals branch, a trunk over `[text ∥ vitals-branch output]`
//! and a linear head. Inverted dropout follows both hidden layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClassifierError;
use crate::domain::LabelSet;
use crate::preprocess::{FeatureVector, FeaturizerConfig, VitalsVector, VITALS_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub vitals_dim: usize,
    pub vitals_hidden: usize,
    pub trunk_hidden: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn new(text_dim: usize, n_classes: usize) -> Self {
        Self {
            text_dim,
            vitals_dim: VITALS_DIM,
            vitals_hidden: 32,
            trunk_hidden: 256,
            n_classes,
            dropout_rate: 0.2,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.text_dim + self.vitals_dim
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ClassifierError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.text_dim == 0 || self.vitals_hidden == 0 || self.trunk_hidden == 0 || self.n_classes == 0
        {
            return Err(ClassifierError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform Kaiming fan-in initialization, zero bias.
    fn kaiming(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.inputs..(r + 1) * self.inputs]
    }

    fn forward_dense(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|r| self.bias[r] + self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Per-unit dropout multipliers: 0 for dropped units, `1/(1-p)` for survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub vitals: Vec<f64>,
    pub trunk: Vec<f64>,
}

impl DropoutMasks {
    pub fn identity(cfg: &ModelConfig) -> Self {
        Self {
            vitals: vec![1.0; cfg.vitals_hidden],
            trunk: vec![1.0; cfg.trunk_hidden],
        }
    }

    pub fn sample<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let p = cfg.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let vitals = draw(cfg.vitals_hidden);
        let trunk = draw(cfg.trunk_hidden);
        Self { vitals, trunk }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    text_nz: Vec<usize>,
    vitals_pre: Vec<f64>,
    vitals_out: Vec<f64>,
    trunk_pre: Vec<f64>,
    trunk_out: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub featurizer: FeaturizerConfig,
    pub labels: LabelSet,
    pub vitals_branch: Dense,
    pub trunk: Dense,
    pub head: Dense,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl ClassifierModel {
    pub fn new(
        config: ModelConfig,
        featurizer: FeaturizerConfig,
        labels: LabelSet,
        seed: u64,
    ) -> Result<Self, ClassifierError> {
        config.validate()?;
        if labels.len() != config.n_classes {
            return Err(ClassifierError::Config(format!(
                "{} labels for {} output classes",
                labels.len(),
                config.n_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vitals_branch = Dense::kaiming(config.vitals_dim, config.vitals_hidden, &mut rng);
        let trunk = Dense::kaiming(config.text_dim + config.vitals_hidden, config.trunk_hidden, &mut rng);
        let head = Dense::kaiming(config.trunk_hidden, config.n_classes, &mut rng);
        Ok(Self {
            config,
            featurizer,
            labels,
            vitals_branch,
            trunk,
            head,
        })
    }

    /// Layers ordered from the head toward the input; the position is the
    /// layer-decay depth.
    pub fn layers(&self) -> [&Dense; 3] {
        [&self.head, &self.trunk, &self.vitals_branch]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.head, &mut self.trunk, &mut self.vitals_branch]
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            head: Dense::zeros(self.head.inputs, self.head.outputs),
            trunk: Dense::zeros(self.trunk.inputs, self.trunk.outputs),
            vitals_branch: Dense::zeros(self.vitals_branch.inputs, self.vitals_branch.outputs),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn locate(&self, mut idx: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers().iter().enumerate() {
            if idx < l.weights.len() {
                return (li, true, idx);
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return (li, false, idx);
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access in `layers()` order, weights before bias.
    pub fn param(&self, idx: usize) -> f64 {
        let (li, w, i) = self.locate(idx);
        let l = self.layers()[li];
        if w {
            l.weights[i]
        } else {
            l.bias[i]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (li, w, i) = self.locate(idx);
        let mut layers = self.layers_mut();
        let l = &mut layers[li];
        if w {
            l.weights[i] = value;
        } else {
            l.bias[i] = value;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn check_input(&self, x: &[f64]) -> Result<(), ClassifierError> {
        if x.len() != self.config.fused_dim() {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.config.fused_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass over a fused input `[text ∥ vitals]`.
    pub fn forward_cached(&self, x: &[f64], masks: Option<&DropoutMasks>) -> ForwardCache {
        let td = self.config.text_dim;
        let (xt, xv) = x.split_at(td);
        let text_nz: Vec<usize> = (0..td).filter(|&i| xt[i] != 0.0).collect();

        let vitals_pre = self.vitals_branch.forward_dense(xv);
        let mut vitals_out: Vec<f64> = vitals_pre.iter().map(|&a| relu(a)).collect();
        if let Some(m) = masks {
            vitals_out.iter_mut().zip(&m.vitals).for_each(|(h, s)| *h *= s);
        }

        let trunk_pre: Vec<f64> = (0..self.trunk.outputs)
            .map(|r| {
                let row = self.trunk.row(r);
                let text: f64 = text_nz.iter().map(|&i| row[i] * xt[i]).sum();
                let vit: f64 = row[td..].iter().zip(&vitals_out).map(|(w, h)| w * h).sum();
                self.trunk.bias[r] + text + vit
            })
            .collect();
        let mut trunk_out: Vec<f64> = trunk_pre.iter().map(|&a| relu(a)).collect();
        if let Some(m) = masks {
            trunk_out.iter_mut().zip(&m.trunk).for_each(|(h, s)| *h *= s);
        }
        let logits = self.head.forward_dense(&trunk_out);
        ForwardCache {
            text_nz,
            vitals_pre,
            vitals_out,
            trunk_pre,
            trunk_out,
            logits,
        }
    }

    pub fn forward_fused(&self, x: &[f64], masks: Option<&DropoutMasks>) -> Vec<f64> {
        self.forward_cached(x, masks).logits
    }

    /// Accumulates `scale * dL/dθ` into `grads` given `dL/dlogits`.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &ForwardCache,
        masks: Option<&DropoutMasks>,
        dlogits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) {
        let td = self.config.text_dim;
        let (xt, xv) = x.split_at(td);
        let th = self.config.trunk_hidden;
        let vh = self.config.vitals_hidden;

        let mut d_trunk_out = vec![0.0; th];
        for (c, &g) in dlogits.iter().enumerate() {
            let g = g * scale;
            if g == 0.0 {
                continue;
            }
            grads.head.bias[c] += g;
            let wrow = self.head.row(c);
            let grow = &mut grads.head.weights[c * th..(c + 1) * th];
            for j in 0..th {
                grow[j] += g * cache.trunk_out[j];
                d_trunk_out[j] += g * wrow[j];
            }
        }

        let mut d_vitals_out = vec![0.0; vh];
        let tin = self.trunk.inputs;
        for r in 0..th {
            let mask = masks.map_or(1.0, |m| m.trunk[r]);
            if cache.trunk_pre[r] <= 0.0 || mask == 0.0 {
                continue;
            }
            let d = d_trunk_out[r] * mask;
            grads.trunk.bias[r] += d;
            let grow = &mut grads.trunk.weights[r * tin..(r + 1) * tin];
            for &i in &cache.text_nz {
                grow[i] += d * xt[i];
            }
            let wrow = self.trunk.row(r);
            for j in 0..vh {
                grow[td + j] += d * cache.vitals_out[j];
                d_vitals_out[j] += d * wrow[td + j];
            }
        }

        let vin = self.vitals_branch.inputs;
        for j in 0..vh {
            let mask = masks.map_or(1.0, |m| m.vitals[j]);
            if cache.vitals_pre[j] <= 0.0 || mask == 0.0 {
                continue;
            }
            let d = d_vitals_out[j] * mask;
            grads.vitals_branch.bias[j] += d;
            let grow = &mut grads.vitals_branch.weights[j * vin..(j + 1) * vin];
            for (g, &v) in grow.iter_mut().zip(xv) {
                *g += d * v;
            }
        }
    }

    /// Logits for separate text and vitals inputs. With dropout active, masks
    /// are drawn from `rng`.
    pub fn forward<R: Rng>(
        &self,
        text: &FeatureVector,
        vitals: &VitalsVector,
        dropout_active: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>, ClassifierError> {
        let x = fuse(text, vitals);
        self.check_input(&x)?;
        let masks = dropout_active.then(|| DropoutMasks::sample(&self.config, rng));
        Ok(self.forward_fused(&x, masks.as_ref()))
    }
}

/// Pre-branch concatenation `[text ∥ vitals]`.
pub fn fuse(text: &FeatureVector, vitals: &VitalsVector) -> Vec<f64> {
    let mut x = Vec::with_capacity(text.values.len() + vitals.values.len());
    x.extend_from_slice(&text.values);
    x.extend_from_slice(&vitals.values);
    x
}

/// Gradient buffers with the same shapes as the model layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head: Dense,
    pub trunk: Dense,
    pub vitals_branch: Dense,
}

impl Gradients {
    pub fn layers(&self) -> [&Dense; 3] {
        [&self.head, &self.trunk, &self.vitals_branch]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.head, &mut self.trunk, &mut self.vitals_branch]
    }

    pub fn zero(&mut self) {
        for l in self.layers_mut() {
            l.fill_zero();
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers()
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers_mut() {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= s);
        }
    }

    /// Flat access in the same order as [`ClassifierModel::param`].
    pub fn get(&self, mut idx: usize) -> f64 {
        for l in self.layers() {
            if idx < l.weights.len() {
                return l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("gradient index out of range");
    }
}

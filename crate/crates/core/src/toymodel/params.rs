use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use super::ModelError;

/// Every tensor of the encoder-decoder, stored row-major.
///
/// The same shape doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `vocab × hidden`, shared by the input lookup and the output layer.
    pub emb: Vec<f64>,
    pub enc_wx: Vec<f64>,
    pub enc_wh: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub dec_wx: Vec<f64>,
    pub dec_wh: Vec<f64>,
    pub dec_b: Vec<f64>,
    /// `hidden × hidden` projection applied before the tied output layer.
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

pub(crate) const TENSOR_NAMES: [&str; 9] = [
    "emb", "enc_wx", "enc_wh", "enc_b", "dec_wx", "dec_wh", "dec_b", "out_w", "out_b",
];

impl Weights {
    pub fn zeros(vocab: usize, hidden: usize) -> Self {
        let hh = hidden * hidden;
        Self {
            emb: vec![0.0; vocab * hidden],
            enc_wx: vec![0.0; hh],
            enc_wh: vec![0.0; hh],
            enc_b: vec![0.0; hidden],
            dec_wx: vec![0.0; hh],
            dec_wh: vec![0.0; hh],
            dec_b: vec![0.0; hidden],
            out_w: vec![0.0; hh],
            out_b: vec![0.0; vocab],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            &self.emb,
            &self.enc_wx,
            &self.enc_wh,
            &self.enc_b,
            &self.dec_wx,
            &self.dec_wh,
            &self.dec_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.emb,
            &mut self.enc_wx,
            &mut self.enc_wh,
            &mut self.enc_b,
            &mut self.dec_wx,
            &mut self.dec_wh,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn get(&self, flat: usize) -> f64 {
        let mut i = flat;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index {flat} out of range")
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        let mut i = flat;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {flat} out of range")
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Parameters of the question-generation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab: Vocab,
    pub hidden: usize,
    pub weights: Weights,
}

impl PolicyParams {
    /// Uniform init: embeddings in ±0.1, square matrices in ±1/√hidden,
    /// biases zero.
    pub fn init(vocab: Vocab, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::zeros(vocab.len(), hidden);
        let r = 1.0 / (hidden as f64).sqrt();
        let mut fill = |t: &mut Vec<f64>, range: f64| {
            for x in t.iter_mut() {
                *x = rng.gen_range(-range..range);
            }
        };
        fill(&mut w.emb, 0.1);
        fill(&mut w.enc_wx, r);
        fill(&mut w.enc_wh, r);
        fill(&mut w.dec_wx, r);
        fill(&mut w.dec_wh, r);
        fill(&mut w.out_w, r);
        Self {
            vocab,
            hidden,
            weights: w,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.n_params()
    }

    pub fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        shapes(self.vocab.len(), self.hidden)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let expected = self.shapes();
        for (name, t) in TENSOR_NAMES.iter().zip(self.weights.tensors()) {
            let [r, c] = expected[*name];
            if t.len() != r * c {
                return Err(ModelError::Shape(format!(
                    "{name} has {} values, expected {r}×{c}",
                    t.len()
                )));
            }
        }
        if !self.weights.all_finite() {
            return Err(ModelError::NonFinite(
                "parameters contain NaN or inf".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), ModelError> {
        let ckpt = Checkpoint {
            format: POLICY_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            hidden: self.hidden,
            vocab: self.vocab.clone(),
            shapes: self.shapes(),
            weights: self.weights.clone(),
            head: None,
        };
        ckpt.write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ModelError> {
        let ckpt = Checkpoint::read(path, POLICY_FORMAT)?;
        let params = PolicyParams {
            vocab: ckpt.vocab,
            hidden: ckpt.hidden,
            weights: ckpt.weights,
        };
        params.validate()?;
        Ok((params, ckpt.config_hash))
    }
}

pub(crate) fn shapes(vocab: usize, hidden: usize) -> BTreeMap<String, [usize; 2]> {
    let dims = [
        [vocab, hidden],
        [hidden, hidden],
        [hidden, hidden],
        [hidden, 1],
        [hidden, hidden],
        [hidden, hidden],
        [hidden, 1],
        [hidden, hidden],
        [vocab, 1],
    ];
    TENSOR_NAMES
        .iter()
        .zip(dims)
        .map(|(n, d)| (n.to_string(), d))
        .collect()
}

pub(crate) const POLICY_FORMAT: &str = "rlqg-policy";
pub(crate) const REWARD_FORMAT: &str = "rlqg-reward-model";
const CHECKPOINT_VERSION: u32 = 1;

/// Scalar reward head on the final decoder state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w: Vec<f64>,
    pub b: f64,
}

/// On-disk JSON container with a shape manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub hidden: usize,
    pub vocab: Vocab,
    pub shapes: BTreeMap<String, [usize; 2]>,
    pub weights: Weights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadWeights>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        let text =
            serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path, format: &str) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ckpt.format != format {
            return Err(ModelError::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {format}",
                path.display(),
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let expected = shapes(ckpt.vocab.len(), ckpt.hidden);
        if ckpt.shapes != expected {
            return Err(ModelError::Shape(
                "shape manifest does not match vocabulary and hidden size".into(),
            ));
        }
        Ok(ckpt)
    }
}
